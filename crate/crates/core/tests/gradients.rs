mod common;

use common::*;

fn assert_within(r: GradReport, tol: f64) {
    assert!(r.checked > 0);
    assert!(
        r.max_rel_err <= tol,
        "{}: max relative error {:.3e} over {} entries exceeds {tol:e}",
        r.name,
        r.max_rel_err,
        r.checked
    );
}

#[test]
fn conv2d_matches_finite_differences() {
    for seed in 0..3 {
        assert_within(check_conv(seed), 1e-6);
    }
}

#[test]
fn tconv2d_matches_finite_differences() {
    for seed in 0..3 {
        assert_within(check_tconv(seed), 1e-6);
    }
}

#[test]
fn gdn_matches_finite_differences() {
    for seed in 0..3 {
        assert_within(check_gdn(seed), 1e-6);
    }
}

#[test]
fn igdn_matches_finite_differences() {
    for seed in 0..3 {
        assert_within(check_igdn(seed), 1e-6);
    }
}

#[test]
fn rate_matches_finite_differences() {
    for seed in 0..3 {
        assert_within(check_rate(seed), 1e-6);
    }
}

#[test]
fn ms_ssim_matches_finite_differences() {
    assert_within(check_ms_ssim(5, 48), 1e-4);
}

#[test]
fn whole_layer_matches_finite_differences() {
    for seed in 0..2 {
        assert_within(check_layer(seed), 1e-6);
    }
}
