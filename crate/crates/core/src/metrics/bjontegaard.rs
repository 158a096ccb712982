//! Bjøntegaard deltas between two rate-distortion curves.
//!
//! Each curve is fitted by a least-squares cubic, either log10(rate) as a
//! function of PSNR (for the rate delta) or PSNR as a function of log10(rate)
//! (for the quality delta). The difference of the fitted integrals over the
//! overlapping interval, divided by its length, is the average delta.

use nalgebra::{DMatrix, DVector};

use super::RDPoint;
use crate::error::{Error, Result};

const MIN_POINTS: usize = 4;

/// Least-squares cubic coefficients (constant term first).
fn fit_cubic(xs: &[f64], ys: &[f64]) -> Result<[f64; 4]> {
    let n = xs.len();
    let a = DMatrix::from_fn(n, 4, |r, c| xs[r].powi(c as i32));
    let b = DVector::from_column_slice(ys);
    let sol = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::Metric(format!("cubic fit failed: {e}")))?;
    Ok([sol[0], sol[1], sol[2], sol[3]])
}

fn integral(c: &[f64; 4], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| c[0] * x + c[1] * x.powi(2) / 2.0 + c[2] * x.powi(3) / 3.0 + c[3] * x.powi(4) / 4.0;
    prim(hi) - prim(lo)
}

fn check(curve: &[RDPoint], name: &str) -> Result<()> {
    if curve.len() < MIN_POINTS {
        return Err(Error::Metric(format!(
            "{name} curve has {} points, at least {MIN_POINTS} are needed",
            curve.len()
        )));
    }
    if curve.iter().any(|p| !(p.bpp > 0.0) || !p.psnr_db.is_finite()) {
        return Err(Error::Metric(format!("{name} curve has a non-positive rate or non-finite PSNR")));
    }
    Ok(())
}

fn range(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Average difference of `fit(test) - fit(anchor)` over the shared domain.
fn average_delta(
    anchor: (&[f64], &[f64]),
    test: (&[f64], &[f64]),
    what: &str,
) -> Result<f64> {
    let (a_lo, a_hi) = range(anchor.0);
    let (t_lo, t_hi) = range(test.0);
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if !(hi > lo) {
        return Err(Error::Metric(format!(
            "{what} ranges do not overlap: [{a_lo:.4}, {a_hi:.4}] vs [{t_lo:.4}, {t_hi:.4}]"
        )));
    }
    let fa = fit_cubic(anchor.0, anchor.1)?;
    let ft = fit_cubic(test.0, test.1)?;
    Ok((integral(&ft, lo, hi) - integral(&fa, lo, hi)) / (hi - lo))
}

fn split(curve: &[RDPoint]) -> (Vec<f64>, Vec<f64>) {
    curve.iter().map(|p| (p.bpp.log10(), p.psnr_db)).unzip()
}

/// Average bitrate change of `test` relative to `anchor` at equal PSNR, in
/// percent. Negative means `test` needs fewer bits.
pub fn bd_rate(anchor: &[RDPoint], test: &[RDPoint]) -> Result<f64> {
    check(anchor, "anchor")?;
    check(test, "test")?;
    let (ar, aq) = split(anchor);
    let (tr, tq) = split(test);
    let d = average_delta((&aq, &ar), (&tq, &tr), "PSNR")?;
    Ok((10f64.powf(d) - 1.0) * 100.0)
}

/// Average PSNR change of `test` relative to `anchor` at equal rate, in dB.
pub fn bd_psnr(anchor: &[RDPoint], test: &[RDPoint]) -> Result<f64> {
    check(anchor, "anchor")?;
    check(test, "test")?;
    let (ar, aq) = split(anchor);
    let (tr, tq) = split(test);
    average_delta((&ar, &aq), (&tr, &tq), "log-rate")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve(scale: f64, shift: f64) -> Vec<RDPoint> {
        [0.1, 0.25, 0.5, 1.0, 2.0]
            .iter()
            .map(|&b: &f64| RDPoint {
                bpp: b * scale,
                psnr_db: 30.0 + 6.0 * b.log2() + shift,
                ms_ssim: 0.9,
            })
            .collect()
    }

    #[test]
    fn identical_curves_give_zero() {
        let a = curve(1.0, 0.0);
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
        assert!(bd_psnr(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn halved_rate_is_minus_fifty_percent() {
        let a = curve(1.0, 0.0);
        let b = curve(0.5, 0.0);
        assert!((bd_rate(&a, &b).unwrap() + 50.0).abs() < 0.1);
        // 6 dB per doubling of rate.
        assert!((bd_psnr(&a, &b).unwrap() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn constant_quality_offset() {
        let a = curve(1.0, 0.0);
        let b = curve(1.0, 1.5);
        assert!((bd_psnr(&a, &b).unwrap() - 1.5).abs() < 1e-9);
        assert!(bd_rate(&a, &b).unwrap() < 0.0);
    }

    #[test]
    fn disjoint_or_short_curves_are_errors() {
        let a = curve(1.0, 0.0);
        let far = curve(1.0, 100.0);
        assert!(matches!(bd_rate(&a, &far), Err(Error::Metric(_))));
        assert!(matches!(bd_rate(&a[..3], &a), Err(Error::Metric(_))));
    }
}
