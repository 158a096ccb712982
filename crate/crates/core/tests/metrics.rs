use proptest::prelude::*;
use sae_core::metrics::{bd_psnr, bd_rate, ms_ssim, mse, psnr, RDPoint, PSNR_CAP_DB};
use sae_core::numerics::{Shape, Tensor};

fn curve() -> Vec<RDPoint> {
    [0.1, 0.25, 0.5, 1.0]
        .iter()
        .enumerate()
        .map(|(i, &bpp)| RDPoint { bpp, psnr_db: 27.0 + 3.0 * i as f64, ms_ssim: 0.9 })
        .collect()
}

fn pair(seed: u64, side: usize, noise: f64) -> (Tensor, Tensor) {
    let shape = Shape::new(1, 3, side, side);
    let x = Tensor::from_fn(shape, |_, c, y, x| ((x * 5 + y * 3 + c * 60 + seed as usize) % 256) as f64);
    let y = x.map(|v| v + noise);
    (x, y)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn mse_and_psnr_are_symmetric(seed in 0u64..1000, noise in -20.0f64..20.0) {
        let (x, y) = pair(seed, 8, noise);
        let m = mse(&x, &y).unwrap();
        prop_assert!((m - noise * noise).abs() <= 1e-9 * (1.0 + m));
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
        prop_assert!(psnr(&x, &y).unwrap() <= PSNR_CAP_DB);
        prop_assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
    }

    #[test]
    fn bd_rate_of_a_scaled_curve_is_the_scale(factor in 0.2f64..3.0) {
        let anchor = curve();
        let test: Vec<RDPoint> = anchor.iter().map(|p| RDPoint { bpp: p.bpp * factor, ..*p }).collect();
        let r = bd_rate(&anchor, &test).unwrap();
        prop_assert!((r - (factor - 1.0) * 100.0).abs() <= 1e-6, "{}", r);
    }

    #[test]
    fn bd_psnr_of_a_shifted_curve_is_the_shift(shift in -3.0f64..3.0) {
        let anchor = curve();
        let test: Vec<RDPoint> = anchor.iter().map(|p| RDPoint { psnr_db: p.psnr_db + shift, ..*p }).collect();
        prop_assert!((bd_psnr(&anchor, &test).unwrap() - shift).abs() <= 1e-6);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn ms_ssim_is_symmetric_and_bounded(seed in 0u64..100, noise in 1.0f64..30.0) {
        let (x, y) = pair(seed, 176, 0.0);
        let y = Tensor::from_fn(y.shape(), |b, c, i, j| {
            let h = ((i * 131 + j * 71 + c * 13 + seed as usize) % 97) as f64 / 97.0 - 0.5;
            (y.at(b, c, i, j) + noise * h).clamp(0.0, 255.0)
        });
        let a = ms_ssim(&x, &y).unwrap();
        let b = ms_ssim(&y, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a < 1.0 && a > 0.0);
        prop_assert!((ms_ssim(&x, &x).unwrap() - 1.0).abs() <= 1e-12);
    }
}
