//! Rate-distortion objectives. Images are in pixel units (0..=255) and the
//! rate is in bits per pixel.

use crate::error::{Error, Result};
use crate::metrics::{mse, ms_ssim, ms_ssim_with_grad};
use crate::numerics::Tensor;

/// `MSE(x, x_hat) + lambda * rate_bpp`.
pub fn loss_rd_mse(x: &Tensor, x_hat: &Tensor, rate_bpp: f64, lambda: f64) -> Result<f64> {
    Ok(mse(x, x_hat)? + lambda * rate_bpp)
}

/// [`loss_rd_mse`] and its gradient with respect to `x_hat`,
/// `2 (x_hat - x) / N`.
pub fn loss_rd_mse_with_grad(x: &Tensor, x_hat: &Tensor, rate_bpp: f64, lambda: f64) -> Result<(f64, Tensor)> {
    let loss = loss_rd_mse(x, x_hat, rate_bpp, lambda)?;
    let n = x.len() as f64;
    let grad = x_hat.zip_map(x, |a, b| 2.0 * (a - b) / n)?;
    Ok((loss, grad))
}

/// `(1 - MS-SSIM(x, x_hat)) + lambda * rate_bpp`.
pub fn loss_rd_msssim(x: &Tensor, x_hat: &Tensor, rate_bpp: f64, lambda: f64) -> Result<f64> {
    Ok(1.0 - ms_ssim(x, x_hat)? + lambda * rate_bpp)
}

/// [`loss_rd_msssim`] and its gradient with respect to `x_hat`.
pub fn loss_rd_msssim_with_grad(x: &Tensor, x_hat: &Tensor, rate_bpp: f64, lambda: f64) -> Result<(f64, Tensor)> {
    let (score, grad) = ms_ssim_with_grad(x, x_hat)?;
    Ok((1.0 - score + lambda * rate_bpp, grad.scale(-1.0)))
}

pub(crate) fn check_finite(loss: f64, iteration: u64) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence {
            what: "loss".into(),
            location: format!("iteration {iteration}"),
        })
    }
}
