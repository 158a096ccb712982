//! Quality metrics, Bjøntegaard deltas and rate-distortion curves.
//!
//! Image metrics take tensors in pixel units (0..=255).

mod bjontegaard;
mod msssim;

use std::path::Path;

pub use bjontegaard::{bd_psnr, bd_rate};
pub use msssim::{ms_ssim, ms_ssim_with_grad, MIN_SIDE as MS_SSIM_MIN_SIDE, SCALE_WEIGHTS};

use crate::error::{Error, Result};
use crate::image_io::RgbImage;
use crate::network::ScalableModel;
use crate::numerics::Tensor;
use crate::pipeline::{decode_progressive, sae_encode};

/// PSNR reported for identical inputs.
pub const PSNR_CAP_DB: f64 = 100.0;

/// One point of a rate-distortion curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RDPoint {
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

/// Mean squared error over all samples.
pub fn mse(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "MSE of shapes {} and {}",
            x.shape(),
            y.shape()
        )));
    }
    if x.is_empty() {
        return Err(Error::invalid("MSE of empty tensors"));
    }
    let sum: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / x.len() as f64)
}

/// PSNR for 8-bit data from a pooled MSE, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (255.0 * 255.0 / mse).log10()).min(PSNR_CAP_DB)
}

/// PSNR with the MSE pooled over all channels.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(psnr_from_mse(mse(x, y)?))
}

fn image_pair(x: &RgbImage, y: &RgbImage) -> Result<(Tensor, Tensor)> {
    if (x.width, x.height) != (y.width, y.height) {
        return Err(Error::invalid(format!(
            "images differ in size: {}x{} vs {}x{}",
            x.width, x.height, y.width, y.height
        )));
    }
    Ok((x.to_tensor(1.0), y.to_tensor(1.0)))
}

pub fn psnr_images(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    let (a, b) = image_pair(x, y)?;
    psnr(&a, &b)
}

pub fn ms_ssim_images(x: &RgbImage, y: &RgbImage) -> Result<f64> {
    let (a, b) = image_pair(x, y)?;
    ms_ssim(&a, &b)
}

/// One point per cumulative layer count `1..=max_layers`, averaged over the
/// images. Rates count payload bytes only.
pub fn rd_curve(model: &ScalableModel, images: &[RgbImage], max_layers: usize) -> Result<Vec<RDPoint>> {
    if images.is_empty() {
        return Err(Error::invalid("rate-distortion curve of zero images"));
    }
    let mut sums = vec![RDPoint { bpp: 0.0, psnr_db: 0.0, ms_ssim: 0.0 }; max_layers];
    for img in images {
        let stream = sae_encode(img, model, max_layers)?;
        let bpp = stream.cumulative_bpp();
        for (k, dec) in decode_progressive(&stream, model)?.iter().enumerate() {
            sums[k].bpp += bpp[k];
            sums[k].psnr_db += psnr_images(img, dec)?;
            sums[k].ms_ssim += ms_ssim_images(img, dec)?;
        }
    }
    let n = images.len() as f64;
    Ok(sums
        .into_iter()
        .map(|p| RDPoint {
            bpp: p.bpp / n,
            psnr_db: p.psnr_db / n,
            ms_ssim: p.ms_ssim / n,
        })
        .collect())
}

/// Column order of the curve CSV.
pub const CURVE_HEADER: [&str; 4] = ["layer", "bpp", "psnr_db", "ms_ssim"];

/// Writes `layer,bpp,psnr_db,ms_ssim` rows, layers numbered from 1.
pub fn write_curve_csv(path: &Path, points: &[RDPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(CURVE_HEADER)?;
    for (i, p) in points.iter().enumerate() {
        w.write_record([
            (i + 1).to_string(),
            format!("{:.6}", p.bpp),
            format!("{:.4}", p.psnr_db),
            format!("{:.6}", p.ms_ssim),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a file written by [`write_curve_csv`].
pub fn read_curve_csv(path: &Path) -> Result<Vec<RDPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| -> Result<f64> {
            rec.get(i)
                .and_then(|s| s.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bad curve row {:?}", rec)))
        };
        out.push(RDPoint {
            bpp: field(1)?,
            psnr_db: field(2)?,
            ms_ssim: field(3)?,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Shape;

    #[test]
    fn psnr_closed_forms() {
        let x = Tensor::filled(Shape::new(1, 3, 4, 4), 100.0);
        assert_eq!(psnr(&x, &x).unwrap(), PSNR_CAP_DB);
        let y = x.map(|v| v + 1.0);
        assert!((psnr(&x, &y).unwrap() - 48.1308).abs() < 1e-3);
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn curve_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        let pts = vec![
            RDPoint { bpp: 0.125, psnr_db: 30.5, ms_ssim: 0.95 },
            RDPoint { bpp: 0.5, psnr_db: 35.25, ms_ssim: 0.975 },
        ];
        write_curve_csv(&p, &pts).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("layer,bpp,psnr_db,ms_ssim\n1,"));
        assert_eq!(read_curve_csv(&p).unwrap(), pts);
    }
}
