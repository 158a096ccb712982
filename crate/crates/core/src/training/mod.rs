//! Layer-by-layer rate-distortion training.

mod config;
mod dataset;
mod losses;
mod synthetic;
mod trainer;

pub use config::TrainingConfig;
pub use dataset::{derive_seed, expand_paths, ingest_dataset, Dataset};
pub use losses::{loss_rd_mse, loss_rd_mse_with_grad, loss_rd_msssim, loss_rd_msssim_with_grad};
pub use synthetic::{synthetic_image, synthetic_images};
pub use trainer::{
    checkpoint_from_bytes, checkpoint_to_bytes, load_checkpoint, train_layer, validation_stable,
    IterationStats, StopReason, TrainState, Trainer, TrainingReport, ValidationPoint,
};

use crate::error::Result;
use crate::image_io::RgbImage;
use crate::metrics::rd_curve;
use crate::network::{layer_seed, LayerModel, ScalableModel, FEATURE_MAP_LADDER};

/// Untrained model shaped by `cfg`: `num_layers` layers with the configured
/// feature maps and rate weights, or the defaults for the objective.
pub fn build_model(cfg: &TrainingConfig) -> Result<ScalableModel> {
    cfg.validate()?;
    let layers = (0..cfg.num_layers)
        .map(|i| {
            let fm = cfg.feature_maps.get(i).copied().unwrap_or(FEATURE_MAP_LADDER[i]);
            let lambda = match cfg.lambdas.get(i) {
                Some(&l) => l,
                None => cfg.objective.lambda(i).expect("layer count validated"),
            };
            LayerModel::new(i, fm, lambda, layer_seed(cfg.seed, i))
        })
        .collect::<Result<Vec<_>>>()?;
    ScalableModel::new(layers)
}

/// Result of one base-layer run of [`grid_sweep`], measured by actually
/// coding the evaluation images.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepPoint {
    pub feature_maps: usize,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr_db: f64,
    pub ms_ssim: f64,
}

/// Trains a single-layer model for every `(feature_maps, lambda)` pair and
/// codes `eval` with it.
pub fn grid_sweep(
    data: &Dataset,
    validation: Option<&Dataset>,
    eval: &[RgbImage],
    cfg: &TrainingConfig,
    feature_maps: &[usize],
    lambdas: &[f64],
) -> Result<Vec<SweepPoint>> {
    let mut out = Vec::with_capacity(feature_maps.len() * lambdas.len());
    for &fm in feature_maps {
        for &lambda in lambdas {
            let mut model = ScalableModel::new(vec![LayerModel::new(0, fm, lambda, layer_seed(cfg.seed, 0))?])?;
            train_layer(&mut model, 0, data, validation, cfg)?;
            let p = rd_curve(&model, eval, 1)?[0];
            log::info!("sweep fm {fm} lambda {lambda}: {:.4} bpp, {:.2} dB", p.bpp, p.psnr_db);
            out.push(SweepPoint {
                feature_maps: fm,
                lambda,
                bpp: p.bpp,
                psnr_db: p.psnr_db,
                ms_ssim: p.ms_ssim,
            });
        }
    }
    Ok(out)
}

/// `feature_maps,lambda,bpp,psnr_db,ms_ssim` rows.
pub fn write_sweep_csv(path: &std::path::Path, points: &[SweepPoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["feature_maps", "lambda", "bpp", "psnr_db", "ms_ssim"])?;
    for p in points {
        w.write_record([
            p.feature_maps.to_string(),
            p.lambda.to_string(),
            format!("{:.6}", p.bpp),
            format!("{:.4}", p.psnr_db),
            format!("{:.6}", p.ms_ssim),
        ])?;
    }
    w.flush()?;
    Ok(())
}
