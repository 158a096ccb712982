//! Layer-by-layer optimisation with resumable state.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::bytes::{put_f64s, Reader};
use crate::entropy_model::{add_uniform_noise, quantize, rate_bits, rate_bits_with_grad};
use crate::error::{Error, Result};
use crate::model_file::{model_from_bytes, model_to_bytes};
use crate::network::{Objective, ScalableModel, INPUT_OFFSET};
use crate::numerics::{adam_step, AdamState, ParamSlot, Tensor};
use crate::pipeline::reconstruct_tensor;

use super::config::TrainingConfig;
use super::dataset::{derive_seed, Dataset};
use super::losses::{check_finite, loss_rd_mse, loss_rd_mse_with_grad, loss_rd_msssim, loss_rd_msssim_with_grad};

/// Why a run ended.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EpochCap,
    IterationCap,
    ValidationStable,
}

impl StopReason {
    fn code(self) -> u8 {
        match self {
            StopReason::EpochCap => 1,
            StopReason::IterationCap => 2,
            StopReason::ValidationStable => 3,
        }
    }

    fn from_code(code: u8) -> Result<Option<Self>> {
        Ok(match code {
            0 => None,
            1 => Some(StopReason::EpochCap),
            2 => Some(StopReason::IterationCap),
            3 => Some(StopReason::ValidationStable),
            _ => return Err(Error::Format(format!("unknown stop reason {code}"))),
        })
    }
}

impl std::fmt::Display for StopReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StopReason::EpochCap => "epoch cap reached",
            StopReason::IterationCap => "iteration cap reached",
            StopReason::ValidationStable => "validation loss stable",
        })
    }
}

/// Loss terms of one training iteration. Distortion is in the units of
/// the objective: pixel MSE, or 1 - MS-SSIM.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterationStats {
    pub iteration: u64,
    pub loss: f64,
    pub bpp: f64,
    pub distortion: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationPoint {
    pub iteration: u64,
    pub loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainingReport {
    pub layer_index: usize,
    pub iterations: Vec<IterationStats>,
    pub validation: Vec<ValidationPoint>,
    pub stop_reason: Option<StopReason>,
}

impl TrainingReport {
    /// Mean training loss over iterations `range`.
    pub fn mean_loss(&self, range: std::ops::Range<usize>) -> f64 {
        let s = &self.iterations[range];
        s.iter().map(|r| r.loss).sum::<f64>() / s.len() as f64
    }

    /// `iteration,loss,bpp,distortion` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss", "bpp", "distortion"])?;
        for r in &self.iterations {
            w.write_record([
                r.iteration.to_string(),
                r.loss.to_string(),
                r.bpp.to_string(),
                r.distortion.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `iteration,loss` rows of the validation curve.
    pub fn write_validation_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "loss"])?;
        for r in &self.validation {
            w.write_record([r.iteration.to_string(), r.loss.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// True when the last `window` entries of `history` span at most
/// `tolerance` times their mean. Shorter histories are never stable.
pub fn validation_stable(history: &[f64], window: usize, tolerance: f64) -> bool {
    if window == 0 || history.len() < window {
        return false;
    }
    let tail = &history[history.len() - window..];
    let max = tail.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = tail.iter().cloned().fold(f64::INFINITY, f64::min);
    let mean = tail.iter().sum::<f64>() / window as f64;
    max - min <= tolerance * mean.abs()
}

/// Everything besides the model needed to continue a run bit-exactly.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub layer_index: usize,
    /// Iterations completed so far.
    pub iteration: u64,
    pub ae_adam: AdamState,
    pub entropy_adam: AdamState,
    pub report: TrainingReport,
}

/// Trains one layer of a model; lower layers are read but never written.
pub struct Trainer<'a> {
    model: &'a mut ScalableModel,
    data: &'a Dataset,
    validation: Option<Vec<Tensor>>,
    cfg: &'a TrainingConfig,
    state: TrainState,
}

fn check_prerequisites(model: &ScalableModel, layer_index: usize, data: &Dataset, cfg: &TrainingConfig) -> Result<()> {
    cfg.validate()?;
    if layer_index >= model.num_layers() {
        return Err(Error::invalid(format!(
            "layer {layer_index} does not exist in a {}-layer model",
            model.num_layers()
        )));
    }
    if let Some(l) = model.layers[..layer_index].iter().find(|l| !l.is_trained()) {
        return Err(Error::Model(format!(
            "layer {layer_index} needs layer {} to be trained first",
            l.layer_index
        )));
    }
    if data.crop() != cfg.crop {
        return Err(Error::invalid(format!(
            "dataset crops {} but the config asks for {}",
            data.crop(),
            cfg.crop
        )));
    }
    Ok(())
}

impl<'a> Trainer<'a> {
    /// Starts training `layer_index` from its current parameters. A
    /// previously frozen layer is thawed.
    pub fn new(
        model: &'a mut ScalableModel,
        layer_index: usize,
        data: &'a Dataset,
        validation: Option<&Dataset>,
        cfg: &'a TrainingConfig,
    ) -> Result<Self> {
        check_prerequisites(model, layer_index, data, cfg)?;
        let layer = &mut model.layers[layer_index];
        layer.cdf = None;
        let ae_lengths: Vec<usize> = layer.ae.params_mut().iter().map(|p| p.values.len()).collect();
        let ent_lengths: Vec<usize> = layer.entropy.tensors().iter().map(|t| t.1.len()).collect();
        let state = TrainState {
            layer_index,
            iteration: 0,
            ae_adam: AdamState::new(&ae_lengths, cfg.ae_learning_rate),
            entropy_adam: AdamState::new(&ent_lengths, cfg.rate_learning_rate),
            report: TrainingReport {
                layer_index,
                ..TrainingReport::default()
            },
        };
        Self::with_state(model, data, validation, cfg, state)
    }

    /// Continues a run from a checkpointed state. `model` must be the model
    /// saved with that state.
    pub fn resume(
        model: &'a mut ScalableModel,
        state: TrainState,
        data: &'a Dataset,
        validation: Option<&Dataset>,
        cfg: &'a TrainingConfig,
    ) -> Result<Self> {
        check_prerequisites(model, state.layer_index, data, cfg)?;
        Self::with_state(model, data, validation, cfg, state)
    }

    fn with_state(
        model: &'a mut ScalableModel,
        data: &'a Dataset,
        validation: Option<&Dataset>,
        cfg: &'a TrainingConfig,
        state: TrainState,
    ) -> Result<Self> {
        let validation = match validation {
            Some(v) => Some(v.centre_crops()?),
            None => None,
        };
        Ok(Trainer {
            model,
            data,
            validation,
            cfg,
            state,
        })
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &ScalableModel {
        self.model
    }

    /// Iteration cap implied by the epoch cap and `max_iterations`.
    pub fn iteration_cap(&self) -> (u64, StopReason) {
        let epochs = self.cfg.epochs.saturating_mul(self.data.batches_per_epoch(self.cfg.batch_size));
        match self.cfg.max_iterations {
            Some(m) if m < epochs => (m, StopReason::IterationCap),
            _ => (epochs, StopReason::EpochCap),
        }
    }

    fn validation_interval(&self) -> u64 {
        match self.cfg.validation_interval {
            0 => self.data.batches_per_epoch(self.cfg.batch_size),
            n => n,
        }
    }

    /// Residual target of the trained layer and the frozen prediction it
    /// is added to, both in model units.
    fn split(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let k = self.state.layer_index;
        if k == 0 {
            return Ok((x.clone(), Tensor::zeros(x.shape())));
        }
        let prev = reconstruct_tensor(x, self.model, k)?;
        Ok((x.sub(&prev)?, prev))
    }

    /// Model units to the pixel scale the distortion is measured in.
    fn to_pixels(&self, t: &Tensor) -> Tensor {
        let range = self.cfg.distortion_range;
        t.map(|v| (v + INPUT_OFFSET) * range)
    }

    fn objective_loss(&self, x: &Tensor, x_hat: &Tensor, bpp: f64, lambda: f64) -> Result<f64> {
        let (xp, hp) = (self.to_pixels(x), self.to_pixels(x_hat));
        match self.cfg.objective {
            Objective::Mse => loss_rd_mse(&xp, &hp, bpp, lambda),
            Objective::MsSsim => loss_rd_msssim(&xp, &hp, bpp, lambda),
        }
    }

    /// One optimisation step on batch `state.iteration`.
    pub fn step(&mut self) -> Result<IterationStats> {
        let it = self.state.iteration;
        let k = self.state.layer_index;
        let x = self.data.batch(it, self.cfg.batch_size)?;
        let (target, prev) = self.split(&x)?;
        let layer = &self.model.layers[k];
        let lambda = layer.lambda_rate;
        let s = x.shape();
        let pixels = s.batch * s.height * s.width;

        let (latent, enc_trace) = layer.analysis_traced(&target)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.cfg.seed, k as u64, it]));
        let noisy = add_uniform_noise(&latent, &mut rng);
        let (bpp, grad_rate, mut entropy_grads) = rate_bits_with_grad(&noisy, &layer.entropy, pixels)?;
        let (out, dec_trace) = layer.synthesis_traced(&noisy)?;
        let x_hat = prev.add(&out)?;

        let range = self.cfg.distortion_range;
        let (xp, hp) = (self.to_pixels(&x), self.to_pixels(&x_hat));
        let (loss, grad_pixels) = match self.cfg.objective {
            Objective::Mse => loss_rd_mse_with_grad(&xp, &hp, bpp, lambda)?,
            Objective::MsSsim => loss_rd_msssim_with_grad(&xp, &hp, bpp, lambda)?,
        };
        check_finite(loss, it)?;

        let mut ae_grads = layer.ae.zeros_like();
        let grad_out = grad_pixels.scale(range);
        let mut grad_latent = layer.synthesis_backward(&dec_trace, &grad_out, &mut ae_grads)?;
        grad_latent.add_assign(&grad_rate.scale(lambda))?;
        layer.analysis_backward(&enc_trace, &grad_latent, &mut ae_grads)?;
        entropy_grads.scale(lambda);

        let layer = &mut self.model.layers[k];
        let mut ae_slots: Vec<ParamSlot<'_>> = layer
            .ae
            .params_mut()
            .into_iter()
            .zip(ae_grads.params_mut())
            .map(|(p, g)| ParamSlot {
                name: format!("layer{k}.{}", p.name),
                values: p.values,
                grad: g.values,
                lower_bound: p.lower_bound,
            })
            .collect();
        adam_step(&mut ae_slots, &mut self.state.ae_adam)?;

        self.state.entropy_adam.learning_rate = self.cfg.rate_lr_at(it);
        let ent_grads = entropy_grads.tensors();
        let mut ent_slots: Vec<ParamSlot<'_>> = layer
            .entropy
            .tensors_mut()
            .into_iter()
            .zip(ent_grads.iter())
            .map(|((name, values), (_, g))| ParamSlot {
                name: format!("layer{k}.{name}"),
                values,
                grad: g,
                lower_bound: None,
            })
            .collect();
        adam_step(&mut ent_slots, &mut self.state.entropy_adam)?;

        let stats = IterationStats {
            iteration: it,
            loss,
            bpp,
            distortion: loss - lambda * bpp,
        };
        self.state.iteration += 1;
        self.state.report.iterations.push(stats);
        if it % 100 == 0 {
            log::info!("layer {k} iteration {it}: loss {loss:.4} bpp {bpp:.4}");
        }
        Ok(stats)
    }

    /// Loss on the validation crops with rounding in place of noise.
    pub fn validation_loss(&self) -> Result<Option<f64>> {
        let Some(crops) = &self.validation else {
            return Ok(None);
        };
        let layer = &self.model.layers[self.state.layer_index];
        let mut total = 0.0;
        for x in crops {
            let (target, prev) = self.split(x)?;
            let q = quantize(&layer.analysis(&target)?).to_tensor();
            let s = x.shape();
            let bpp = rate_bits(&q, &layer.entropy, s.batch * s.height * s.width)?;
            let x_hat = prev.add(&layer.synthesis(&q)?)?;
            total += self.objective_loss(x, &x_hat, bpp, layer.lambda_rate)?;
        }
        Ok(Some(total / crops.len() as f64))
    }

    /// Runs until a stop rule fires or `budget` more iterations have run.
    /// Returns the stop reason, or `None` when only the budget ran out.
    pub fn run(&mut self, budget: Option<u64>) -> Result<Option<StopReason>> {
        if let Some(r) = self.state.report.stop_reason {
            return Ok(Some(r));
        }
        let (cap, cap_reason) = self.iteration_cap();
        let interval = self.validation_interval();
        let mut done = 0u64;
        loop {
            if self.state.iteration >= cap {
                self.state.report.stop_reason = Some(cap_reason);
                return Ok(Some(cap_reason));
            }
            if budget.is_some_and(|b| done >= b) {
                return Ok(None);
            }
            self.step()?;
            done += 1;
            if self.state.iteration % interval == 0 {
                if let Some(loss) = self.validation_loss()? {
                    let iteration = self.state.iteration;
                    self.state.report.validation.push(ValidationPoint { iteration, loss });
                    log::info!("layer {} validation at {iteration}: {loss:.4}", self.state.layer_index);
                    let history: Vec<f64> = self.state.report.validation.iter().map(|v| v.loss).collect();
                    if validation_stable(&history, self.cfg.stability_window, self.cfg.stability_tolerance) {
                        self.state.report.stop_reason = Some(StopReason::ValidationStable);
                        return Ok(Some(StopReason::ValidationStable));
                    }
                }
            }
        }
    }

    /// Freezes the trained layer's coding tables and returns the report.
    pub fn finish(self) -> Result<TrainingReport> {
        self.model.layers[self.state.layer_index].freeze()?;
        Ok(self.state.report)
    }

    /// Writes the model and optimiser state to `path`.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        std::fs::write(path, checkpoint_to_bytes(self.model, &self.state)?)?;
        Ok(())
    }
}

/// Trains `layer_index` to a stop rule and freezes it.
pub fn train_layer(
    model: &mut ScalableModel,
    layer_index: usize,
    data: &Dataset,
    validation: Option<&Dataset>,
    cfg: &TrainingConfig,
) -> Result<TrainingReport> {
    let mut t = Trainer::new(model, layer_index, data, validation, cfg)?;
    t.run(None)?;
    t.finish()
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"SAEK";
const CHECKPOINT_VERSION: u16 = 1;

fn put_adam(out: &mut Vec<u8>, a: &AdamState) {
    out.extend_from_slice(&a.step_count.to_le_bytes());
    for v in [a.learning_rate, a.beta1, a.beta2, a.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(a.first_moment.len() as u32).to_le_bytes());
    for (m, v) in a.first_moment.iter().zip(&a.second_moment) {
        out.extend_from_slice(&(m.len() as u32).to_le_bytes());
        put_f64s(out, m);
        put_f64s(out, v);
    }
}

fn read_adam(r: &mut Reader<'_>) -> Result<AdamState> {
    let step_count = r.u64()?;
    let (learning_rate, beta1, beta2, epsilon) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let n = r.u32()? as usize;
    let mut first_moment = Vec::with_capacity(n.min(1024));
    let mut second_moment = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = r.u32()? as usize;
        if len * 16 > r.remaining() {
            return Err(Error::Format("checkpoint optimiser state is truncated".into()));
        }
        let mut m = vec![0.0; len];
        let mut v = vec![0.0; len];
        r.f64_into(&mut m)?;
        r.f64_into(&mut v)?;
        first_moment.push(m);
        second_moment.push(v);
    }
    Ok(AdamState {
        step_count,
        first_moment,
        second_moment,
        learning_rate,
        beta1,
        beta2,
        epsilon,
    })
}

/// Checkpoint layout: magic, version, model length and bytes, layer index,
/// iteration, both optimiser states, report rows, stop code, CRC-32.
pub fn checkpoint_to_bytes(model: &ScalableModel, state: &TrainState) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let m = model_to_bytes(model)?;
    out.extend_from_slice(&(m.len() as u64).to_le_bytes());
    out.extend_from_slice(&m);
    out.push(state.layer_index as u8);
    out.extend_from_slice(&state.iteration.to_le_bytes());
    put_adam(&mut out, &state.ae_adam);
    put_adam(&mut out, &state.entropy_adam);
    out.extend_from_slice(&(state.report.iterations.len() as u64).to_le_bytes());
    for r in &state.report.iterations {
        out.extend_from_slice(&r.iteration.to_le_bytes());
        put_f64s(&mut out, &[r.loss, r.bpp, r.distortion]);
    }
    out.extend_from_slice(&(state.report.validation.len() as u64).to_le_bytes());
    for v in &state.report.validation {
        out.extend_from_slice(&v.iteration.to_le_bytes());
        out.extend_from_slice(&v.loss.to_le_bytes());
    }
    out.push(state.report.stop_reason.map_or(0, StopReason::code));
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<(ScalableModel, TrainState)> {
    let bad = |what: &str| Error::Format(format!("checkpoint: {what}"));
    if bytes.len() < 10 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let (body, crc) = bytes.split_at(bytes.len() - 4);
    if crc32fast::hash(body) != u32::from_le_bytes(crc.try_into().expect("4 bytes")) {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader::new(&body[4..]);
    let version = r.u16()?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let len = r.u64()? as usize;
    if len > r.remaining() {
        return Err(bad("model section is truncated"));
    }
    let model = model_from_bytes(r.take(len)?)?;
    let layer_index = r.u8()? as usize;
    let iteration = r.u64()?;
    let ae_adam = read_adam(&mut r)?;
    let entropy_adam = read_adam(&mut r)?;
    let n = r.u64()? as usize;
    if n.saturating_mul(32) > r.remaining() {
        return Err(bad("report is truncated"));
    }
    let mut iterations = Vec::with_capacity(n);
    for _ in 0..n {
        iterations.push(IterationStats {
            iteration: r.u64()?,
            loss: r.f64()?,
            bpp: r.f64()?,
            distortion: r.f64()?,
        });
    }
    let n = r.u64()? as usize;
    if n.saturating_mul(16) > r.remaining() {
        return Err(bad("validation curve is truncated"));
    }
    let mut validation = Vec::with_capacity(n);
    for _ in 0..n {
        validation.push(ValidationPoint {
            iteration: r.u64()?,
            loss: r.f64()?,
        });
    }
    let stop_reason = StopReason::from_code(r.u8()?)?;
    if r.remaining() != 0 {
        return Err(bad("trailing bytes"));
    }
    if layer_index >= model.num_layers() {
        return Err(bad("layer index outside the model"));
    }
    let state = TrainState {
        layer_index,
        iteration,
        ae_adam,
        entropy_adam,
        report: TrainingReport {
            layer_index,
            iterations,
            validation,
            stop_reason,
        },
    };
    Ok((model, state))
}

pub fn load_checkpoint(path: &Path) -> Result<(ScalableModel, TrainState)> {
    checkpoint_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stability_rule() {
        assert!(validation_stable(&[2.0; 5], 5, 0.01));
        let decreasing: Vec<f64> = (0..8).map(|i| 100.0 * 0.9f64.powi(i)).collect();
        assert!(!validation_stable(&decreasing, 5, 0.01));
        let plateau = [10.0, 10.04, 9.96, 10.03, 9.97];
        assert!(validation_stable(&plateau, 5, 0.01));
        assert!(!validation_stable(&plateau[..4], 5, 0.01));
    }

    #[test]
    fn stop_reason_codes_round_trip() {
        for r in [StopReason::EpochCap, StopReason::IterationCap, StopReason::ValidationStable] {
            assert_eq!(StopReason::from_code(r.code()).unwrap(), Some(r));
        }
        assert_eq!(StopReason::from_code(0).unwrap(), None);
        assert!(StopReason::from_code(9).is_err());
    }
}
