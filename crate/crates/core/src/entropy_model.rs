//! Learned factorized prior over latent symbols.
//!
//! Every latent channel `k` owns a monotone cumulative function `c_k(t)`
//! built from a short chain of positive-weight affine maps and monotone
//! nonlinearities:
//!
//! ```text
//! h0 = t
//! h_s = u_s + tanh(a_s) * tanh(u_s),   u_s = softplus(H_s) h_{s-1} + b_s   (s = 1..3, width 3)
//! c(t) = sigmoid(softplus(H_4) h_3 + b_4)
//! ```
//!
//! Positive weights and `|tanh(a)| < 1` make every stage strictly increasing,
//! so `c` runs from 0 at -inf to 1 at +inf. The probability of an integer
//! symbol `v` is `c(v + 1/2) - c(v - 1/2)`.
//!
//! For actual coding, [`freeze_cdf`] turns the continuous model into integer
//! tables with a total of `2^16`.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{Shape, Tensor};

/// Widths of the hidden stages.
pub const FILTERS: [usize; 3] = [3, 3, 3];
/// Likelihoods are clamped from below at this value during training.
pub const LIKELIHOOD_FLOOR: f64 = 1e-12;
/// Precision of the frozen tables: every channel's counts sum to `1 << 16`.
pub const CDF_PRECISION_BITS: u32 = 16;
pub const CDF_TOTAL: u32 = 1 << CDF_PRECISION_BITS;
/// Largest |symbol| a frozen table may cover.
pub const MAX_SUPPORT: i32 = 1 << 15;

const STAGES: usize = 4;
// (in, out) of each affine map.
const DIMS: [(usize, usize); STAGES] = [(1, 3), (3, 3), (3, 3), (3, 1)];
const INIT_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    pub channels: usize,
    /// Unconstrained matrices; the effective weights are `softplus` of these.
    /// Stage `s` stores `channels * out * in` values, row-major per channel.
    pub matrices: [Vec<f64>; STAGES],
    pub biases: [Vec<f64>; STAGES],
    /// Unconstrained gates; the effective gate is `tanh` of these.
    pub factors: [Vec<f64>; STAGES - 1],
}

impl EntropyModel {
    /// Initializes the chain so that every channel starts as a smooth,
    /// roughly logistic CDF with scale 10, with biases drawn from U(-1/2, 1/2).
    pub fn new<R: Rng + ?Sized>(channels: usize, rng: &mut R) -> Self {
        let scale = INIT_SCALE.powf(1.0 / STAGES as f64);
        let mut model = Self::zeros(channels);
        for (s, &(_, out)) in DIMS.iter().enumerate() {
            let init = (1.0 / scale / out as f64).exp_m1().ln();
            model.matrices[s].iter_mut().for_each(|w| *w = init);
            model.biases[s]
                .iter_mut()
                .for_each(|b| *b = rng.gen_range(-0.5..0.5));
        }
        model
    }

    /// Same layout, all parameters zero.
    pub fn zeros(channels: usize) -> Self {
        EntropyModel {
            channels,
            matrices: DIMS.map(|(i, o)| vec![0.0; channels * i * o]),
            biases: DIMS.map(|(_, o)| vec![0.0; channels * o]),
            factors: [
                vec![0.0; channels * DIMS[0].1],
                vec![0.0; channels * DIMS[1].1],
                vec![0.0; channels * DIMS[2].1],
            ],
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.channels)
    }

    /// Parameter arrays in serialization order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let mut out = Vec::new();
        for s in 0..STAGES {
            out.push((format!("entropy.matrix{s}"), self.matrices[s].as_slice()));
            out.push((format!("entropy.bias{s}"), self.biases[s].as_slice()));
            if s < STAGES - 1 {
                out.push((format!("entropy.factor{s}"), self.factors[s].as_slice()));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out = Vec::new();
        let EntropyModel {
            matrices,
            biases,
            factors,
            ..
        } = self;
        let mut factors = factors.iter_mut();
        for (s, (m, b)) in matrices.iter_mut().zip(biases.iter_mut()).enumerate() {
            out.push((format!("entropy.matrix{s}"), m.as_mut_slice()));
            out.push((format!("entropy.bias{s}"), b.as_mut_slice()));
            if let Some(f) = factors.next() {
                out.push((format!("entropy.factor{s}"), f.as_mut_slice()));
            }
        }
        out
    }

    pub fn add_assign(&mut self, other: &EntropyModel) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f64) {
        for (_, a) in self.tensors_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }

    fn chains(&self) -> Vec<Chain> {
        (0..self.channels).map(|k| Chain::new(self, k)).collect()
    }

    /// `c_k(t)` for one channel.
    pub fn cdf(&self, channel: usize, t: f64) -> f64 {
        sigmoid(Chain::new(self, channel).eval(t).logit)
    }

    /// Probability mass of integer symbol `v` in `channel` (no floor).
    pub fn pmf(&self, channel: usize, v: f64) -> f64 {
        let chain = Chain::new(self, channel);
        interval_mass(&chain, v).0
    }
}

/// Effective (constrained) weights of one channel.
struct Chain {
    w: [[f64; 9]; STAGES],
    b: [[f64; 3]; STAGES],
    f: [[f64; 3]; STAGES - 1],
}

struct Trace {
    input: f64,
    u: [[f64; 3]; STAGES - 1],
    h: [[f64; 3]; STAGES - 1],
    logit: f64,
}

/// Gradients with respect to the constrained weights of one channel.
#[derive(Default)]
struct ChainGrad {
    w: [[f64; 9]; STAGES],
    b: [[f64; 3]; STAGES],
    f: [[f64; 3]; STAGES - 1],
}

impl Chain {
    fn new(m: &EntropyModel, k: usize) -> Self {
        let mut w = [[0.0; 9]; STAGES];
        let mut b = [[0.0; 3]; STAGES];
        let mut f = [[0.0; 3]; STAGES - 1];
        for (s, &(din, dout)) in DIMS.iter().enumerate() {
            let n = din * dout;
            for (j, v) in m.matrices[s][k * n..(k + 1) * n].iter().enumerate() {
                w[s][j] = softplus(*v);
            }
            b[s][..dout].copy_from_slice(&m.biases[s][k * dout..(k + 1) * dout]);
            if s < STAGES - 1 {
                for (j, v) in m.factors[s][k * dout..(k + 1) * dout].iter().enumerate() {
                    f[s][j] = v.tanh();
                }
            }
        }
        Chain { w, b, f }
    }

    fn eval(&self, t: f64) -> Trace {
        let mut prev = [t, 0.0, 0.0];
        let mut u = [[0.0; 3]; STAGES - 1];
        let mut h = [[0.0; 3]; STAGES - 1];
        for s in 0..STAGES - 1 {
            let (din, dout) = DIMS[s];
            for o in 0..dout {
                let mut acc = self.b[s][o];
                for i in 0..din {
                    acc += self.w[s][o * din + i] * prev[i];
                }
                u[s][o] = acc;
                h[s][o] = acc + self.f[s][o] * acc.tanh();
            }
            prev = h[s];
        }
        let mut logit = self.b[STAGES - 1][0];
        for i in 0..3 {
            logit += self.w[STAGES - 1][i] * prev[i];
        }
        Trace {
            input: t,
            u,
            h,
            logit,
        }
    }

    /// Accumulates `g_logit * d logit / d weights` into `grad` and returns
    /// `g_logit * d logit / d t`.
    fn backward(&self, tr: &Trace, g_logit: f64, grad: &mut ChainGrad) -> f64 {
        let last = STAGES - 1;
        grad.b[last][0] += g_logit;
        let mut gh = [0.0; 3];
        for i in 0..3 {
            grad.w[last][i] += g_logit * tr.h[last - 1][i];
            gh[i] = g_logit * self.w[last][i];
        }
        for s in (0..STAGES - 1).rev() {
            let (din, dout) = DIMS[s];
            let input: [f64; 3] = if s == 0 {
                [tr.input, 0.0, 0.0]
            } else {
                tr.h[s - 1]
            };
            let mut g_in = [0.0; 3];
            for o in 0..dout {
                let th = tr.u[s][o].tanh();
                grad.f[s][o] += gh[o] * th;
                let gu = gh[o] * (1.0 + self.f[s][o] * (1.0 - th * th));
                grad.b[s][o] += gu;
                for i in 0..din {
                    grad.w[s][o * din + i] += gu * input[i];
                    g_in[i] += gu * self.w[s][o * din + i];
                }
            }
            gh = g_in;
        }
        gh[0]
    }
}

impl ChainGrad {
    /// Maps gradients back through softplus / tanh into `out` for channel `k`.
    fn accumulate_into(&self, m: &EntropyModel, k: usize, out: &mut EntropyModel) {
        for (s, &(din, dout)) in DIMS.iter().enumerate() {
            let n = din * dout;
            for j in 0..n {
                let raw = m.matrices[s][k * n + j];
                out.matrices[s][k * n + j] += self.w[s][j] * sigmoid(raw);
            }
            for o in 0..dout {
                out.biases[s][k * dout + o] += self.b[s][o];
            }
            if s < STAGES - 1 {
                for o in 0..dout {
                    let th = m.factors[s][k * dout + o].tanh();
                    out.factors[s][k * dout + o] += self.f[s][o] * (1.0 - th * th);
                }
            }
        }
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mass of `[v - 1/2, v + 1/2]`, evaluated on whichever tail keeps the
/// subtraction well conditioned, plus the two traces for backprop.
fn interval_mass(chain: &Chain, v: f64) -> (f64, Trace, Trace) {
    let lower = chain.eval(v - 0.5);
    let upper = chain.eval(v + 0.5);
    let p = if lower.logit + upper.logit > 0.0 {
        sigmoid(-lower.logit) - sigmoid(-upper.logit)
    } else {
        sigmoid(upper.logit) - sigmoid(lower.logit)
    };
    (p.max(0.0), lower, upper)
}

/// `dp/dv` for the interval mass, accumulating parameter gradients scaled by `g_p`.
fn interval_backward(chain: &Chain, lower: &Trace, upper: &Trace, g_p: f64, grad: &mut ChainGrad) -> f64 {
    let du = sigmoid(upper.logit) * sigmoid(-upper.logit);
    let dl = sigmoid(lower.logit) * sigmoid(-lower.logit);
    let gv_upper = chain.backward(upper, g_p * du, grad);
    let gv_lower = chain.backward(lower, -g_p * dl, grad);
    gv_upper + gv_lower
}

fn check_channels(x: &Tensor, m: &EntropyModel) -> Result<()> {
    if x.shape().channels != m.channels {
        return Err(Error::invalid(format!(
            "entropy model covers {} channels, latent has {}",
            m.channels,
            x.shape().channels
        )));
    }
    Ok(())
}

/// Adds i.i.d. noise from the open interval (-1/2, 1/2) to every entry.
/// Gradients pass through unchanged, so the caller simply reuses them.
pub fn add_uniform_noise<R: Rng + ?Sized>(q: &Tensor, rng: &mut R) -> Tensor {
    q.map(|v| {
        let mut u: f64 = rng.gen_range(-0.5..0.5);
        while u == -0.5 {
            u = rng.gen_range(-0.5..0.5);
        }
        v + u
    })
}

/// Integer-valued tensor of quantized latents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IntTensor {
    pub shape: Shape,
    pub data: Vec<i32>,
}

impl IntTensor {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(self.shape, self.data.iter().map(|&v| v as f64).collect())
            .expect("shape preserved")
    }
}

/// Rounds every entry to the nearest integer, ties away from zero.
pub fn quantize(q: &Tensor) -> IntTensor {
    IntTensor {
        shape: q.shape(),
        data: q.data().iter().map(|v| v.round() as i32).collect(),
    }
}

/// Per-element probabilities `c(v + 1/2) - c(v - 1/2)`, floored at
/// [`LIKELIHOOD_FLOOR`].
pub fn likelihood(values: &Tensor, m: &EntropyModel) -> Result<Tensor> {
    check_channels(values, m)?;
    let s = values.shape();
    let chains = m.chains();
    let mut out = Tensor::zeros(s);
    for b in 0..s.batch {
        for (k, chain) in chains.iter().enumerate() {
            let src = values.plane(b, k);
            let dst = out.plane_mut(b, k);
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = interval_mass(chain, v).0.max(LIKELIHOOD_FLOOR);
            }
        }
    }
    Ok(out)
}

/// Backward pass of [`likelihood`]: given `dL/dp` per element, returns
/// `dL/dvalues` and `dL/dparameters`. The floor passes gradients through.
pub fn likelihood_backward(values: &Tensor, m: &EntropyModel, grad_p: &Tensor) -> Result<(Tensor, EntropyModel)> {
    check_channels(values, m)?;
    grad_p.expect_shape(values.shape(), "likelihood_backward")?;
    let s = values.shape();
    let chains = m.chains();
    let mut grad_v = Tensor::zeros(s);
    let mut grads = m.zeros_like();
    for (k, chain) in chains.iter().enumerate() {
        let mut cg = ChainGrad::default();
        for b in 0..s.batch {
            let src = values.plane(b, k);
            let gp = grad_p.plane(b, k);
            let mut gv = vec![0.0; src.len()];
            for (i, &v) in src.iter().enumerate() {
                let (_, lo, hi) = interval_mass(chain, v);
                gv[i] = interval_backward(chain, &lo, &hi, gp[i], &mut cg);
            }
            grad_v.plane_mut(b, k).copy_from_slice(&gv);
        }
        cg.accumulate_into(m, k, &mut grads);
    }
    Ok((grad_v, grads))
}

/// Estimated rate `sum(-log2 p) / pixels` in bits per pixel, where `pixels`
/// counts original image pixels (all batch items together), not latents.
pub fn rate_bits(latent: &Tensor, m: &EntropyModel, pixels: usize) -> Result<f64> {
    let p = likelihood(latent, m)?;
    let bits: f64 = p.data().iter().map(|&v| -v.log2()).sum();
    Ok(bits / pixels as f64)
}

/// [`rate_bits`] together with its gradients with respect to the latent and
/// the model parameters.
pub fn rate_bits_with_grad(latent: &Tensor, m: &EntropyModel, pixels: usize) -> Result<(f64, Tensor, EntropyModel)> {
    let p = likelihood(latent, m)?;
    let norm = 1.0 / pixels as f64;
    let bits: f64 = p.data().iter().map(|&v| -v.log2()).sum();
    let grad_p = p.map(|v| -norm / (v * std::f64::consts::LN_2));
    let (gv, gm) = likelihood_backward(latent, m, &grad_p)?;
    Ok((bits * norm, gv, gm))
}

/// Frozen integer CDF of one channel.
///
/// Buckets are the symbols `symbol_min..=symbol_max` followed by one escape
/// bucket holding the clipped tail mass. Symbols outside the support are
/// clamped before coding, so the escape bucket is never coded; it keeps every
/// per-bucket count below `2^16`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelCdf {
    pub symbol_min: i32,
    pub symbol_max: i32,
    /// Strictly increasing, starts at 0, ends at [`CDF_TOTAL`].
    pub cumulative: Vec<u32>,
}

impl ChannelCdf {
    /// Builds a table from per-bucket counts (symbols then escape).
    pub fn from_counts(symbol_min: i32, counts: &[u32]) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::Model("a CDF table needs at least one symbol and the escape bucket".into()));
        }
        if counts.iter().any(|&c| c == 0) {
            return Err(Error::Model("zero-frequency bucket in CDF table".into()));
        }
        let mut cumulative = Vec::with_capacity(counts.len() + 1);
        let mut acc = 0u64;
        cumulative.push(0);
        for &c in counts {
            acc += c as u64;
            if acc > CDF_TOTAL as u64 {
                return Err(Error::Model("CDF counts exceed 2^16".into()));
            }
            cumulative.push(acc as u32);
        }
        if acc != CDF_TOTAL as u64 {
            return Err(Error::Model(format!("CDF counts sum to {acc}, expected {CDF_TOTAL}")));
        }
        let symbol_max = symbol_min
            .checked_add(counts.len() as i32 - 2)
            .ok_or_else(|| Error::Model("CDF support overflows".into()))?;
        Ok(ChannelCdf {
            symbol_min,
            symbol_max,
            cumulative,
        })
    }

    pub fn counts(&self) -> Vec<u32> {
        self.cumulative.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn contains(&self, v: i32) -> bool {
        v >= self.symbol_min && v <= self.symbol_max
    }

    pub fn clamp(&self, v: i32) -> i32 {
        v.clamp(self.symbol_min, self.symbol_max)
    }

    /// Number of codable symbols (the escape bucket excluded).
    pub fn support_len(&self) -> usize {
        (self.symbol_max - self.symbol_min + 1) as usize
    }

    /// `(cumulative start, frequency)` of an in-support symbol.
    #[inline]
    pub fn interval(&self, v: i32) -> (u32, u32) {
        let i = (v - self.symbol_min) as usize;
        (self.cumulative[i], self.cumulative[i + 1] - self.cumulative[i])
    }

    /// Bucket index whose interval contains `target < CDF_TOTAL`.
    #[inline]
    pub fn bucket_of(&self, target: u32) -> usize {
        // Largest i with cumulative[i] <= target.
        self.cumulative.partition_point(|&c| c <= target) - 1
    }

    pub fn probability(&self, v: i32) -> f64 {
        if !self.contains(v) {
            return 0.0;
        }
        self.interval(v).1 as f64 / CDF_TOTAL as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CdfTable {
    pub channels: Vec<ChannelCdf>,
}

impl CdfTable {
    pub fn channel(&self, k: usize) -> &ChannelCdf {
        &self.channels[k]
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }
}

/// Freezes the continuous model into integer tables.
///
/// The support of each channel is the narrowest integer range whose excluded
/// mass is below `2^-16` on each side. Probabilities over the support plus the
/// escape bucket are scaled to integer counts summing to `2^16`, every bucket
/// getting at least one count. The result depends only on the parameters.
pub fn freeze_cdf(m: &EntropyModel) -> Result<CdfTable> {
    let tail = 1.0 / CDF_TOTAL as f64;
    let mut channels = Vec::with_capacity(m.channels);
    for k in 0..m.channels {
        let chain = Chain::new(m, k);
        let lower_tail = |v: i32| sigmoid(chain.eval(v as f64 - 0.5).logit);
        let upper_tail = |v: i32| sigmoid(-chain.eval(v as f64 + 0.5).logit);

        // Largest symbol_min whose lower tail stays under the threshold.
        let mut lo = 0i32;
        if lower_tail(lo) < tail {
            while lower_tail(lo + 1) < tail {
                lo += 1;
                if lo > MAX_SUPPORT {
                    return Err(degenerate(k));
                }
            }
        } else {
            while lower_tail(lo) >= tail {
                lo -= 1;
                if lo < -MAX_SUPPORT {
                    return Err(degenerate(k));
                }
            }
        }
        // Smallest symbol_max whose upper tail stays under the threshold.
        let mut hi = 0i32;
        if upper_tail(hi) < tail {
            while upper_tail(hi - 1) < tail {
                hi -= 1;
                if hi < -MAX_SUPPORT {
                    return Err(degenerate(k));
                }
            }
        } else {
            while upper_tail(hi) >= tail {
                hi += 1;
                if hi > MAX_SUPPORT {
                    return Err(degenerate(k));
                }
            }
        }
        if hi < lo {
            return Err(Error::Model(format!(
                "entropy model channel {k} has an empty support"
            )));
        }

        let mut probs: Vec<f64> = (lo..=hi).map(|v| interval_mass(&chain, v as f64).0).collect();
        probs.push(lower_tail(lo) + upper_tail(hi));
        let counts = quantize_counts(&probs)
            .ok_or_else(|| Error::Model(format!("channel {k}: support too wide for 16-bit tables")))?;
        channels.push(ChannelCdf::from_counts(lo, &counts)?);
    }
    Ok(CdfTable { channels })
}

fn degenerate(k: usize) -> Error {
    Error::Model(format!(
        "entropy model channel {k} is degenerate: support exceeds +-{MAX_SUPPORT}"
    ))
}

/// Integer counts proportional to `probs`, each at least 1, summing to
/// [`CDF_TOTAL`]. Leftover counts go to the largest fractional parts.
fn quantize_counts(probs: &[f64]) -> Option<Vec<u32>> {
    let n = probs.len();
    if n as u64 > CDF_TOTAL as u64 {
        return None;
    }
    let total: f64 = probs.iter().map(|p| p.max(0.0)).sum();
    let spare = (CDF_TOTAL as usize - n) as f64;
    let mut counts = Vec::with_capacity(n);
    let mut fractions = Vec::with_capacity(n);
    for (i, p) in probs.iter().enumerate() {
        let share = if total > 0.0 { p.max(0.0) / total } else { 1.0 / n as f64 };
        let scaled = share * spare;
        let whole = scaled.floor();
        counts.push(1 + whole as u32);
        fractions.push((scaled - whole, i));
    }
    let assigned: u64 = counts.iter().map(|&c| c as u64).sum();
    let mut remaining = CDF_TOTAL as u64 - assigned;
    fractions.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut idx = 0;
    while remaining > 0 {
        counts[fractions[idx % n].1] += 1;
        remaining -= 1;
        idx += 1;
    }
    Some(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fresh(channels: usize, seed: u64) -> EntropyModel {
        EntropyModel::new(channels, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn cdf_is_monotone_with_correct_limits() {
        let m = fresh(3, 1);
        for k in 0..3 {
            let mut prev = 0.0;
            for i in -400..=400 {
                let c = m.cdf(k, i as f64 * 0.5);
                assert!(c >= prev, "channel {k} not monotone at {i}");
                prev = c;
            }
            assert!(m.cdf(k, -1e6) < 1e-12);
            assert!(m.cdf(k, 1e6) > 1.0 - 1e-12);
        }
    }

    #[test]
    fn noise_is_bounded_and_reproducible() {
        let q = Tensor::zeros(Shape::new(2, 3, 4, 4));
        let a = add_uniform_noise(&q, &mut ChaCha8Rng::seed_from_u64(5));
        let b = add_uniform_noise(&q, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(a, b);
        assert!(a.data().iter().all(|&v| v > -0.5 && v < 0.5));
    }

    #[test]
    fn noise_mean_is_near_zero() {
        let q = Tensor::zeros(Shape::new(1, 1, 1000, 1000));
        let n = add_uniform_noise(&q, &mut ChaCha8Rng::seed_from_u64(77));
        let mean = n.sum() / n.len() as f64;
        assert!(mean.abs() <= 0.002, "mean {mean}");
    }

    #[test]
    fn quantize_rounds_half_away_from_zero() {
        let t = Tensor::from_vec(Shape::new(1, 1, 1, 6), vec![0.4, -0.4, 1.5, -1.5, 2.49, -7.51]).unwrap();
        assert_eq!(quantize(&t).data, vec![0, 0, 2, -2, 2, -8]);
    }

    #[test]
    fn likelihoods_are_probabilities() {
        let m = fresh(2, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Tensor::from_fn(Shape::new(2, 2, 5, 5), |_, _, _, _| rng.gen_range(-200.0..200.0));
        let p = likelihood(&x, &m).unwrap();
        assert!(p.data().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn fresh_model_mass_sums_to_one() {
        let m = fresh(4, 9);
        for k in 0..4 {
            let total: f64 = (-1000..=1000).map(|v| m.pmf(k, v as f64)).sum();
            assert!(total >= 0.999, "channel {k}: {total}");
        }
    }

    /// Step-like channel with `c(t) = sigmoid(P (t - 1/2))` for a huge `P`,
    /// so symbols 0 and 1 each carry probability 1/2.
    fn two_symbol_model() -> EntropyModel {
        let mut m = EntropyModel::zeros(1);
        for s in 0..4 {
            m.matrices[s].iter_mut().for_each(|w| *w = 40.0);
        }
        let slope = 40.0 * (3.0 * 40.0) * (3.0 * 40.0) * (3.0 * 40.0);
        m.biases[3][0] = -0.5 * slope;
        m
    }

    #[test]
    fn rate_of_half_probability_symbols() {
        let m = two_symbol_model();
        let x = Tensor::from_fn(Shape::new(1, 1, 10, 10), |_, _, y, _| (y % 2) as f64);
        let p = likelihood(&x, &m).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.5));
        assert_eq!(rate_bits(&x, &m, 100).unwrap(), 1.0);
    }

    #[test]
    fn rate_is_zero_for_certain_symbols() {
        // Steep channel: all mass of symbol 0 is certain.
        let mut m = EntropyModel::zeros(1);
        for s in 0..4 {
            m.matrices[s].iter_mut().for_each(|w| *w = 30.0);
        }
        let x = Tensor::zeros(Shape::new(1, 1, 4, 4));
        let r = rate_bits(&x, &m, 16).unwrap();
        assert!(r.abs() < 1e-12, "{r}");
    }

    #[test]
    fn frozen_table_invariants() {
        let m = fresh(3, 21);
        let t = freeze_cdf(&m).unwrap();
        for ch in &t.channels {
            assert_eq!(ch.cumulative[0], 0);
            assert_eq!(*ch.cumulative.last().unwrap(), CDF_TOTAL);
            assert!(ch.cumulative.windows(2).all(|w| w[1] > w[0]));
            assert_eq!(ch.cumulative.len(), ch.support_len() + 2);
        }
        assert_eq!(freeze_cdf(&m).unwrap(), t);
    }

    #[test]
    fn symmetric_model_has_symmetric_support() {
        let mut m = fresh(2, 8);
        m.biases.iter_mut().for_each(|b| b.iter_mut().for_each(|v| *v = 0.0));
        for ch in freeze_cdf(&m).unwrap().channels {
            assert_eq!(ch.symbol_min, -ch.symbol_max);
        }
    }

    #[test]
    fn degenerate_model_is_rejected() {
        let mut m = EntropyModel::zeros(1);
        for s in 0..4 {
            m.matrices[s].iter_mut().for_each(|w| *w = -20.0);
        }
        assert!(matches!(freeze_cdf(&m), Err(Error::Model(_))));
    }

    #[test]
    fn counts_respect_minimum_and_total() {
        let c = quantize_counts(&[1.0, 0.0, 1e-30, 0.5]).unwrap();
        assert!(c.iter().all(|&v| v >= 1));
        assert_eq!(c.iter().sum::<u32>(), CDF_TOTAL);
        let collapsed = quantize_counts(&[1.0, 0.0]).unwrap();
        assert_eq!(collapsed, vec![CDF_TOTAL - 1, 1]);
    }

    #[test]
    fn bucket_lookup_matches_intervals() {
        let ch = ChannelCdf::from_counts(-2, &[10, 20, 65000, 500, 6]).unwrap();
        assert_eq!(ch.symbol_max, 1);
        for v in -2..=1 {
            let (start, freq) = ch.interval(v);
            assert_eq!(ch.bucket_of(start), (v + 2) as usize);
            assert_eq!(ch.bucket_of(start + freq - 1), (v + 2) as usize);
        }
    }
}
