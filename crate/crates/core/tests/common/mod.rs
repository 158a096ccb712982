//! Oracles shared by the integration tests and the acceptance run:
//! finite-difference gradient checks, random coding tables and the golden
//! format fixtures.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

use sae_core::entropy_model::{likelihood, rate_bits_with_grad, CdfTable, ChannelCdf, EntropyModel, CDF_TOTAL};
use sae_core::image_io::load_image;
use sae_core::model_file::{model_from_bytes, model_to_bytes};
use sae_core::pipeline::{sae_decode, sae_encode, LayeredBitstream};
use sae_core::metrics::{ms_ssim, ms_ssim_with_grad};
use sae_core::network::LayerModel;
use sae_core::numerics::{
    conv2d_backward, conv2d_forward, gdn_backward, gdn_forward, igdn_backward, igdn_forward,
    tconv2d_backward, tconv2d_forward, ConvParams, GdnParams, Shape, Tensor,
};

/// Finite-difference step for the small numeric ops.
pub const STEP: f64 = 1e-5;
/// Entries smaller than this fraction of the largest analytic gradient are
/// compared against that fraction instead of their own magnitude.
pub const RELATIVE_FLOOR: f64 = 1e-3;

#[derive(Debug)]
pub struct GradReport {
    pub name: &'static str,
    pub max_rel_err: f64,
    pub checked: usize,
}

pub fn random_tensor(shape: Shape, lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_, _, _, _| rng.gen_range(lo..hi))
}

/// Compares `analytic[i]` with `(f(i, +h) - f(i, -h)) / 2h` for each index,
/// where `f(i, d)` evaluates the loss with entry `i` offset by `d`.
pub fn compare(
    name: &'static str,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    h: f64,
    mut f: impl FnMut(usize, f64) -> f64,
) -> GradReport {
    compare_diff(name, analytic, indices, h, |i, h| f(i, h) - f(i, -h))
}

/// Like [`compare`], but `diff(i, h)` returns `f(+h) - f(-h)` directly so a
/// caller can difference a sum term by term.
pub fn compare_diff(
    name: &'static str,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    h: f64,
    mut diff: impl FnMut(usize, f64) -> f64,
) -> GradReport {
    let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = (RELATIVE_FLOOR * scale).max(1e-12);
    let mut worst = 0.0f64;
    let mut checked = 0;
    for i in indices {
        let numeric = diff(i, h) / (2.0 * h);
        let a = analytic[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(err);
        checked += 1;
    }
    GradReport {
        name,
        max_rel_err: worst,
        checked,
    }
}

fn merge(name: &'static str, parts: Vec<GradReport>) -> GradReport {
    GradReport {
        name,
        max_rel_err: parts.iter().fold(0.0, |m, r| m.max(r.max_rel_err)),
        checked: parts.iter().map(|r| r.checked).sum(),
    }
}

fn conv_like(name: &'static str, transposed: bool, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut p, x_shape) = if transposed {
        (ConvParams::transposed(4, 3, 5, 2).unwrap(), Shape::new(1, 4, 4, 4))
    } else {
        (ConvParams::conv(4, 3, 5, 2).unwrap(), Shape::new(1, 4, 8, 8))
    };
    p.init_uniform(&mut rng);
    p.bias.iter_mut().for_each(|b| *b = rng.gen_range(-0.5..0.5));
    let x = random_tensor(x_shape, -1.0, 1.0, &mut rng);
    let fwd = |x: &Tensor, p: &ConvParams| {
        if transposed {
            tconv2d_forward(x, p).unwrap()
        } else {
            conv2d_forward(x, p).unwrap()
        }
    };
    let y = fwd(&x, &p);
    let r = random_tensor(y.shape(), -1.0, 1.0, &mut rng);
    let loss = |x: &Tensor, p: &ConvParams| fwd(x, p).dot(&r).unwrap();
    let (gx, gp) = if transposed {
        tconv2d_backward(&x, &p, &r).unwrap()
    } else {
        conv2d_backward(&x, &p, &r).unwrap()
    };
    let rx = compare("x", gx.data(), 0..x.len(), STEP, |i, d| {
        let mut x2 = x.clone();
        x2.data_mut()[i] += d;
        loss(&x2, &p)
    });
    let rk = compare("kernels", &gp.kernels, 0..p.kernels.len(), STEP, |i, d| {
        let mut p2 = p.clone();
        p2.kernels[i] += d;
        loss(&x, &p2)
    });
    let rb = compare("bias", &gp.bias, 0..p.bias.len(), STEP, |i, d| {
        let mut p2 = p.clone();
        p2.bias[i] += d;
        loss(&x, &p2)
    });
    merge(name, vec![rx, rk, rb])
}

pub fn check_conv(seed: u64) -> GradReport {
    conv_like("conv2d", false, seed)
}

pub fn check_tconv(seed: u64) -> GradReport {
    conv_like("tconv2d", true, seed)
}

fn norm_like(name: &'static str, inverse: bool, seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = 4;
    let mut g = GdnParams::new(c);
    g.beta.iter_mut().for_each(|b| *b = rng.gen_range(0.5..2.0));
    g.gamma.iter_mut().for_each(|v| *v = rng.gen_range(0.0..0.5));
    let x = random_tensor(Shape::new(1, c, 8, 8), -2.0, 2.0, &mut rng);
    let fwd = |x: &Tensor, g: &GdnParams| {
        if inverse {
            igdn_forward(x, g).unwrap()
        } else {
            gdn_forward(x, g).unwrap()
        }
    };
    let r = random_tensor(x.shape(), -1.0, 1.0, &mut rng);
    let loss = |x: &Tensor, g: &GdnParams| fwd(x, g).dot(&r).unwrap();
    let (gx, gg) = if inverse {
        igdn_backward(&x, &g, &r).unwrap()
    } else {
        gdn_backward(&x, &g, &r).unwrap()
    };
    let rx = compare("x", gx.data(), 0..x.len(), STEP, |i, d| {
        let mut x2 = x.clone();
        x2.data_mut()[i] += d;
        loss(&x2, &g)
    });
    let rb = compare("beta", &gg.beta, 0..c, STEP, |i, d| {
        let mut g2 = g.clone();
        g2.beta[i] += d;
        loss(&x, &g2)
    });
    let rg = compare("gamma", &gg.gamma, 0..c * c, STEP, |i, d| {
        let mut g2 = g.clone();
        g2.gamma[i] += d;
        loss(&x, &g2)
    });
    merge(name, vec![rx, rb, rg])
}

pub fn check_gdn(seed: u64) -> GradReport {
    norm_like("gdn", false, seed)
}

pub fn check_igdn(seed: u64) -> GradReport {
    norm_like("igdn", true, seed)
}

/// Finite-difference step for a single likelihood term. Probabilities are
/// differences of two CDF values close to 1, so their roundoff is larger and
/// a wider step keeps it below the truncation error.
pub const RATE_STEP: f64 = 1e-4;

/// Rate in bits per pixel with respect to the latent and every entropy
/// model parameter.
pub fn check_rate(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = EntropyModel::new(4, &mut rng);
    for (_, v) in m.tensors_mut() {
        v.iter_mut().for_each(|w| *w += rng.gen_range(-0.3..0.3));
    }
    let latent = random_tensor(Shape::new(1, 4, 8, 8), -3.0, 3.0, &mut rng);
    let pixels = 16 * 8 * 16 * 8;
    let (_, gl, gm) = rate_bits_with_grad(&latent, &m, pixels).unwrap();
    // The rate is a sum of per-element terms. Differencing the total would
    // bury small gradients in the roundoff of the sum, so the latent check
    // uses the perturbed element's own term and the parameter check
    // differences term by term.
    let mut parts = vec![compare("latent", gl.data(), 0..latent.len(), RATE_STEP, |i, d| {
        let mut l2 = latent.clone();
        l2.data_mut()[i] += d;
        -likelihood(&l2, &m).unwrap().data()[i].log2() / pixels as f64
    })];
    let grads = gm.tensors();
    for (k, (_, g)) in grads.iter().enumerate() {
        parts.push(compare_diff("param", g, 0..g.len(), STEP, |i, h| {
            let bits = |d: f64| {
                let mut m2 = m.clone();
                m2.tensors_mut()[k].1[i] += d;
                likelihood(&latent, &m2).unwrap()
            };
            let (up, down) = (bits(h), bits(-h));
            let diff: f64 = up.data().iter().zip(down.data()).map(|(a, b)| b.log2() - a.log2()).sum();
            diff / pixels as f64
        }));
    }
    merge("rate", parts)
}

/// Finite-difference step for MS-SSIM, in pixel units.
pub const MS_SSIM_STEP: f64 = 1e-2;

/// MS-SSIM with respect to the reconstruction on a 1x3x176x176 pair,
/// sampled at `samples` random positions.
pub fn check_ms_ssim(seed: u64, samples: usize) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 3, 176, 176);
    let x = Tensor::from_fn(shape, |_, c, y, x| {
        128.0 + 80.0 * ((x as f64 / 7.0 + c as f64).sin() * (y as f64 / 11.0).cos())
    });
    let y = x.map(|v| (v + rng.gen_range(-25.0..25.0)).clamp(0.0, 255.0));
    let (_, g) = ms_ssim_with_grad(&x, &y).unwrap();
    let indices: Vec<usize> = (0..samples).map(|_| rng.gen_range(0..y.len())).collect();
    let r = compare("y", g.data(), indices, MS_SSIM_STEP, |i, d| {
        let mut y2 = y.clone();
        y2.data_mut()[i] += d;
        ms_ssim(&x, &y2).unwrap()
    });
    GradReport { name: "ms-ssim", ..r }
}

/// Finite-difference step for the whole-layer check. Some parameter
/// gradients are tiny, so a wide step keeps roundoff down and a
/// fourth-order stencil keeps truncation error down.
pub const LAYER_STEP: f64 = 3e-3;

/// A whole layer, analysis then synthesis, against a random linear
/// functional of the output. Checks the input gradient and every
/// auto-encoder parameter.
pub fn check_layer(seed: u64) -> GradReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = LayerModel::new(0, 4, 100.0, seed).unwrap();
    for p in layer.ae.params_mut() {
        p.values.iter_mut().for_each(|v| *v += rng.gen_range(-0.05..0.05));
    }
    let x = random_tensor(Shape::new(1, 3, 16, 16), 0.0, 1.0, &mut rng);
    let r = random_tensor(x.shape(), -1.0, 1.0, &mut rng);
    let loss = |l: &LayerModel, x: &Tensor| l.synthesis(&l.analysis(x).unwrap()).unwrap().dot(&r).unwrap();
    let (latent, enc) = layer.analysis_traced(&x).unwrap();
    let (_, dec) = layer.synthesis_traced(&latent).unwrap();
    let mut grads = layer.ae.zeros_like();
    let gl = layer.synthesis_backward(&dec, &r, &mut grads).unwrap();
    let gx = layer.analysis_backward(&enc, &gl, &mut grads).unwrap();
    let mut parts = vec![compare4("x", gx.data(), 0..x.len(), LAYER_STEP, |i, d| {
        let mut x2 = x.clone();
        x2.data_mut()[i] += d;
        loss(&layer, &x2)
    })];
    let flat: Vec<Vec<f64>> = grads.params_mut().into_iter().map(|p| p.values.to_vec()).collect();
    for (k, g) in flat.iter().enumerate() {
        let stride = (g.len() / 40).max(1);
        parts.push(compare4("param", g, (0..g.len()).step_by(stride), LAYER_STEP, |i, d| {
            let mut l2 = layer.clone();
            l2.ae.params_mut()[k].values[i] += d;
            loss(&l2, &x)
        }));
    }
    merge("layer", parts)
}

/// [`compare`] with the fourth-order stencil
/// `(8 (f(h) - f(-h)) - (f(2h) - f(-2h))) / 12h`.
pub fn compare4(
    name: &'static str,
    analytic: &[f64],
    indices: impl IntoIterator<Item = usize>,
    h: f64,
    mut f: impl FnMut(usize, f64) -> f64,
) -> GradReport {
    compare_diff(name, analytic, indices, h, |i, h| {
        (8.0 * (f(i, h) - f(i, -h)) - (f(i, 2.0 * h) - f(i, -2.0 * h))) / 6.0
    })
}

/// Random per-channel tables: a random support of 1..=64 symbols around a
/// random offset, with random bucket weights. Some channels are sharply
/// peaked so near-certain symbols are exercised too.
pub fn random_cdf_table(channels: usize, rng: &mut ChaCha8Rng) -> CdfTable {
    let total = CDF_TOTAL as u64;
    let channels = (0..channels)
        .map(|_| {
            let support = rng.gen_range(1..=64usize);
            let buckets = support + 1;
            let peaked = rng.gen_bool(0.25);
            let weights: Vec<f64> = (0..buckets)
                .map(|b| {
                    if peaked {
                        if b == support / 2 { 1000.0 } else { rng.gen_range(0.0..1.0) }
                    } else {
                        rng.gen_range(0.01..1.0)
                    }
                })
                .collect();
            let sum: f64 = weights.iter().sum();
            let spare = total - buckets as u64;
            let mut counts: Vec<u32> = weights.iter().map(|w| 1 + (w / sum * spare as f64).floor() as u32).collect();
            let assigned: u64 = counts.iter().map(|&c| c as u64).sum();
            let (imax, _) = counts.iter().enumerate().max_by_key(|(_, &c)| c).unwrap();
            counts[imax] += (total - assigned) as u32;
            ChannelCdf::from_counts(rng.gen_range(-40..40), &counts).unwrap()
        })
        .collect();
    CdfTable { channels }
}

/// `n` symbols drawn from `table`, channel-major over `channels` planes,
/// with their channel ids and their ideal cost in bits.
pub fn sample_symbols(table: &CdfTable, n: usize, rng: &mut ChaCha8Rng) -> (Vec<i32>, Vec<usize>, f64) {
    let c = table.len();
    let ids: Vec<usize> = (0..n).map(|i| i * c / n).collect();
    let mut bits = 0.0;
    let symbols = ids
        .iter()
        .map(|&k| {
            let ch = table.channel(k);
            let target = rng.gen_range(0..CDF_TOTAL - ch.counts().last().unwrap());
            let v = ch.symbol_min + ch.bucket_of(target) as i32;
            bits -= ch.probability(v).log2();
            v
        })
        .collect();
    (symbols, ids, bits)
}

/// Directory holding the committed format fixtures.
pub fn fixture_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub const GOLDEN_MODEL: &str = "golden_model.saem";
pub const GOLDEN_INPUT: &str = "golden_input.png";
pub const GOLDEN_STREAM: &str = "golden_stream.saeb";

pub fn golden_decoded(k: usize) -> String {
    format!("golden_decoded_{k}.png")
}

/// Compares freshly computed artifacts with the committed fixtures:
/// model bytes survive a load/save round trip, encoding the input
/// reproduces the stream, and decoding every prefix reproduces the
/// committed images. Returns a description of the first mismatch.
pub fn check_golden() -> std::result::Result<String, String> {
    let dir = fixture_dir();
    let read = |name: &str| std::fs::read(dir.join(name)).map_err(|e| format!("{name}: {e}"));
    let model_bytes = read(GOLDEN_MODEL)?;
    let model = model_from_bytes(&model_bytes).map_err(|e| e.to_string())?;
    if model_to_bytes(&model).map_err(|e| e.to_string())? != model_bytes {
        return Err("model bytes change after a load/save round trip".into());
    }
    let input = load_image(&dir.join(GOLDEN_INPUT)).map_err(|e| e.to_string())?;
    let stream_bytes = read(GOLDEN_STREAM)?;
    let stream = LayeredBitstream::from_bytes(&stream_bytes).map_err(|e| e.to_string())?;
    let encoded = sae_encode(&input, &model, model.num_layers()).map_err(|e| e.to_string())?;
    if encoded.to_bytes() != stream_bytes {
        return Err("re-encoding the golden input gives a different stream".into());
    }
    for k in 1..=model.num_layers() {
        let want = load_image(&dir.join(golden_decoded(k))).map_err(|e| e.to_string())?;
        let got = sae_decode(&stream, &model, Some(k)).map_err(|e| e.to_string())?;
        if got != want {
            return Err(format!("decoding {k} layer(s) differs from the golden image"));
        }
    }
    Ok(format!(
        "{} layers, {} stream bytes, {}x{} image",
        model.num_layers(),
        stream_bytes.len(),
        input.width,
        input.height
    ))
}
