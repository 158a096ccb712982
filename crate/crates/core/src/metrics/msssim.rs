//! Multi-scale structural similarity and its gradient.
//!
//! Five scales, an 11-tap Gaussian window with sigma 1.5 applied without
//! padding, and 2x2 average pooling between scales. Contrast-structure terms
//! are taken at every scale and the luminance term only at the coarsest;
//! negative terms are clipped to zero before the weighted product. Channels
//! are scored separately and averaged.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const SCALE_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
/// Smallest side that survives all scales with a full window.
pub const MIN_SIDE: usize = WINDOW << (SCALE_WEIGHTS.len() - 1);
const DYNAMIC_RANGE: f64 = 255.0;
const C1: f64 = (0.01 * DYNAMIC_RANGE) * (0.01 * DYNAMIC_RANGE);
const C2: f64 = (0.03 * DYNAMIC_RANGE) * (0.03 * DYNAMIC_RANGE);

#[derive(Clone)]
struct Plane {
    w: usize,
    h: usize,
    data: Vec<f64>,
}

impl Plane {
    fn zeros(w: usize, h: usize) -> Self {
        Plane { w, h, data: vec![0.0; w * h] }
    }

    fn zip(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        Plane {
            w: self.w,
            h: self.h,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }
}

fn taps() -> [f64; WINDOW] {
    let mut t = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in t.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = t.iter().sum();
    t.iter_mut().for_each(|v| *v /= s);
    t
}

/// Separable Gaussian filter keeping only fully covered positions.
fn blur(p: &Plane, g: &[f64; WINDOW]) -> Plane {
    let ow = p.w + 1 - WINDOW;
    let oh = p.h + 1 - WINDOW;
    let mut rows = Plane::zeros(ow, p.h);
    for y in 0..p.h {
        let src = &p.data[y * p.w..(y + 1) * p.w];
        for x in 0..ow {
            rows.data[y * ow + x] = g.iter().zip(&src[x..x + WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = Plane::zeros(ow, oh);
    for y in 0..oh {
        for (k, &gk) in g.iter().enumerate() {
            let src = &rows.data[(y + k) * ow..(y + k + 1) * ow];
            let dst = &mut out.data[y * ow..(y + 1) * ow];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += gk * s);
        }
    }
    out
}

/// Adjoint of [`blur`]: scatters a filtered-size plane back to `w x h`.
fn blur_adjoint(p: &Plane, g: &[f64; WINDOW], w: usize, h: usize) -> Plane {
    let mut rows = Plane::zeros(p.w, h);
    for y in 0..p.h {
        for (k, &gk) in g.iter().enumerate() {
            let src = &p.data[y * p.w..(y + 1) * p.w];
            let dst = &mut rows.data[(y + k) * p.w..(y + k + 1) * p.w];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += gk * s);
        }
    }
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        let src = &rows.data[y * p.w..(y + 1) * p.w];
        let dst = &mut out.data[y * w..(y + 1) * w];
        for (x, &v) in src.iter().enumerate() {
            for (k, &gk) in g.iter().enumerate() {
                dst[x + k] += gk * v;
            }
        }
    }
    out
}

fn pool(p: &Plane) -> Plane {
    let (w, h) = (p.w / 2, p.h / 2);
    let mut out = Plane::zeros(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = 2 * y * p.w + 2 * x;
            out.data[y * w + x] = 0.25 * (p.data[i] + p.data[i + 1] + p.data[i + p.w] + p.data[i + p.w + 1]);
        }
    }
    out
}

fn pool_adjoint(g: &Plane, w: usize, h: usize) -> Plane {
    let mut out = Plane::zeros(w, h);
    for y in 0..g.h {
        for x in 0..g.w {
            let v = 0.25 * g.data[y * g.w + x];
            let i = 2 * y * w + 2 * x;
            out.data[i] += v;
            out.data[i + 1] += v;
            out.data[i + w] += v;
            out.data[i + w + 1] += v;
        }
    }
    out
}

/// Per-scale statistics and, optionally, the gradient of the scale's score
/// with respect to `y`.
fn scale_score(x: &Plane, y: &Plane, g: &[f64; WINDOW], with_luminance: bool, want_grad: bool) -> (f64, Option<Plane>) {
    let mx = blur(x, g);
    let my = blur(y, g);
    let exx = blur(&x.zip(x, |a, b| a * b), g);
    let eyy = blur(&y.zip(y, |a, b| a * b), g);
    let exy = blur(&x.zip(y, |a, b| a * b), g);
    let n = mx.data.len() as f64;

    let mut total = 0.0;
    // Derivatives of the per-position score with respect to mu_y, E[y^2]
    // and E[xy], already divided by the position count.
    let mut d_my = Plane::zeros(mx.w, mx.h);
    let mut d_eyy = Plane::zeros(mx.w, mx.h);
    let mut d_exy = Plane::zeros(mx.w, mx.h);
    for i in 0..mx.data.len() {
        let (ux, uy) = (mx.data[i], my.data[i]);
        let vx = exx.data[i] - ux * ux;
        let vy = eyy.data[i] - uy * uy;
        let cxy = exy.data[i] - ux * uy;
        let a = 2.0 * cxy + C2;
        let b = vx + vy + C2;
        let cs = a / b;
        let dcs_dcxy = 2.0 / b;
        let dcs_dvy = -a / (b * b);
        let (score, l, dl_duy) = if with_luminance {
            let num = 2.0 * ux * uy + C1;
            let den = ux * ux + uy * uy + C1;
            let l = num / den;
            (l * cs, l, (2.0 * ux * den - num * 2.0 * uy) / (den * den))
        } else {
            (cs, 1.0, 0.0)
        };
        total += score;
        if want_grad {
            // cs depends on mu_y through both the covariance and the variance.
            let dcs_duy = dcs_dcxy * (-ux) + dcs_dvy * (-2.0 * uy);
            d_my.data[i] = (dl_duy * cs + l * dcs_duy) / n;
            d_eyy.data[i] = l * dcs_dvy / n;
            d_exy.data[i] = l * dcs_dcxy / n;
        }
    }
    let score = total / n;
    if !want_grad {
        return (score, None);
    }
    let a = blur_adjoint(&d_my, g, x.w, x.h);
    let b = blur_adjoint(&d_eyy, g, x.w, x.h);
    let c = blur_adjoint(&d_exy, g, x.w, x.h);
    let mut grad = Plane::zeros(x.w, x.h);
    for i in 0..grad.data.len() {
        grad.data[i] = a.data[i] + 2.0 * y.data[i] * b.data[i] + x.data[i] * c.data[i];
    }
    (score, Some(grad))
}

/// MS-SSIM of one channel, with the gradient with respect to `y` if asked.
fn channel_ms_ssim(x: Plane, y: Plane, want_grad: bool) -> (f64, Option<Plane>) {
    let g = taps();
    let scales = SCALE_WEIGHTS.len();
    let mut xs = vec![x];
    let mut ys = vec![y];
    for _ in 1..scales {
        let nx = pool(xs.last().expect("non-empty"));
        let ny = pool(ys.last().expect("non-empty"));
        xs.push(nx);
        ys.push(ny);
    }
    let mut values = Vec::with_capacity(scales);
    let mut grads = Vec::with_capacity(scales);
    for j in 0..scales {
        let (v, gr) = scale_score(&xs[j], &ys[j], &g, j == scales - 1, want_grad);
        values.push(v);
        grads.push(gr);
    }
    let score: f64 = values
        .iter()
        .zip(SCALE_WEIGHTS)
        .map(|(&v, w)| v.max(0.0).powf(w))
        .product();
    if !want_grad {
        return (score, None);
    }
    // d score / d value_j = score * w_j / value_j where the value is positive;
    // clipped terms pass no gradient.
    let mut back: Option<Plane> = None;
    for j in (0..scales).rev() {
        let gj = grads[j].take().expect("gradient requested");
        let coef = if values[j] > 0.0 { score * SCALE_WEIGHTS[j] / values[j] } else { 0.0 };
        let mut acc = Plane {
            data: gj.data.iter().map(|v| v * coef).collect(),
            ..gj
        };
        if let Some(b) = back.take() {
            let up = pool_adjoint(&b, acc.w, acc.h);
            acc.data.iter_mut().zip(&up.data).for_each(|(a, u)| *a += u);
        }
        back = Some(acc);
    }
    (score, back)
}

fn planes(t: &Tensor, b: usize) -> Vec<Plane> {
    let s = t.shape();
    (0..s.channels)
        .map(|c| Plane {
            w: s.width,
            h: s.height,
            data: t.plane(b, c).to_vec(),
        })
        .collect()
}

fn check(x: &Tensor, y: &Tensor) -> Result<()> {
    if x.shape() != y.shape() {
        return Err(Error::invalid(format!(
            "MS-SSIM of shapes {} and {}",
            x.shape(),
            y.shape()
        )));
    }
    let s = x.shape();
    if s.height < MIN_SIDE || s.width < MIN_SIDE {
        return Err(Error::Precondition(format!(
            "MS-SSIM needs sides of at least {MIN_SIDE}, got {}x{}",
            s.width, s.height
        )));
    }
    if s.batch == 0 || s.channels == 0 {
        return Err(Error::invalid("MS-SSIM of an empty tensor"));
    }
    Ok(())
}

/// Mean MS-SSIM over batch items and channels of pixel-unit tensors.
pub fn ms_ssim(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(ms_ssim_impl(x, y, false)?.0)
}

/// [`ms_ssim`] and its gradient with respect to `y`.
pub fn ms_ssim_with_grad(x: &Tensor, y: &Tensor) -> Result<(f64, Tensor)> {
    let (v, g) = ms_ssim_impl(x, y, true)?;
    Ok((v, g.expect("gradient requested")))
}

fn ms_ssim_impl(x: &Tensor, y: &Tensor, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    check(x, y)?;
    let s = x.shape();
    let count = (s.batch * s.channels) as f64;
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Tensor::zeros(s));
    for b in 0..s.batch {
        for (c, (px, py)) in planes(x, b).into_iter().zip(planes(y, b)).enumerate() {
            let (v, g) = channel_ms_ssim(px, py, want_grad);
            total += v;
            if let (Some(out), Some(g)) = (grad.as_mut(), g) {
                out.plane_mut(b, c)
                    .iter_mut()
                    .zip(&g.data)
                    .for_each(|(o, v)| *o = v / count);
            }
        }
    }
    Ok((total / count, grad))
}
