//! Strided 2-D convolution and its transpose, with analytic gradients.
//!
//! Both directions share three loop kernels over a "big" (high resolution)
//! and a "small" (strided) side:
//!
//! - `gather`: small[o, y, x] += K[o, i, ky, kx] * big[i, y*s + ky - p, x*s + kx - p]
//! - `scatter`: the adjoint of `gather`
//! - `kernel_grad`: the correlation of both sides, i.e. dK
//!
//! A forward convolution gathers from its input; a transposed convolution
//! scatters its input. Kernels are always laid out `[small][big][k][k]`,
//! which is `[out][in]` for a convolution and `[in][out]` for a transposed
//! one, so the same weights give an exact adjoint pair.

use rand::Rng;

use super::tensor::{Shape, Tensor};
use crate::error::{Error, Result};

/// Weights and geometry of one convolution or transposed convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns appended by a transposed convolution. Zero for a
    /// forward convolution.
    pub output_padding: usize,
    pub kernels: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ConvParams {
    /// Zero-initialized forward convolution with "same"-style padding, so
    /// that an input side divisible by `stride` shrinks by exactly `stride`.
    pub fn conv(in_channels: usize, out_channels: usize, kernel_size: usize, stride: usize) -> Result<Self> {
        Self::with_geometry(in_channels, out_channels, kernel_size, stride, 0)
    }

    /// Zero-initialized transposed convolution that grows each side by
    /// exactly `stride`, mirroring [`ConvParams::conv`].
    pub fn transposed(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
    ) -> Result<Self> {
        Self::with_geometry(in_channels, out_channels, kernel_size, stride, stride.saturating_sub(1))
    }

    fn with_geometry(
        in_channels: usize,
        out_channels: usize,
        kernel_size: usize,
        stride: usize,
        output_padding: usize,
    ) -> Result<Self> {
        if stride == 0 {
            return Err(Error::invalid("convolution stride must be at least 1"));
        }
        if kernel_size % 2 == 0 {
            return Err(Error::invalid(format!(
                "kernel size must be odd, got {kernel_size}"
            )));
        }
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::invalid("convolution channel counts must be positive"));
        }
        Ok(ConvParams {
            in_channels,
            out_channels,
            kernel_size,
            stride,
            padding: (kernel_size - 1) / 2,
            output_padding,
            kernels: vec![0.0; in_channels * out_channels * kernel_size * kernel_size],
            bias: vec![0.0; out_channels],
        })
    }

    /// Draws kernels from U(-1/sqrt(fan_in), 1/sqrt(fan_in)) and zeroes the bias.
    pub fn init_uniform<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let fan_in = (self.in_channels * self.kernel_size * self.kernel_size) as f64;
        let bound = 1.0 / fan_in.sqrt();
        for w in &mut self.kernels {
            *w = rng.gen_range(-bound..bound);
        }
        self.bias.iter_mut().for_each(|b| *b = 0.0);
    }

    /// Same geometry, all values zero. Used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        ConvParams {
            kernels: vec![0.0; self.kernels.len()],
            bias: vec![0.0; self.bias.len()],
            ..self.clone()
        }
    }

    /// Output side length of a forward convolution.
    pub fn conv_output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel_size {
            return None;
        }
        Some((padded - self.kernel_size) / self.stride + 1)
    }

    /// Output side length of a transposed convolution.
    pub fn transposed_output_len(&self, input: usize) -> Option<usize> {
        if input == 0 {
            return None;
        }
        let grown = (input - 1) * self.stride + self.kernel_size + self.output_padding;
        grown.checked_sub(2 * self.padding).filter(|&n| n > 0)
    }

    fn geometry(&self) -> Geometry {
        Geometry {
            k: self.kernel_size,
            stride: self.stride,
            pad: self.padding,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    k: usize,
    stride: usize,
    pad: usize,
}

/// Range of small-side indices `o` for which `o * stride + off` lands inside
/// `[0, big_len)`.
#[inline]
fn valid_range(small_len: usize, big_len: usize, stride: usize, off: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
    let last = big_len as isize - 1 - off;
    let hi = if last < 0 { 0 } else { last / s + 1 };
    let hi = (hi as usize).min(small_len);
    let lo = lo as usize;
    (lo, hi.max(lo))
}

/// Visits every (small plane, big plane, kernel tap) triple with its valid
/// output window. The callback receives `(o, i, tap, oy_range, ox_range, dy, dx)`
/// where `big = small * stride + d`.
#[inline]
fn for_each_tap(
    small_ch: usize,
    big_ch: usize,
    small_hw: (usize, usize),
    big_hw: (usize, usize),
    g: Geometry,
    mut f: impl FnMut(usize, usize, usize, (usize, usize), (usize, usize), isize, isize),
) {
    let k = g.k;
    for o in 0..small_ch {
        for i in 0..big_ch {
            for ky in 0..k {
                let dy = ky as isize - g.pad as isize;
                let yr = valid_range(small_hw.0, big_hw.0, g.stride, dy);
                if yr.0 >= yr.1 {
                    continue;
                }
                for kx in 0..k {
                    let dx = kx as isize - g.pad as isize;
                    let xr = valid_range(small_hw.1, big_hw.1, g.stride, dx);
                    if xr.0 >= xr.1 {
                        continue;
                    }
                    let tap = ((o * big_ch + i) * k + ky) * k + kx;
                    f(o, i, tap, yr, xr, dy, dx);
                }
            }
        }
    }
}

fn gather(big: &Tensor, kernels: &[f64], small_shape: Shape, g: Geometry) -> Tensor {
    let bs = big.shape();
    let mut small = Tensor::zeros(small_shape);
    let (sh, sw) = (small_shape.height, small_shape.width);
    let s = g.stride;
    for b in 0..bs.batch {
        for_each_tap(
            small_shape.channels,
            bs.channels,
            (sh, sw),
            (bs.height, bs.width),
            g,
            |o, i, tap, yr, xr, dy, dx| {
                let w = kernels[tap];
                let bp = big.plane(b, i);
                let base = (b * small_shape.channels + o) * sh * sw;
                let sp = &mut small.data_mut()[base..base + sh * sw];
                for oy in yr.0..yr.1 {
                    let iy = (oy * s) as isize + dy;
                    let brow = &bp[iy as usize * bs.width..(iy as usize + 1) * bs.width];
                    let srow = &mut sp[oy * sw..(oy + 1) * sw];
                    for ox in xr.0..xr.1 {
                        let ix = ((ox * s) as isize + dx) as usize;
                        srow[ox] += w * brow[ix];
                    }
                }
            },
        );
    }
    small
}

fn scatter(small: &Tensor, kernels: &[f64], big_shape: Shape, g: Geometry) -> Tensor {
    let ss = small.shape();
    let mut big = Tensor::zeros(big_shape);
    let (bh, bw) = (big_shape.height, big_shape.width);
    let s = g.stride;
    for b in 0..ss.batch {
        for_each_tap(
            ss.channels,
            big_shape.channels,
            (ss.height, ss.width),
            (bh, bw),
            g,
            |o, i, tap, yr, xr, dy, dx| {
                let w = kernels[tap];
                let sp = small.plane(b, o);
                let base = (b * big_shape.channels + i) * bh * bw;
                let bp = &mut big.data_mut()[base..base + bh * bw];
                for oy in yr.0..yr.1 {
                    let iy = ((oy * s) as isize + dy) as usize;
                    let srow = &sp[oy * ss.width..(oy + 1) * ss.width];
                    let brow = &mut bp[iy * bw..(iy + 1) * bw];
                    for ox in xr.0..xr.1 {
                        let ix = ((ox * s) as isize + dx) as usize;
                        brow[ix] += w * srow[ox];
                    }
                }
            },
        );
    }
    big
}

fn kernel_grad(big: &Tensor, small: &Tensor, g: Geometry) -> Vec<f64> {
    let bs = big.shape();
    let ss = small.shape();
    let mut dk = vec![0.0; ss.channels * bs.channels * g.k * g.k];
    let s = g.stride;
    for b in 0..bs.batch {
        for_each_tap(
            ss.channels,
            bs.channels,
            (ss.height, ss.width),
            (bs.height, bs.width),
            g,
            |o, i, tap, yr, xr, dy, dx| {
                let bp = big.plane(b, i);
                let sp = small.plane(b, o);
                let mut acc = 0.0;
                for oy in yr.0..yr.1 {
                    let iy = ((oy * s) as isize + dy) as usize;
                    let brow = &bp[iy * bs.width..(iy + 1) * bs.width];
                    let srow = &sp[oy * ss.width..(oy + 1) * ss.width];
                    for ox in xr.0..xr.1 {
                        let ix = ((ox * s) as isize + dx) as usize;
                        acc += srow[ox] * brow[ix];
                    }
                }
                dk[tap] += acc;
            },
        );
    }
    dk
}

fn add_bias(t: &mut Tensor, bias: &[f64]) {
    let s = t.shape();
    for b in 0..s.batch {
        for (c, &v) in bias.iter().enumerate() {
            if v != 0.0 {
                t.plane_mut(b, c).iter_mut().for_each(|x| *x += v);
            }
        }
    }
}

fn channel_sums(t: &Tensor) -> Vec<f64> {
    let s = t.shape();
    let mut out = vec![0.0; s.channels];
    for b in 0..s.batch {
        for (c, acc) in out.iter_mut().enumerate() {
            *acc += t.plane(b, c).iter().sum::<f64>();
        }
    }
    out
}

fn check_channels(x: &Tensor, expected: usize, op: &str) -> Result<()> {
    if x.shape().channels != expected {
        return Err(Error::invalid(format!(
            "{op}: input has {} channels, parameters expect {expected}",
            x.shape().channels
        )));
    }
    Ok(())
}

fn conv_output_shape(x: Shape, p: &ConvParams) -> Result<Shape> {
    let oh = p.conv_output_len(x.height).ok_or_else(|| {
        Error::invalid(format!(
            "conv2d: padded height {} smaller than kernel {}",
            x.height + 2 * p.padding,
            p.kernel_size
        ))
    })?;
    let ow = p.conv_output_len(x.width).ok_or_else(|| {
        Error::invalid(format!(
            "conv2d: padded width {} smaller than kernel {}",
            x.width + 2 * p.padding,
            p.kernel_size
        ))
    })?;
    Ok(Shape::new(x.batch, p.out_channels, oh, ow))
}

fn transposed_output_shape(x: Shape, p: &ConvParams) -> Result<Shape> {
    let oh = p
        .transposed_output_len(x.height)
        .ok_or_else(|| Error::invalid(format!("tconv2d: height {} yields an empty output", x.height)))?;
    let ow = p
        .transposed_output_len(x.width)
        .ok_or_else(|| Error::invalid(format!("tconv2d: width {} yields an empty output", x.width)))?;
    Ok(Shape::new(x.batch, p.out_channels, oh, ow))
}

fn check_grad_shape(grad_out: &Tensor, expected: Shape, op: &str) -> Result<()> {
    if grad_out.shape() != expected {
        return Err(Error::invalid(format!(
            "{op}: gradient shape {} does not match output shape {expected}",
            grad_out.shape()
        )));
    }
    Ok(())
}

pub fn conv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_channels(x, p.in_channels, "conv2d")?;
    let out_shape = conv_output_shape(x.shape(), p)?;
    let mut y = gather(x, &p.kernels, out_shape, p.geometry());
    add_bias(&mut y, &p.bias);
    Ok(y)
}

/// Gradients of a scalar loss with respect to the input and the parameters
/// of [`conv2d_forward`], given the gradient at its output.
pub fn conv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<(Tensor, ConvParams)> {
    check_channels(x, p.in_channels, "conv2d_backward")?;
    check_grad_shape(grad_out, conv_output_shape(x.shape(), p)?, "conv2d_backward")?;
    let g = p.geometry();
    let grad_x = scatter(grad_out, &p.kernels, x.shape(), g);
    let grad_p = ConvParams {
        kernels: kernel_grad(x, grad_out, g),
        bias: channel_sums(grad_out),
        ..p.clone()
    };
    Ok((grad_x, grad_p))
}

pub fn tconv2d_forward(x: &Tensor, p: &ConvParams) -> Result<Tensor> {
    check_channels(x, p.in_channels, "tconv2d")?;
    let out_shape = transposed_output_shape(x.shape(), p)?;
    let mut y = scatter(x, &p.kernels, out_shape, p.geometry());
    add_bias(&mut y, &p.bias);
    Ok(y)
}

pub fn tconv2d_backward(x: &Tensor, p: &ConvParams, grad_out: &Tensor) -> Result<(Tensor, ConvParams)> {
    check_channels(x, p.in_channels, "tconv2d_backward")?;
    check_grad_shape(grad_out, transposed_output_shape(x.shape(), p)?, "tconv2d_backward")?;
    let g = p.geometry();
    let grad_x = gather(grad_out, &p.kernels, x.shape(), g);
    let grad_p = ConvParams {
        kernels: kernel_grad(grad_out, x, g),
        bias: channel_sums(grad_out),
        ..p.clone()
    };
    Ok((grad_x, grad_p))
}
