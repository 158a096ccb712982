//! Generalized divisive normalization and its multiplicative inverse.
//!
//! At every spatial location, with `n_i = beta_i + sum_j gamma_ij * x_j^2`:
//!
//!   GDN:  y_i = x_i / sqrt(n_i)
//!   IGDN: y_i = x_i * sqrt(n_i)
//!
//! Positivity is kept by projection (`beta >= BETA_MIN`, `gamma >= 0`) after
//! each optimizer step rather than by reparameterization.

use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const BETA_MIN: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GdnParams {
    pub channels: usize,
    pub beta: Vec<f64>,
    /// Row-major `channels x channels`; row `i` couples into channel `i`.
    pub gamma: Vec<f64>,
}

impl GdnParams {
    /// beta = 1, gamma = 0.1 * identity.
    pub fn new(channels: usize) -> Self {
        let mut gamma = vec![0.0; channels * channels];
        for i in 0..channels {
            gamma[i * channels + i] = 0.1;
        }
        GdnParams {
            channels,
            beta: vec![1.0; channels],
            gamma,
        }
    }

    /// beta = 1, gamma = 0: both directions are the identity map.
    pub fn identity(channels: usize) -> Self {
        GdnParams {
            channels,
            beta: vec![1.0; channels],
            gamma: vec![0.0; channels * channels],
        }
    }

    pub fn zeros_like(&self) -> Self {
        GdnParams {
            channels: self.channels,
            beta: vec![0.0; self.channels],
            gamma: vec![0.0; self.gamma.len()],
        }
    }

    /// Clamps parameters back into their feasible set.
    pub fn project(&mut self) {
        self.beta.iter_mut().for_each(|b| *b = b.max(BETA_MIN));
        self.gamma.iter_mut().for_each(|g| *g = g.max(0.0));
    }

    pub fn is_feasible(&self) -> bool {
        self.beta.iter().all(|&b| b >= BETA_MIN) && self.gamma.iter().all(|&g| g >= 0.0)
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Direction {
    Divide,
    Multiply,
}

fn check(x: &Tensor, g: &GdnParams, op: &str) -> Result<()> {
    if x.shape().channels != g.channels {
        return Err(Error::invalid(format!(
            "{op}: input has {} channels, parameters expect {}",
            x.shape().channels,
            g.channels
        )));
    }
    Ok(())
}

/// `n_i` for every element, laid out like `x`.
fn norms(x: &Tensor, g: &GdnParams) -> Tensor {
    let s = x.shape();
    let c = s.channels;
    let plane = s.plane();
    let mut n = Tensor::zeros(s);
    let sq = x.map(|v| v * v);
    for b in 0..s.batch {
        for i in 0..c {
            let beta = g.beta[i];
            let out = n.plane_mut(b, i);
            out.iter_mut().for_each(|v| *v = beta);
            for j in 0..c {
                let w = g.gamma[i * c + j];
                if w == 0.0 {
                    continue;
                }
                let xs = sq.plane(b, j);
                for p in 0..plane {
                    out[p] += w * xs[p];
                }
            }
        }
    }
    n
}

fn forward(x: &Tensor, g: &GdnParams, dir: Direction) -> Tensor {
    let n = norms(x, g);
    let data = x
        .data()
        .iter()
        .zip(n.data())
        .map(|(&xv, &nv)| match dir {
            Direction::Divide => xv / nv.sqrt(),
            Direction::Multiply => xv * nv.sqrt(),
        })
        .collect();
    Tensor::from_vec(x.shape(), data).expect("shape preserved")
}

fn backward(x: &Tensor, g: &GdnParams, grad_out: &Tensor, dir: Direction) -> (Tensor, GdnParams) {
    let s = x.shape();
    let c = s.channels;
    let plane = s.plane();
    let n = norms(x, g);
    // Direct term g_i * n_i^(-+1/2) and a_i = dL/dn_i.
    let mut grad_x = Tensor::zeros(s);
    let mut a = Tensor::zeros(s);
    for (idx, ((&gy, &xv), &nv)) in grad_out.data().iter().zip(x.data()).zip(n.data()).enumerate() {
        let root = nv.sqrt();
        match dir {
            Direction::Divide => {
                grad_x.data_mut()[idx] = gy / root;
                a.data_mut()[idx] = -0.5 * gy * xv / (nv * root);
            }
            Direction::Multiply => {
                grad_x.data_mut()[idx] = gy * root;
                a.data_mut()[idx] = 0.5 * gy * xv / root;
            }
        }
    }
    let mut grads = g.zeros_like();
    for b in 0..s.batch {
        for i in 0..c {
            let ai = a.plane(b, i);
            grads.beta[i] += ai.iter().sum::<f64>();
            for j in 0..c {
                let xj = x.plane(b, j);
                let mut acc = 0.0;
                for p in 0..plane {
                    acc += ai[p] * xj[p] * xj[p];
                }
                grads.gamma[i * c + j] += acc;
            }
        }
        // dL/dx_j += 2 x_j * sum_i a_i gamma_ij
        for j in 0..c {
            let xj: Vec<f64> = x.plane(b, j).to_vec();
            let mut coupled = vec![0.0; plane];
            for i in 0..c {
                let w = g.gamma[i * c + j];
                if w == 0.0 {
                    continue;
                }
                let ai = a.plane(b, i);
                for p in 0..plane {
                    coupled[p] += w * ai[p];
                }
            }
            let gx = grad_x.plane_mut(b, j);
            for p in 0..plane {
                gx[p] += 2.0 * xj[p] * coupled[p];
            }
        }
    }
    (grad_x, grads)
}

pub fn gdn_forward(x: &Tensor, g: &GdnParams) -> Result<Tensor> {
    check(x, g, "gdn")?;
    Ok(forward(x, g, Direction::Divide))
}

pub fn gdn_backward(x: &Tensor, g: &GdnParams, grad_out: &Tensor) -> Result<(Tensor, GdnParams)> {
    check(x, g, "gdn_backward")?;
    grad_out.expect_shape(x.shape(), "gdn_backward")?;
    Ok(backward(x, g, grad_out, Direction::Divide))
}

pub fn igdn_forward(x: &Tensor, g: &GdnParams) -> Result<Tensor> {
    check(x, g, "igdn")?;
    Ok(forward(x, g, Direction::Multiply))
}

pub fn igdn_backward(x: &Tensor, g: &GdnParams, grad_out: &Tensor) -> Result<(Tensor, GdnParams)> {
    check(x, g, "igdn_backward")?;
    grad_out.expect_shape(x.shape(), "igdn_backward")?;
    Ok(backward(x, g, grad_out, Direction::Multiply))
}
