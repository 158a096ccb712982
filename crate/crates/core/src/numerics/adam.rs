//! Bias-corrected Adam over a fixed list of named parameter arrays.

use crate::error::{Error, Result};

/// One trainable array handed to [`adam_step`].
pub struct ParamSlot<'a> {
    pub name: String,
    pub values: &'a mut [f64],
    pub grad: &'a [f64],
    /// Values are clamped to at least this after the update.
    pub lower_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    /// Fresh state for parameter arrays of the given lengths, with
    /// beta1 = 0.9, beta2 = 0.999, epsilon = 1e-8.
    pub fn new(lengths: &[usize], learning_rate: f64) -> Self {
        AdamState {
            step_count: 0,
            first_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            second_moment: lengths.iter().map(|&n| vec![0.0; n]).collect(),
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Applies one Adam update to every slot, then projects bounded slots.
///
/// All gradients are checked before anything is modified, so a divergence
/// error leaves parameters and state untouched.
pub fn adam_step(slots: &mut [ParamSlot<'_>], state: &mut AdamState) -> Result<()> {
    if slots.len() != state.first_moment.len() {
        return Err(Error::invalid(format!(
            "adam: {} parameter arrays but state tracks {}",
            slots.len(),
            state.first_moment.len()
        )));
    }
    for (k, slot) in slots.iter().enumerate() {
        if slot.values.len() != slot.grad.len() || slot.values.len() != state.first_moment[k].len() {
            return Err(Error::invalid(format!(
                "adam: size mismatch for parameter {}",
                slot.name
            )));
        }
        if slot.grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence {
                what: "gradient".into(),
                location: format!("parameter {}", slot.name),
            });
        }
    }

    state.step_count += 1;
    let t = state.step_count as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    let (b1, b2, lr, eps) = (state.beta1, state.beta2, state.learning_rate, state.epsilon);

    for (k, slot) in slots.iter_mut().enumerate() {
        let m = &mut state.first_moment[k];
        let v = &mut state.second_moment[k];
        for i in 0..slot.values.len() {
            let g = slot.grad[i];
            m[i] = b1 * m[i] + (1.0 - b1) * g;
            v[i] = b2 * v[i] + (1.0 - b2) * g * g;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            slot.values[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        if let Some(lo) = slot.lower_bound {
            slot.values.iter_mut().for_each(|p| *p = p.max(lo));
        }
    }
    Ok(())
}
