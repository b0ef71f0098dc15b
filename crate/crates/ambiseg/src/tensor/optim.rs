//! AdamW with decoupled weight decay, plus global-norm gradient clipping.

use std::collections::BTreeMap;

use super::{elem, Element, Tensor};
use crate::error::{Error, Result};

/// Named parameter set; the BTreeMap keeps update order deterministic.
pub type ParamMap<T> = BTreeMap<String, Tensor<T>>;

/// Optimizer state. Moment buffers are keyed by parameter name and created
/// lazily on the first step.
#[derive(Debug, Clone)]
pub struct AdamWState<T: Element> {
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<T>>,
    v: BTreeMap<String, Vec<T>>,
}

impl<T: Element> AdamWState<T> {
    /// Defaults beyond the learning rate: beta1 0.9, beta2 0.999, eps 1e-8,
    /// weight decay 0.01.
    pub fn new(lr: f64) -> Self {
        AdamWState {
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, weight_decay: f64) -> Self {
        self.weight_decay = weight_decay;
        self
    }

    /// Moment buffers for checkpointing, in name order.
    pub fn moments(&self) -> impl Iterator<Item = (&String, &Vec<T>, &Vec<T>)> {
        self.m
            .iter()
            .zip(self.v.values())
            .map(|((name, m), v)| (name, m, v))
    }

    /// Restore moment buffers from a checkpoint.
    pub fn set_moments(&mut self, name: &str, m: Vec<T>, v: Vec<T>) {
        self.m.insert(name.to_string(), m);
        self.v.insert(name.to_string(), v);
    }
}

/// One decoupled-weight-decay AdamW update with bias correction.
///
/// Parameters are replaced by fresh leaves holding the updated values;
/// gradients must already be populated (the training loop zero-fills and
/// then runs backward).
pub fn adamw_step<T: Element>(params: &mut ParamMap<T>, state: &mut AdamWState<T>) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bias1 = 1.0 - state.beta1.powf(t);
    let bias2 = 1.0 - state.beta2.powf(t);
    let (beta1, beta2) = (elem::<T>(state.beta1), elem::<T>(state.beta2));
    let one_m_b1 = elem::<T>(1.0 - state.beta1);
    let one_m_b2 = elem::<T>(1.0 - state.beta2);
    let lr = elem::<T>(state.lr);
    let eps = elem::<T>(state.eps);
    let decay_mult = elem::<T>(1.0 - state.lr * state.weight_decay);
    let inv_bias1 = elem::<T>(1.0 / bias1);
    let inv_bias2 = elem::<T>(1.0 / bias2);

    for (name, param) in params.iter_mut() {
        let grad = param.grad().ok_or_else(|| {
            Error::Usage(format!("adamw_step: parameter '{name}' has no gradient"))
        })?;
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| vec![T::zero(); grad.len()]);
        if m.len() != param.numel() || v.len() != param.numel() {
            return Err(Error::Shape(format!(
                "adamw_step: moment buffers for '{name}' have {} elements, parameter has {}",
                m.len(),
                param.numel()
            )));
        }
        let mut data = param.data().to_vec();
        for i in 0..data.len() {
            let g = grad[i];
            data[i] = data[i] * decay_mult;
            m[i] = beta1 * m[i] + one_m_b1 * g;
            v[i] = beta2 * v[i] + one_m_b2 * g * g;
            let m_hat = m[i] * inv_bias1;
            let v_hat = v[i] * inv_bias2;
            data[i] = data[i] - lr * m_hat / (v_hat.sqrt() + eps);
        }
        *param = Tensor::param(param.shape(), data)?;
    }
    Ok(())
}

/// Scale all gradients so their global L2 norm is at most `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_grad_norm<T: Element>(params: &ParamMap<T>, max_norm: f64) -> Result<f64> {
    if max_norm <= 0.0 {
        return Err(Error::Config(format!(
            "clip_grad_norm: max_norm must be positive, got {max_norm}"
        )));
    }
    let mut sum_sq = 0.0f64;
    for (name, param) in params {
        if let Some(grad) = param.grad() {
            for g in &grad {
                let g = g.to_f64().unwrap_or(f64::NAN);
                if !g.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient in parameter '{name}'"
                    )));
                }
                sum_sq += g * g;
            }
        }
    }
    let norm = sum_sq.sqrt();
    if norm > max_norm {
        let factor = elem::<T>(max_norm / norm);
        for param in params.values() {
            param.scale_grad_in_place(factor);
        }
    }
    Ok(norm)
}
