//! Bias-corrected Adam without weight decay.

use serde::{Deserialize, Serialize};

use super::TrainError;
use crate::model::{ModelConfig, ModelParams};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one tensor per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub m: ModelParams<T>,
    pub v: ModelParams<T>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(cfg: &ModelConfig) -> Self {
        Self {
            m: ModelParams::zeros(cfg),
            v: ModelParams::zeros(cfg),
        }
    }
}

/// Applies update number `t` (1-based) with learning rate `lr`.
///
/// Fails without touching anything if a gradient entry is NaN or infinite.
pub fn adam_step<T: Scalar>(
    params: &mut ModelParams<T>,
    grads: &ModelParams<T>,
    state: &mut AdamState<T>,
    t: u64,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<(), TrainError> {
    let grad_views = grads.tensors();
    if let Some(bad) = grad_views.iter().find(|g| g.data.iter().any(|x| !x.is_finite())) {
        return Err(TrainError::NonFiniteGradient {
            tensor: bad.name.clone(),
            step: t,
            epoch: None,
        });
    }
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let bc1 = one - T::of(cfg.beta1.powi(t as i32));
    let bc2 = one - T::of(cfg.beta2.powi(t as i32));
    let lr = T::of(lr);
    let eps = T::of(cfg.eps);
    for (((p, g), m), v) in params
        .tensors_mut()
        .into_iter()
        .zip(&grad_views)
        .zip(state.m.tensors_mut())
        .zip(state.v.tensors_mut())
    {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (one - b1) * gi;
            v[i] = b2 * v[i] + (one - b2) * gi * gi;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
