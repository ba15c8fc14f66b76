//! Adam with bias correction; weight decay enters as an L2 term added to
//! the gradient before the moment updates.

use std::collections::BTreeMap;

use ndarray::ArrayD;

use crate::error::{OarsegError, Result};
use crate::models::Parameters;

pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.5,
            beta2: 0.999,
            weight_decay: 5e-4,
        }
    }
}

/// First/second moment estimates, lazily created per parameter.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, ArrayD<f64>>,
    v: BTreeMap<String, ArrayD<f64>>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One Adam update over every parameter present in `grads`.
pub fn adam_step(
    params: &mut Parameters,
    grads: &BTreeMap<String, ArrayD<f64>>,
    state: &mut AdamState,
    hyper: AdamHyper,
    lr: f64,
) -> Result<()> {
    for (name, g) in grads {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(OarsegError::NonFinite("gradient"));
        }
        if !params.contains(name) {
            return Err(OarsegError::InvalidConfig(format!(
                "gradient for unknown parameter {name:?}"
            )));
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - hyper.beta1.powi(t as i32);
    let bc2 = 1.0 - hyper.beta2.powi(t as i32);
    for (name, g) in grads {
        let theta = params.get_mut(name);
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| ArrayD::zeros(theta.raw_dim()));
        for ((th, gi), (mi, vi)) in theta
            .iter_mut()
            .zip(g.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let grad = gi + hyper.weight_decay * *th;
            *mi = hyper.beta1 * *mi + (1.0 - hyper.beta1) * grad;
            *vi = hyper.beta2 * *vi + (1.0 - hyper.beta2) * grad * grad;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *th -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}
