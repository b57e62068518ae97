//! Adam with bias correction.

use crate::params::{ParamError, ParamSet};

/// Adam hyperparameters. Defaults follow the usual adversarial-training choice
/// (β1 = 0.5) with learning rate 2e-4.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            config,
            first: zeros.clone(),
            second: zeros,
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second
    }
}

/// One Adam update of `params` in place; `grads` is aligned with the entry order.
pub fn adam_step(
    params: &mut ParamSet,
    grads: &[Vec<f64>],
    state: &mut AdamState,
) -> Result<(), ParamError> {
    if grads.len() != params.len() || state.first.len() != params.len() {
        return Err(ParamError::Count {
            expected: params.len(),
            actual: grads.len(),
        });
    }
    for (i, ((name, t), g)) in params.iter().zip(grads).enumerate() {
        if g.len() != t.numel() || state.first[i].len() != t.numel() {
            return Err(ParamError::Length {
                name: name.to_string(),
                expected: t.numel(),
                actual: g.len(),
            });
        }
    }
    state.t += 1;
    let AdamConfig {
        learning_rate,
        beta1,
        beta2,
        eps,
    } = state.config;
    let t = state.t as i32;
    let c1 = 1.0 - beta1.powi(t);
    let c2 = 1.0 - beta2.powi(t);
    for (i, g) in grads.iter().enumerate() {
        let p = params.tensor_at_mut(i).data_mut();
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        for k in 0..g.len() {
            m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
            v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
            let m_hat = m[k] / c1;
            let v_hat = v[k] / c2;
            p[k] -= learning_rate * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
