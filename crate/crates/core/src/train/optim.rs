use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, ParamStore, Scalar};

/// Adaptive moments with decoupled weight decay.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self::new(1e-4, 1e-2)
    }
}

/// First and second moment estimates, one buffer per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<T: Scalar>(params: &ParamStore<T>) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One update: `theta -= lr * m_hat / (sqrt(v_hat) + eps) + lr * wd * theta`,
/// with the decay term using the pre-update value.
pub fn optimizer_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &Gradients<T>,
    state: &mut AdamState,
    cfg: &AdamWConfig,
) {
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for id in 0..params.len() {
        let g = grads.get(id).data();
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        for (i, theta) in params.get_mut(id).data_mut().iter_mut().enumerate() {
            let gi = g[i].to_f64().unwrap_or(0.0);
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * gi;
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * gi * gi;
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            let old = theta.to_f64().unwrap_or(0.0);
            let new =
                old - cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps) - cfg.lr * cfg.weight_decay * old;
            *theta = T::from_f64_lossy(new);
        }
    }
}
