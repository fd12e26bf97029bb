use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ParameterStore;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
        }
    }
}

/// First and second moment estimates, one array per parameter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    /// Number of updates applied so far.
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParameterStore) -> Self {
        let zeros = || params.tensors().map(|t| vec![0.0; t.numel()]).collect();
        Self {
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One decoupled-weight-decay Adam update of a flat array at step `t` (1-based):
/// `theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)`.
pub fn adamw_update(theta: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], t: u64, cfg: &AdamWConfig) -> Result<()> {
    if t < 1 {
        return Err(Error::Contract("optimizer step count must start at 1".into()));
    }
    if g.len() != theta.len() || m.len() != theta.len() || v.len() != theta.len() {
        return Err(Error::dim(format!(
            "optimizer arrays differ in length: theta {}, grad {}, m {}, v {}",
            theta.len(),
            g.len(),
            m.len(),
            v.len()
        )));
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..theta.len() {
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        theta[i] -= cfg.lr * (m_hat / (v_hat.sqrt() + cfg.eps) + cfg.weight_decay * theta[i]);
    }
    Ok(())
}

/// Applies step `t` to every parameter; `grads` is in store order.
pub fn adamw_step(
    params: &mut ParameterStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    t: u64,
    cfg: &AdamWConfig,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::Contract(format!(
            "{} parameters, {} gradients, {} moment arrays",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (_, p)) in params.iter_mut().enumerate() {
        adamw_update(p.data_mut(), &grads[i], &mut state.m[i], &mut state.v[i], t, cfg)?;
    }
    state.step = t;
    Ok(())
}
