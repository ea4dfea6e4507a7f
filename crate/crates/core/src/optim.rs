//! Adaptive-moment parameter updates with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig { lr: 5e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment accumulators mirroring the parameter tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamWState {
    pub fn new(params: &[Tensor]) -> Self {
        AdamWState {
            m: params.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            v: params.iter().map(|t| Tensor::zeros(&t.shape)).collect(),
            step: 0,
        }
    }
}

/// One update over a parameter list; `grads[i] = None` means zero gradient.
/// Fails loudly on non-finite gradients.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Option<Tensor>],
    state: &mut AdamWState,
    cfg: &AdamWConfig,
) -> Result<()> {
    assert_eq!(params.len(), grads.len(), "gradient list length mismatch");
    assert_eq!(params.len(), state.m.len(), "optimizer state length mismatch");
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!("gradient of parameter {i}")));
            }
            if g.shape != params[i].shape {
                return Err(Error::shape(format!("gradient {i} shape mismatch")));
            }
        }
    }
    state.step += 1;
    let t = state.step;
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let zero;
        let g = match &grads[i] {
            Some(g) => &g.data,
            None => {
                zero = vec![0.0; params[i].numel()];
                &zero
            }
        };
        let p = &mut params[i].data;
        let m = &mut state.m[i].data;
        let v = &mut state.v[i].data;
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p[j] -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * p[j]);
        }
    }
    Ok(())
}
