//! AdamW with decoupled weight decay.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{AdapterParams, MAX_LOG_INV_TAU, MIN_LOG_INV_TAU};

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
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First/second moment estimates shaped like the parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: AdapterParams,
    pub v: AdapterParams,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(like: &AdapterParams) -> Self {
        Self {
            m: AdapterParams::zeros(like.d_in, like.d_out),
            v: AdapterParams::zeros(like.d_in, like.d_out),
            step: 0,
        }
    }
}

/// Blocks that receive weight decay. Biases and the temperature do not.
fn decays(block: &str) -> bool {
    matches!(block, "w_fuse" | "w_img")
}

/// One AdamW update: bias-corrected moments, parameter step, decoupled decay,
/// then the temperature clamp `1 <= 1/tau <= 100`.
///
/// Gradients are checked before anything is mutated; a non-finite entry
/// aborts with the name of its block.
pub fn adamw_step(
    params: &mut AdapterParams,
    grads: &AdapterParams,
    state: &mut OptimizerState,
    cfg: &AdamWConfig,
) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.m) || !params.same_shape(&state.v) {
        return Err(Error::Validation("parameter, gradient, and moment shapes differ".into()));
    }
    for (name, block) in grads.blocks() {
        if block.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { block: name });
        }
    }

    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    let decay = 1.0 - cfg.lr * cfg.weight_decay;

    let blocks = params
        .blocks_mut()
        .into_iter()
        .zip(grads.blocks())
        .zip(state.m.blocks_mut())
        .zip(state.v.blocks_mut());
    for ((((name, p), (_, g)), (_, m)), (_, v)) in blocks {
        let decay = if decays(name) { decay } else { 1.0 };
        for i in 0..p.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            p[i] *= decay;
        }
    }
    params.log_inv_tau = params.log_inv_tau.clamp(MIN_LOG_INV_TAU, MAX_LOG_INV_TAU);
    Ok(())
}
