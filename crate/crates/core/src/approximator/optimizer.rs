use serde::{Deserialize, Serialize};

use super::ParamVector;
use crate::error::{GfnError, Result};

pub const DEFAULT_CLIP_NORM: f64 = 10.0;

/// Rescales `grad` in place so its L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grad: &mut [f64], max_norm: f64) -> Result<f64> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(GfnError::NonFinite("gradient"));
    }
    let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let scale = max_norm / norm;
        grad.iter_mut().for_each(|g| *g *= scale);
    }
    Ok(norm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Adaptive moment estimation with bias correction. Each parameter slice
/// scales the base learning rate by its own multiplier.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(config: AdamConfig, num_params: usize) -> Self {
        Self {
            config,
            step: 0,
            m: vec![0.0; num_params],
            v: vec![0.0; num_params],
        }
    }

    /// Applies one update. A step that would produce non-finite parameters
    /// is rejected and leaves both parameters and moments unchanged.
    pub fn apply(&mut self, params: &mut ParamVector, grad: &[f64]) -> Result<()> {
        if grad.len() != params.len() || self.m.len() != params.len() {
            return Err(GfnError::DimensionMismatch {
                expected: params.len(),
                got: grad.len(),
            });
        }
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step + 1;
        let bc1 = 1.0 - beta1.powi(t as i32);
        let bc2 = 1.0 - beta2.powi(t as i32);
        let mut m = self.m.clone();
        let mut v = self.v.clone();
        let mut next = params.values().to_vec();
        for slice in params.slices() {
            let rate = lr * slice.lr_multiplier;
            for i in slice.range() {
                let g = grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                next[i] -= rate * m_hat / (v_hat.sqrt() + eps);
            }
        }
        params.assign(&next)?;
        self.m = m;
        self.v = v;
        self.step = t;
        Ok(())
    }
}
