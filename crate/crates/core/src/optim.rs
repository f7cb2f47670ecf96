//! Adam optimiser over flat parameter slices.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for one parameter group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// Moment state for a list of parameter groups, stepped together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub groups: Vec<AdamState>,
}

impl Adam {
    pub fn new(config: AdamConfig, sizes: &[usize]) -> Self {
        Self {
            config,
            groups: sizes.iter().map(|&n| AdamState::new(n)).collect(),
        }
    }

    /// One descent step on group `g`.
    pub fn step(&mut self, g: usize, params: &mut [f64], grad: &[f64]) {
        adam_step(&self.config, &mut self.groups[g], params, grad);
    }
}

/// Bias-corrected Adam update, moving against the gradient.
pub fn adam_step(cfg: &AdamConfig, st: &mut AdamState, params: &mut [f64], grad: &[f64]) {
    debug_assert_eq!(params.len(), grad.len());
    st.t += 1;
    let b1t = 1.0 - math::powi(cfg.beta1, st.t as i32);
    let b2t = 1.0 - math::powi(cfg.beta2, st.t as i32);
    for i in 0..params.len() {
        let g = grad[i];
        st.m[i] = cfg.beta1 * st.m[i] + (1.0 - cfg.beta1) * g;
        st.v[i] = cfg.beta2 * st.v[i] + (1.0 - cfg.beta2) * g * g;
        let mh = st.m[i] / b1t;
        let vh = st.v[i] / b2t;
        params[i] -= cfg.lr * mh / (math::sqrt(vh) + cfg.eps);
    }
}
