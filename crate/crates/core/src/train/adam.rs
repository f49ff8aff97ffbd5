//! Bias-corrected Adam with per-group learning-rate multipliers.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::Real;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "beta1")]
    pub beta1: f64,
    #[serde(default = "beta2")]
    pub beta2: f64,
    #[serde(default = "eps")]
    pub eps: f64,
}

fn beta1() -> f64 {
    0.9
}
fn beta2() -> f64 {
    0.999
}
fn eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: beta1(), beta2: beta2(), eps: eps() }
    }
}

/// A contiguous parameter range trained at `lr_mult × lr`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamGroup {
    pub range: Range<usize>,
    pub lr_mult: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
    pub groups: Vec<ParamGroup>,
}

impl<T: Real> AdamState<T> {
    /// Zero moments; one group spanning all `len` parameters at multiplier 1.
    pub fn new(config: AdamConfig, len: usize) -> Self {
        Self::with_groups(config, len, vec![ParamGroup { range: 0..len, lr_mult: 1.0 }])
    }

    pub fn with_groups(config: AdamConfig, len: usize, groups: Vec<ParamGroup>) -> Self {
        Self { config, m: vec![T::zero(); len], v: vec![T::zero(); len], step: 0, groups }
    }

    /// Zero moments and step count, keeping hyperparameters and groups.
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = T::zero());
        self.v.iter_mut().for_each(|x| *x = T::zero());
        self.step = 0;
    }
}

/// One Adam update of `params` in place.
pub fn adam_step<T: Real>(params: &mut [T], grads: &[T], state: &mut AdamState<T>) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(LabError::usage(format!(
            "adam shapes differ: params {}, grads {}, moments {}",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    let c = state.config;
    let t = state.step + 1;
    let bc1 = 1.0 - c.beta1.powf(t as f64);
    let bc2 = 1.0 - c.beta2.powf(t as f64);
    let (b1, b2) = (T::of(c.beta1), T::of(c.beta2));
    let (one_b1, one_b2) = (T::of(1.0 - c.beta1), T::of(1.0 - c.beta2));
    let inv_bc1 = T::of(1.0 / bc1);
    let inv_bc2 = T::of(1.0 / bc2);
    let eps = T::of(c.eps);
    for g in &state.groups {
        let lr = T::of(c.lr * g.lr_mult);
        for i in g.range.clone() {
            let gi = grads[i];
            let m = b1 * state.m[i] + one_b1 * gi;
            let v = b2 * state.v[i] + one_b2 * gi * gi;
            state.m[i] = m;
            state.v[i] = v;
            let delta = lr * (m * inv_bc1) / ((v * inv_bc2).sqrt() + eps);
            params[i] -= delta;
        }
    }
    if params.iter().any(|p| !p.is_finite()) {
        return Err(LabError::numeric("adam step", "non-finite parameter after update"));
    }
    state.step = t;
    Ok(())
}
