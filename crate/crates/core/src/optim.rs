//! SGD with optional Nesterov momentum and L2 weight decay, in the usual
//! deep-learning formulation:
//!
//! ```text
//! g  <- g + decay * p
//! v  <- mu * v + g
//! p  <- p - lr * (g + mu * v)      (Nesterov)
//! p  <- p - lr * v                 (classical, when nesterov = false)
//! ```

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::params::{GradMap, ParamSet};

pub const NESTEROV_MOMENTUM: f64 = 0.99;
pub const WEIGHT_DECAY: f64 = 3e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

impl SgdConfig {
    /// Plain gradient step: `p - lr * g`.
    pub const PLAIN: SgdConfig = SgdConfig { momentum: 0.0, weight_decay: 0.0, nesterov: false };

    pub fn nesterov() -> Self {
        Self { momentum: NESTEROV_MOMENTUM, weight_decay: WEIGHT_DECAY, nesterov: true }
    }
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self::nesterov()
    }
}

/// Optimizer state: one momentum buffer per parameter id.
#[derive(Clone, Debug, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Option<ParamSet>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: None }
    }

    pub fn velocity(&self) -> Option<&ParamSet> {
        self.velocity.as_ref()
    }

    pub fn step(&mut self, params: &ParamSet, grads: &GradMap, lr: f64) -> Result<ParamSet> {
        self.step_masked(params, grads, lr, None)
    }

    /// Updates only the ids in `mask` (all ids when `None`); the others are
    /// returned unchanged, bit for bit.
    pub fn step_masked(
        &mut self,
        params: &ParamSet,
        grads: &GradMap,
        lr: f64,
        mask: Option<&BTreeSet<String>>,
    ) -> Result<ParamSet> {
        if !(lr > 0.0) {
            return Err(Error::InvalidArgument(format!("learning rate must be positive, got {lr}")));
        }
        if !params.congruent(grads) {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        let SgdConfig { momentum, weight_decay, nesterov } = self.config;
        let velocity = self.velocity.get_or_insert_with(|| params.zeros_like());
        let mut out = params.clone();
        for ((id, p), g) in params.iter().zip(grads.iter().map(|(_, g)| g)) {
            if mask.is_some_and(|m| !m.contains(id)) {
                continue;
            }
            let g = if weight_decay != 0.0 { g.axpy(weight_decay, p)? } else { g.clone() };
            let v = velocity.get(id).expect("velocity mirrors params").scale(momentum).add(&g)?;
            let direction = if nesterov { g.axpy(momentum, &v)? } else { v.clone() };
            out.insert(id, p.axpy(-lr, &direction)?);
            velocity.insert(id, v);
        }
        Ok(out)
    }
}
