//! Adadelta optimizer.
//!
//! ```text
//! E[g²]  ← ρ·E[g²] + (1−ρ)·g²
//! Δ      ← −sqrt(E[Δx²] + ε) / sqrt(E[g²] + ε) · g
//! E[Δx²] ← ρ·E[Δx²] + (1−ρ)·Δ²
//! x      ← x + lr·Δ
//! ```
//! The update is elementwise, so it does not depend on how parameters are shaped.

use std::collections::BTreeMap;

use crate::error::{contract, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f32,
    pub eps: f32,
    /// Multiplier on the update; 1.0 is plain Adadelta.
    pub lr: f32,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        Self {
            rho: 0.95,
            eps: 1e-6,
            lr: 1.0,
        }
    }
}

/// Running averages for one parameter tensor.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Accumulators {
    pub sq_grad: Vec<f32>,
    pub sq_update: Vec<f32>,
}

impl Accumulators {
    pub fn new(len: usize) -> Self {
        Self {
            sq_grad: vec![0.0; len],
            sq_update: vec![0.0; len],
        }
    }
}

/// Optimizer state keyed by parameter name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdadeltaState {
    pub config: AdadeltaConfig,
    slots: BTreeMap<String, Accumulators>,
}

impl AdadeltaState {
    pub fn new(config: AdadeltaConfig) -> Self {
        Self {
            config,
            slots: BTreeMap::new(),
        }
    }

    pub fn slots(&self) -> &BTreeMap<String, Accumulators> {
        &self.slots
    }

    pub fn insert_slot(&mut self, name: impl Into<String>, acc: Accumulators) {
        self.slots.insert(name.into(), acc);
    }

    /// Applies one update to `params` in place.
    pub fn step(&mut self, name: &str, params: &mut [f32], grads: &[f32]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(contract!(
                "parameter {name} has {} values but gradient has {}",
                params.len(),
                grads.len()
            ));
        }
        let acc = self
            .slots
            .entry(name.to_string())
            .or_insert_with(|| Accumulators::new(params.len()));
        if acc.sq_grad.len() != params.len() {
            return Err(contract!("optimizer slot {name} has the wrong length"));
        }
        adadelta_update(&self.config, params, grads, acc);
        Ok(())
    }
}

pub fn adadelta_update(cfg: &AdadeltaConfig, params: &mut [f32], grads: &[f32], acc: &mut Accumulators) {
    let AdadeltaConfig { rho, eps, lr } = *cfg;
    for (((p, &g), eg), ex) in params
        .iter_mut()
        .zip(grads)
        .zip(acc.sq_grad.iter_mut())
        .zip(acc.sq_update.iter_mut())
    {
        *eg = rho * *eg + (1.0 - rho) * g * g;
        let delta = -((*ex + eps).sqrt() / (*eg + eps).sqrt()) * g;
        *ex = rho * *ex + (1.0 - rho) * delta * delta;
        *p += lr * delta;
    }
}
