use serde::{Deserialize, Serialize};

use super::params::{ModelParams, Params};
use crate::error::{Error, Result};

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 1e-2, momentum: 0.9, weight_decay: 1e-5 }
    }
}

/// Momentum buffers plus hyperparameters. The learning rate is owned by the
/// caller's schedule and may be changed between steps.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub buffers: Params<f32>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl OptimizerState {
    pub fn new(cfg: SgdConfig) -> Result<Self> {
        if !(cfg.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
        }
        Ok(Self { buffers: Params::zeros(), lr: cfg.lr, momentum: cfg.momentum, weight_decay: cfg.weight_decay })
    }
}

/// One step: `buf = momentum * buf + grad + wd * param; param -= lr * buf`.
pub fn sgd_step(params: &mut ModelParams, grads: &ModelParams, state: &mut OptimizerState) -> Result<()> {
    if !params.same_shape(grads) || !params.same_shape(&state.buffers) {
        return Err(Error::Shape("parameter, gradient and buffer shapes differ".into()));
    }
    let (lr, mom, wd) = (state.lr, state.momentum, state.weight_decay);
    for ((p, g), b) in params.blocks.iter_mut().zip(&grads.blocks).zip(state.buffers.blocks.iter_mut()) {
        for ((x, &dx), buf) in p.values.iter_mut().zip(&g.values).zip(b.values.iter_mut()) {
            let next = mom * *buf as f64 + dx as f64 + wd * *x as f64;
            *buf = next as f32;
            *x = (*x as f64 - lr * next) as f32;
        }
    }
    Ok(())
}
