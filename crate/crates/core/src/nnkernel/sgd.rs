//! Momentum SGD with weight decay and a step learning-rate schedule.
//!
//! Update rule, per parameter entry with effective rate `η = lr(iter)·lr_mult`:
//!
//! ```text
//! v ← μ·v − η·(g + λ·w)
//! w ← w + v
//! ```
//!
//! An entry whose effective rate is exactly zero is frozen: neither its
//! weights nor its momentum buffer are touched.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nnkernel::params::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SgdConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_gamma: f64,
    pub lr_step: u64,
    pub batch_size: usize,
    pub dropout_rate: f64,
}

impl SgdConfig {
    /// The reference recipe: batch 256, momentum 0.9, decay 5e-4, lr 0.01
    /// divided by 10 every 100k iterations, dropout 0.5.
    pub fn reference() -> Self {
        SgdConfig {
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            lr_gamma: 0.1,
            lr_step: 100_000,
            batch_size: 256,
            dropout_rate: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Validation(format!("sgd: {what}")));
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(&format!("base_lr {} must be finite and non-negative", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(&format!("momentum {} not in [0,1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(&format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.lr_gamma > 0.0 && self.lr_gamma <= 1.0) {
            return bad(&format!("lr_gamma {} not in (0,1]", self.lr_gamma));
        }
        if self.lr_step == 0 {
            return bad("lr_step must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(&format!("dropout_rate {} not in [0,1)", self.dropout_rate));
        }
        Ok(())
    }
}

/// `base_lr · gamma^⌊iteration / step⌋`
pub fn lr_schedule(cfg: &SgdConfig, iteration: u64) -> f64 {
    let steps = (iteration / cfg.lr_step) as i32;
    cfg.base_lr * cfg.lr_gamma.powi(steps)
}

pub fn sgd_step(params: &mut ParamSet, cfg: &SgdConfig, iteration: u64) {
    let lr = lr_schedule(cfg, iteration);
    for e in params.iter_mut() {
        let eta = lr * e.lr_mult;
        if eta == 0.0 {
            continue;
        }
        let w = e.weight.data_mut();
        let v = e.momentum.data_mut();
        let g = e.grad.data();
        for i in 0..w.len() {
            v[i] = cfg.momentum * v[i] - eta * (g[i] + cfg.weight_decay * w[i]);
            w[i] += v[i];
        }
    }
}
