//! Deviation-counteractive learning rate scaling.
//!
//! Each quantized layer's learning rate is multiplied by
//! `phi(d) = max(exp(-alpha * d), beta)`, where `d` is the cosine distance
//! its quantized activation gradient showed in the current iteration.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape of the scaling curve. Only `Exponential` is the method itself; the
/// other two exist for ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleForm {
    Exponential,
    Linear,
    Quadratic,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrScaleConfig {
    pub alpha: f64,
    pub beta: f64,
    pub form: ScaleForm,
}

impl Default for LrScaleConfig {
    fn default() -> Self {
        LrScaleConfig { alpha: 20.0, beta: 0.1, form: ScaleForm::Exponential }
    }
}

impl LrScaleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(Error::Config(format!("beta must lie in (0, 1], got {}", self.beta)));
        }
        Ok(())
    }

    pub fn scale_factor(&self, dc: f64) -> f64 {
        scale_factor(dc, self)
    }
}

pub fn scale_factor(dc: f64, cfg: &LrScaleConfig) -> f64 {
    let raw = match cfg.form {
        ScaleForm::Exponential => (-cfg.alpha * dc).exp(),
        ScaleForm::Linear => 1.0 - dc,
        ScaleForm::Quadratic => 1.0 - dc * dc,
    };
    raw.max(cfg.beta)
}

/// Per-layer learning rates `base_lr * phi(d_layer)`.
pub fn effective_lr(base_lr: f64, dc_per_layer: &BTreeMap<usize, f64>, cfg: &LrScaleConfig) -> BTreeMap<usize, f64> {
    dc_per_layer
        .iter()
        .map(|(&layer, &dc)| (layer, base_lr * scale_factor(dc, cfg)))
        .collect()
}
