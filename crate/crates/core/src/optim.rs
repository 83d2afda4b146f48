//! Width-aware learning rate, AdamW and the generator EMA.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::MAPPING_LR_MULT;
use crate::params::{ParamGroup, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("invalid optimizer setting: {0}")]
    Config(String),
    #[error("parameter sets are not congruent")]
    Incongruent,
    #[error("gradient count {got} does not match {expected} parameters")]
    GradCount { expected: usize, got: usize },
}

/// `η_base · (C_base / C_model)`; equal widths return `η_base` unchanged.
pub fn adapt_lr(eta_base: f64, c_base: f64, c_model: f64) -> Result<f64, OptimError> {
    if !(eta_base > 0.0 && eta_base.is_finite()) {
        return Err(OptimError::Config(format!("base learning rate must be positive, got {eta_base}")));
    }
    if !(c_base > 0.0 && c_model > 0.0 && c_base.is_finite() && c_model.is_finite()) {
        return Err(OptimError::Config(format!("widths must be positive, got {c_base} and {c_model}")));
    }
    Ok(eta_base * (c_base / c_model))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub eta_base: f64,
    pub c_base: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub ema_decay: f64,
    pub mapping_lr_mult: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            eta_base: 4e-4,
            c_base: 384,
            betas: (0.0, 0.99),
            eps: 1e-8,
            weight_decay: 0.0,
            ema_decay: 0.999,
            mapping_lr_mult: MAPPING_LR_MULT,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        adapt_lr(self.eta_base, self.c_base as f64, 1.0)?;
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(OptimError::Config(format!("betas must lie in [0, 1), got ({b1}, {b2})")));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(OptimError::Config(format!("ema_decay must lie in [0, 1], got {}", self.ema_decay)));
        }
        if !(self.eps > 0.0 && self.weight_decay >= 0.0 && self.mapping_lr_mult >= 0.0) {
            return Err(OptimError::Config("eps must be positive; weight_decay and mapping_lr_mult nonnegative".into()));
        }
        Ok(())
    }

    pub fn lr_for_width(&self, c_model: usize) -> Result<f64, OptimError> {
        adapt_lr(self.eta_base, self.c_base as f64, c_model as f64)
    }
}

/// AdamW moments for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW<T> {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub mapping_lr_mult: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(store: &ParamStore<T>, cfg: &OptimConfig, lr: f64) -> Self {
        let zeros: Vec<Vec<T>> = store.tensors().iter().map(|t| vec![T::zero(); t.data.len()]).collect();
        Self {
            lr,
            betas: cfg.betas,
            eps: cfg.eps,
            weight_decay: cfg.weight_decay,
            mapping_lr_mult: cfg.mapping_lr_mult,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn group_lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Main => self.lr,
            ParamGroup::Mapping => self.lr * self.mapping_lr_mult,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &[Vec<T>]) -> Result<(), OptimError> {
        if grads.len() != store.len() || self.m.len() != store.len() {
            return Err(OptimError::GradCount { expected: store.len(), got: grads.len() });
        }
        self.step += 1;
        let (b1, b2) = self.betas;
        let bc1 = 1.0 - b1.powi(self.step as i32);
        let bc2 = 1.0 - b2.powi(self.step as i32);
        let (b1t, b2t, eps) = (T::lit(b1), T::lit(b2), T::lit(self.eps));
        for (i, t) in store.tensors_mut().iter_mut().enumerate() {
            let g = &grads[i];
            if g.len() != t.data.len() {
                return Err(OptimError::GradCount { expected: t.data.len(), got: g.len() });
            }
            let lr = self.group_lr(t.group);
            let step = T::lit(lr / bc1);
            let inv_bc2 = T::lit(1.0 / bc2);
            let decay = T::lit(1.0 - lr * self.weight_decay);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.len() {
                m[j] = b1t * m[j] + (T::one() - b1t) * g[j];
                v[j] = b2t * v[j] + (T::one() - b2t) * g[j] * g[j];
                let denom = (v[j] * inv_bc2).sqrt() + eps;
                t.data[j] = t.data[j] * decay - step * m[j] / denom;
            }
        }
        Ok(())
    }
}

/// `ema ← decay·ema + (1 − decay)·params`.
pub fn ema_update<T: Scalar>(ema: &mut ParamStore<T>, params: &ParamStore<T>, decay: f64) -> Result<(), OptimError> {
    if !ema.congruent(params) {
        return Err(OptimError::Incongruent);
    }
    if !(0.0..=1.0).contains(&decay) {
        return Err(OptimError::Config(format!("ema decay must lie in [0, 1], got {decay}")));
    }
    let (d, r) = (T::lit(decay), T::lit(1.0 - decay));
    for (e, p) in ema.tensors_mut().iter_mut().zip(params.tensors()) {
        for (a, &b) in e.data.iter_mut().zip(&p.data) {
            *a = d * *a + r * b;
        }
    }
    Ok(())
}
