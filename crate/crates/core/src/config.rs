//! JSON run configuration.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::analysis::TeacherConfig;
use crate::discriminator::{Activation, DiscSettings};
use crate::mng::ScheduleKind;
use crate::nn::ModelConfig;
use crate::objectives::{LossWeights, GP_SIGMA};
use crate::optim::OptimConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// GLT1 file; synthetic data is generated when absent.
    pub path: Option<PathBuf>,
    pub per_class: usize,
    pub seed: u64,
    /// Samples held out for evaluation.
    pub held_out: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { path: None, per_class: 2000, seed: 7, held_out: 512 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Named model preset; overrides `model` when set.
    pub preset: Option<String>,
    pub model: ModelConfig,
    /// Multi-level supervision; off trains a single final stage.
    pub mng: bool,
    pub schedule: ScheduleKind,
    pub discriminator: DiscSettings,
    pub projector_hidden: usize,
    pub projector_activation: Activation,
    pub teacher: TeacherConfig,
    pub lambda_agp: f64,
    pub lambda_repa: f64,
    pub gp_sigma: f64,
    pub optim: OptimConfig,
    /// Exact learning rate, bypassing the width rule.
    pub lr_override: Option<f64>,
    pub batch: usize,
    pub steps: u64,
    pub d_steps_per_g: usize,
    pub seed: u64,
    pub data: DataConfig,
    pub eval_interval: u64,
    pub n_eval: usize,
    pub log_interval: u64,
    pub checkpoint_interval: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            preset: None,
            model: ModelConfig::toy(),
            mng: true,
            schedule: ScheduleKind::Exponential,
            discriminator: DiscSettings::default(),
            projector_hidden: 256,
            projector_activation: Activation::Silu,
            teacher: TeacherConfig::default(),
            lambda_agp: w.lambda_agp,
            lambda_repa: w.lambda_repa,
            gp_sigma: GP_SIGMA,
            optim: OptimConfig::default(),
            lr_override: None,
            batch: 64,
            steps: 2000,
            d_steps_per_g: 1,
            seed: 0,
            data: DataConfig::default(),
            eval_interval: 500,
            n_eval: 256,
            log_interval: 10,
            checkpoint_interval: 500,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, String> {
        serde_json::from_str(text).map_err(|e| e.to_string())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn weights(&self) -> LossWeights {
        LossWeights { lambda_agp: self.lambda_agp, lambda_repa: self.lambda_repa }
    }

    /// Fills the preset and the stage count, then validates.
    pub fn resolve(&self) -> Result<Self, String> {
        let mut out = self.clone();
        if let Some(name) = out.preset.take() {
            out.model = ModelConfig::preset(&name).ok_or_else(|| format!("unknown preset {name:?} (expected toy, s, b, l or xl)"))?;
        }
        if !out.mng {
            out.model.stages = 1;
        }
        out.validate()?;
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.model.validate().map_err(|e| e.to_string())?;
        self.optim.validate().map_err(|e| e.to_string())?;
        let nonneg = |name: &str, v: f64| if v >= 0.0 && v.is_finite() { Ok(()) } else { Err(format!("{name} must be finite and nonnegative, got {v}")) };
        nonneg("lambda_agp", self.lambda_agp)?;
        nonneg("lambda_repa", self.lambda_repa)?;
        if let Some(lr) = self.lr_override {
            nonneg("lr_override", lr)?;
        }
        if !(self.gp_sigma > 0.0 && self.gp_sigma.is_finite()) {
            return Err(format!("gp_sigma must be positive, got {}", self.gp_sigma));
        }
        if self.batch == 0 || self.d_steps_per_g == 0 || self.projector_hidden == 0 {
            return Err("batch, d_steps_per_g and projector_hidden must be at least 1".into());
        }
        if self.data.per_class == 0 {
            return Err("data.per_class must be at least 1".into());
        }
        if self.eval_interval > 0 && self.n_eval < self.teacher.dim + 1 {
            return Err(format!("n_eval must be at least teacher.dim + 1 = {}", self.teacher.dim + 1));
        }
        if self.eval_interval > 0 && self.data.held_out < self.n_eval {
            return Err(format!("data.held_out ({}) must cover n_eval ({})", self.data.held_out, self.n_eval));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_named() {
        let err = RunConfig::from_json(r#"{"lr_warmup": 10}"#).unwrap_err();
        assert!(err.contains("lr_warmup"), "{err}");
        let err = RunConfig::from_json(r#"{"optim": {"beta": 1}}"#).unwrap_err();
        assert!(err.contains("beta"), "{err}");
    }

    #[test]
    fn resolve_round_trips_through_echo() {
        let cfg = RunConfig { preset: Some("toy".into()), mng: false, ..RunConfig::default() };
        let r = cfg.resolve().unwrap();
        assert_eq!(r.model.stages, 1);
        let back = RunConfig::from_json(&r.to_json()).unwrap();
        assert_eq!(back.resolve().unwrap(), r);
        assert!(RunConfig { preset: Some("huge".into()), ..RunConfig::default() }.resolve().is_err());
    }
}
