//! Empirical update-magnitude probe and the learning-rate cross-check.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::analysis::block_features;
use crate::config::{DataConfig, RunConfig};
use crate::data::gen_synthetic;
use crate::generator;
use crate::nn::ModelConfig;
use crate::trainer::{train, RunOptions, TrainError, TrainState};

const PROBE_SAMPLES: usize = 32;
const PROBE_PER_CLASS: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "outcome", rename_all = "lowercase")]
pub enum ProbeOutcome {
    Value {
        /// RMS change of the final generated image.
        rms: f64,
        /// RMS change of every block's token output.
        per_block: Vec<f64>,
    },
    Diverged {
        step: u64,
    },
}

impl ProbeOutcome {
    pub fn value(&self) -> Option<f64> {
        match self {
            ProbeOutcome::Value { rms, .. } => Some(*rms),
            ProbeOutcome::Diverged { .. } => None,
        }
    }
}

fn rms_diff(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len().max(1) as f64).sqrt()
}

/// Probe run configuration: the full objective at learning rate `eta` on a
/// small synthetic set.
pub fn probe_config(model: &ModelConfig, eta: f64, batch: usize, seed: u64) -> RunConfig {
    RunConfig {
        model: model.clone(),
        lr_override: Some(eta),
        batch,
        seed,
        eval_interval: 0,
        data: DataConfig { per_class: PROBE_PER_CLASS, held_out: 0, ..DataConfig::default() },
        ..RunConfig::default()
    }
}

/// Runs `steps` training steps from a fresh seeded model and measures how
/// far the generator's output moved on a held probe batch.
pub fn update_probe(model: &ModelConfig, eta: f64, batch: usize, steps: usize, seed: u64) -> Result<ProbeOutcome, TrainError> {
    let cfg = probe_config(model, eta, batch, seed);
    let mut state = TrainState::<f32>::new(&cfg)?;
    let m = state.cfg.model.clone();
    let ds = gen_synthetic(m.num_classes, PROBE_PER_CLASS, m.image_channels, m.image_hw, cfg.data.seed)?;
    let mut prng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let z: Vec<f32> = generator::sample_latents(&mut prng, PROBE_SAMPLES, m.latent_dim);
    let classes: Vec<usize> = (0..PROBE_SAMPLES).map(|i| i % m.num_classes).collect();
    let snapshot = |s: &TrainState<f32>| -> Result<(Vec<f64>, Vec<Vec<f64>>), TrainError> {
        let img = s.final_images(&s.g, &z, &classes)?.iter().map(|&v| v as f64).collect();
        Ok((img, block_features(&s.gen, &s.g, &z, &classes)?))
    };
    let (img0, feats0) = snapshot(&state)?;
    for _ in 0..steps {
        let (x, y) = state.next_batch(&ds);
        match state.train_step(&x, &y) {
            Ok(_) => {}
            Err(TrainError::Diverged(r)) => return Ok(ProbeOutcome::Diverged { step: r.step }),
            Err(e) => return Err(e),
        }
    }
    let (img1, feats1) = snapshot(&state)?;
    if img1.iter().any(|v| !v.is_finite()) {
        return Ok(ProbeOutcome::Diverged { step: state.step });
    }
    Ok(ProbeOutcome::Value {
        rms: rms_diff(&img0, &img1),
        per_block: feats0.iter().zip(&feats1).map(|(a, b)| rms_diff(a, b)).collect(),
    })
}

/// Median of the finite probe values over `seeds`.
pub fn median_probe(model: &ModelConfig, eta: f64, batch: usize, steps: usize, seeds: &[u64]) -> Result<Option<f64>, TrainError> {
    let mut vals = Vec::with_capacity(seeds.len());
    for &s in seeds {
        if let Some(v) = update_probe(model, eta, batch, steps, s)?.value() {
            vals.push(v);
        }
    }
    if vals.is_empty() {
        return Ok(None);
    }
    vals.sort_by(f64::total_cmp);
    let n = vals.len();
    Ok(Some(if n % 2 == 1 { vals[n / 2] } else { 0.5 * (vals[n / 2 - 1] + vals[n / 2]) }))
}

/// Final-to-initial evaluation ratio above which a short run counts as
/// slow to converge.
pub const SLOW_RATIO: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossCheck {
    pub width: usize,
    pub lr: f64,
    pub seed: u64,
    pub diverged: bool,
    pub initial: f64,
    pub last: f64,
    pub slow: bool,
}

/// Short training run at an explicit learning rate, flagging divergence
/// and slow progress of the evaluation distance.
pub fn cross_check(base: &RunConfig, width: usize, lr: f64, steps: u64, seed: u64) -> Result<CrossCheck, TrainError> {
    let mut cfg = base.resolve().map_err(TrainError::Config)?;
    cfg.model.width = width;
    cfg.lr_override = Some(lr);
    cfg.steps = steps;
    cfg.seed = seed;
    cfg.eval_interval = steps.max(1);
    let mut out = CrossCheck { width, lr, seed, diverged: false, initial: f64::NAN, last: f64::NAN, slow: true };
    match train::<f32>(&cfg, RunOptions::default()) {
        Ok(s) => {
            out.initial = s.evals.first().map_or(f64::NAN, |e| e.1);
            out.last = s.evals.last().map_or(f64::NAN, |e| e.1);
            out.slow = !(out.last <= SLOW_RATIO * out.initial);
        }
        Err(TrainError::Diverged(_)) => out.diverged = true,
        Err(e) => return Err(e),
    }
    Ok(out)
}
