//! Multi-level noise-perturbed guidance: signal schedules, the cumulative
//! variance-preserving noise stack, and the perturbation operator.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MngError {
    #[error("stage count must be at least 1")]
    NoStages,
    #[error("length mismatch: {what} has {got} levels, expected {expected}")]
    Levels { what: &'static str, got: usize, expected: usize },
    #[error("level {level} has {got} elements, expected {expected}")]
    LevelSize { level: usize, got: usize, expected: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    /// `α_k = 2^(k−K)`: signal doubles per stage.
    #[default]
    Exponential,
    /// `α_k = k/K`.
    Linear,
}

/// Signal strengths `α_1 < … < α_K = 1` and the recursion coefficients
/// `r_k = α_(k−1)/α_k`, `σ_k = sqrt(1 − r_k²)` for `k = 2..K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub alphas: Vec<f64>,
    /// `ratios[i]` is `r_(i+2)`.
    pub ratios: Vec<f64>,
    /// `sigmas[i]` is `σ_(i+2)`.
    pub sigmas: Vec<f64>,
}

impl NoiseSchedule {
    pub fn stages(&self) -> usize {
        self.alphas.len()
    }

    /// `r_k` for `k` in `2..=K` (1-based, as in the recursion).
    pub fn ratio(&self, k: usize) -> f64 {
        self.ratios[k - 2]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k - 2]
    }

    /// Noise weight `sqrt(1 − α²)` of every level.
    pub fn noise_weights(&self) -> Vec<f64> {
        self.alphas.iter().map(|a| (1.0 - a * a).max(0.0).sqrt()).collect()
    }
}

pub fn make_schedule(stages: usize, kind: ScheduleKind) -> Result<NoiseSchedule, MngError> {
    if stages == 0 {
        return Err(MngError::NoStages);
    }
    let alphas: Vec<f64> = (1..=stages)
        .map(|k| match kind {
            ScheduleKind::Exponential => 2f64.powi(k as i32 - stages as i32),
            ScheduleKind::Linear => k as f64 / stages as f64,
        })
        .collect();
    let ratios: Vec<f64> = alphas.windows(2).map(|w| w[0] / w[1]).collect();
    let sigmas = ratios.iter().map(|r| (1.0 - r * r).sqrt()).collect();
    Ok(NoiseSchedule { kind, alphas, ratios, sigmas })
}

/// One noise tensor per level, correlated by the cumulative recursion.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseStack<T> {
    pub eps: Vec<Vec<T>>,
}

/// `ε_K ~ N(0, I)`, then `ε_(k−1) = r_k ε_k + σ_k η_k` down to level 1.
pub fn sample_noise_stack<T: Scalar, R: Rng + ?Sized>(len: usize, schedule: &NoiseSchedule, rng: &mut R) -> NoiseStack<T> {
    let k = schedule.stages();
    let mut levels: Vec<Vec<f64>> = vec![Vec::new(); k];
    levels[k - 1] = (0..len).map(|_| StandardNormal.sample(rng)).collect();
    for level in (2..=k).rev() {
        let (r, s) = (schedule.ratio(level), schedule.sigma(level));
        let next: Vec<f64> = levels[level - 1]
            .iter()
            .map(|&e| {
                let eta: f64 = StandardNormal.sample(rng);
                r * e + s * eta
            })
            .collect();
        levels[level - 2] = next;
    }
    NoiseStack {
        eps: levels.into_iter().map(|l| l.into_iter().map(T::lit).collect()).collect(),
    }
}

/// Ordered same-shaped latent images, `levels[k]` laid out
/// `[batch, channels, hw, hw]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageStack<T> {
    pub batch: usize,
    pub channels: usize,
    pub hw: usize,
    pub levels: Vec<Vec<T>>,
}

impl<T: Scalar> ImageStack<T> {
    pub fn level_len(&self) -> usize {
        self.batch * self.channels * self.hw * self.hw
    }

    pub fn stages(&self) -> usize {
        self.levels.len()
    }
}

/// K copies of the same real image batch.
pub fn replicate_real<T: Scalar>(x: &[T], batch: usize, channels: usize, hw: usize, stages: usize) -> ImageStack<T> {
    ImageStack {
        batch,
        channels,
        hw,
        levels: vec![x.to_vec(); stages],
    }
}

/// `α_k x_k + sqrt(1 − α_k²) ε_k` per level; levels with `α = 1` are passed
/// through untouched.
pub fn perturb<T: Scalar>(stack: &ImageStack<T>, schedule: &NoiseSchedule, noise: &NoiseStack<T>) -> Result<ImageStack<T>, MngError> {
    let k = schedule.stages();
    check_lengths(stack.stages(), noise.eps.len(), k)?;
    let n = stack.level_len();
    let weights = schedule.noise_weights();
    let mut levels = Vec::with_capacity(k);
    for (i, (x, e)) in stack.levels.iter().zip(&noise.eps).enumerate() {
        if x.len() != n || e.len() != n {
            return Err(MngError::LevelSize { level: i, got: x.len().min(e.len()), expected: n });
        }
        let alpha = schedule.alphas[i];
        if alpha == 1.0 {
            levels.push(x.clone());
        } else {
            let (a, s) = (T::lit(alpha), T::lit(weights[i]));
            levels.push(x.iter().zip(e).map(|(&xv, &ev)| a * xv + s * ev).collect());
        }
    }
    Ok(ImageStack { levels, ..stack.clone() })
}

fn check_lengths(stack: usize, noise: usize, schedule: usize) -> Result<(), MngError> {
    if stack != schedule {
        return Err(MngError::Levels { what: "image stack", got: stack, expected: schedule });
    }
    if noise != schedule {
        return Err(MngError::Levels { what: "noise stack", got: noise, expected: schedule });
    }
    Ok(())
}

/// Tape version of [`perturb`].
pub fn perturb_tape<T: Scalar>(g: &mut Graph<T>, levels: &[Var], schedule: &NoiseSchedule, noise: &NoiseStack<T>) -> Result<Vec<Var>, MngError> {
    check_lengths(levels.len(), noise.eps.len(), schedule.stages())?;
    let weights = schedule.noise_weights();
    levels
        .iter()
        .zip(&noise.eps)
        .enumerate()
        .map(|(i, (&x, e))| {
            let n = g.value(x).len();
            if e.len() != n {
                return Err(MngError::LevelSize { level: i, got: e.len(), expected: n });
            }
            let alpha = schedule.alphas[i];
            if alpha == 1.0 {
                return Ok(x);
            }
            let shape = g.shape(x).to_vec();
            let s = T::lit(weights[i]);
            let scaled_noise = g.constant(e.iter().map(|&v| s * v).collect(), &shape);
            let xs = g.scale(x, T::lit(alpha));
            Ok(g.add(xs, scaled_noise))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedules() {
        let s = make_schedule(4, ScheduleKind::Exponential).unwrap();
        assert_eq!(s.alphas, vec![0.125, 0.25, 0.5, 1.0]);
        assert_eq!(s.ratio(4), 0.5);
        assert!((s.sigma(4) - 0.866025).abs() < 1e-6);
        for k in 2..=4 {
            assert_eq!(s.ratio(k) * s.alphas[k - 1], s.alphas[k - 2]);
            assert!((s.ratio(k).powi(2) + s.sigma(k).powi(2) - 1.0).abs() < 1e-12);
        }
        for kind in [ScheduleKind::Exponential, ScheduleKind::Linear] {
            assert_eq!(make_schedule(1, kind).unwrap().alphas, vec![1.0]);
        }
        assert_eq!(make_schedule(4, ScheduleKind::Linear).unwrap().alphas, vec![0.25, 0.5, 0.75, 1.0]);
        assert_eq!(make_schedule(0, ScheduleKind::Linear), Err(MngError::NoStages));
    }

    #[test]
    fn final_level_is_bit_transparent() {
        let s = make_schedule(4, ScheduleKind::Exponential).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f32> = (0..32).map(|i| (i as f32).sin() * 1.7).collect();
        let stack = replicate_real(&x, 2, 1, 4, 4);
        let noise = sample_noise_stack::<f32, _>(32, &s, &mut rng);
        let out = perturb(&stack, &s, &noise).unwrap();
        assert_eq!(out.levels[3], x);
        // Reconstruct the noise from every level.
        for k in 0..3 {
            let w = (1.0 - s.alphas[k] * s.alphas[k]).sqrt();
            for i in 0..32 {
                let rec = (out.levels[k][i] as f64 - s.alphas[k] * x[i] as f64) / w;
                assert!((rec - noise.eps[k][i] as f64).abs() < 1e-5);
            }
        }
        let bad = ImageStack { levels: vec![x.clone(); 3], ..stack };
        assert!(matches!(perturb(&bad, &s, &noise), Err(MngError::Levels { .. })));
    }

    #[test]
    fn zero_alpha_limit_is_pure_noise() {
        let s = NoiseSchedule { kind: ScheduleKind::Linear, alphas: vec![0.0, 1.0], ratios: vec![0.0], sigmas: vec![1.0] };
        let noise = NoiseStack { eps: vec![vec![0.3f64, -1.2], vec![0.0, 0.0]] };
        let stack = replicate_real(&[5.0f64, 7.0], 1, 1, 1, 2).levels;
        let stack = ImageStack { batch: 2, channels: 1, hw: 1, levels: stack };
        let out = perturb(&stack, &s, &noise).unwrap();
        assert_eq!(out.levels[0], vec![0.3, -1.2]);
    }
}
