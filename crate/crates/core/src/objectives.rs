//! Relativistic pairing loss, the approximated two-sided gradient penalty,
//! the teacher-alignment loss and their weighted totals.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::scalar::Scalar;

pub const LAMBDA_AGP: f64 = 0.1;
pub const LAMBDA_REPA: f64 = 1.0;
pub const GP_SIGMA: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error("sigma must be positive and finite, got {0}")]
    Sigma(f64),
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("non-finite {0}")]
    NonFinite(&'static str),
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Index-paired relativistic losses `(l_g_adv, l_d_adv)`, batch-averaged.
pub fn adv_losses(logit_real: &[f64], logit_fake: &[f64]) -> Result<(f64, f64), ObjectiveError> {
    if logit_real.len() != logit_fake.len() {
        return Err(ObjectiveError::Length(logit_real.len(), logit_fake.len()));
    }
    if logit_real.iter().chain(logit_fake).any(|v| !v.is_finite()) {
        return Err(ObjectiveError::NonFinite("logit"));
    }
    let n = logit_real.len().max(1) as f64;
    let g = logit_real.iter().zip(logit_fake).map(|(r, f)| softplus(f - r)).sum::<f64>() / n;
    let d = logit_real.iter().zip(logit_fake).map(|(r, f)| softplus(r - f)).sum::<f64>() / n;
    Ok((g, d))
}

/// `mean f(a_i − b_i)` on the tape.
pub fn pairing_tape<T: Scalar>(g: &mut Graph<T>, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let s = g.softplus(d);
    g.mean(s)
}

/// `mean (ℓ − ℓ′)² / σ²` on the tape; both forwards receive gradients.
pub fn gp_tape<T: Scalar>(g: &mut Graph<T>, logit: Var, logit_perturbed: Var, sigma: f64) -> Var {
    let d = g.sub(logit, logit_perturbed);
    let sq = g.square(d);
    let m = g.mean(sq);
    g.scale(m, T::lit(1.0 / (sigma * sigma)))
}

/// Draws `ε′ ~ N(0, σ²I)` shaped like `base`.
pub fn gp_noise<T: Scalar, R: Rng + ?Sized>(len: usize, sigma: f64, rng: &mut R) -> Result<Vec<T>, ObjectiveError> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(ObjectiveError::Sigma(sigma));
    }
    let n = Normal::new(0.0, sigma).map_err(|_| ObjectiveError::Sigma(sigma))?;
    Ok((0..len).map(|_| T::lit(n.sample(rng))).collect())
}

/// Off-tape penalty: `discriminate` maps a base batch to per-sample logits
/// and is applied to `base` and `base + ε′`.
pub fn approx_gp<T, R, F>(mut discriminate: F, base: &[T], sigma: f64, rng: &mut R) -> Result<f64, ObjectiveError>
where
    T: Scalar,
    R: Rng + ?Sized,
    F: FnMut(&[T]) -> Vec<T>,
{
    let eps = gp_noise::<T, R>(base.len(), sigma, rng)?;
    let shifted: Vec<T> = base.iter().zip(&eps).map(|(&x, &e)| x + e).collect();
    let l = discriminate(base);
    let lp = discriminate(&shifted);
    if l.len() != lp.len() {
        return Err(ObjectiveError::Length(l.len(), lp.len()));
    }
    let n = l.len().max(1) as f64;
    let p = l.iter().zip(&lp).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum::<f64>() / (n * sigma * sigma);
    if !p.is_finite() {
        return Err(ObjectiveError::NonFinite("penalty"));
    }
    Ok(p)
}

/// `−mean cosine` over rows of width `dim`; zero-norm rows contribute 0.
pub fn repa_loss<T: Scalar>(projected: &[T], teacher: &[T], dim: usize) -> Result<f64, ObjectiveError> {
    if projected.len() != teacher.len() || dim == 0 || projected.len() % dim != 0 {
        return Err(ObjectiveError::Length(projected.len(), teacher.len()));
    }
    let mut g = Graph::new();
    let a = g.constant(projected.to_vec(), &[projected.len()]);
    let b = g.constant(teacher.to_vec(), &[teacher.len()]);
    let l = repa_tape(&mut g, a, b, dim);
    Ok(g.scalar(l).as_f64())
}

pub fn repa_tape<T: Scalar>(g: &mut Graph<T>, projected: Var, teacher: Var, dim: usize) -> Var {
    let c = g.cosine(projected, teacher, dim);
    let m = g.mean(c);
    g.scale(m, -T::one())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_agp: f64,
    pub lambda_repa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_agp: LAMBDA_AGP, lambda_repa: LAMBDA_REPA }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossComponents {
    pub l_g_adv: f64,
    pub l_d_adv: f64,
    pub l_ar1: f64,
    pub l_ar2: f64,
    pub l_repa: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_g_adv: f64,
    pub l_d_adv: f64,
    pub l_ar1: f64,
    pub l_ar2: f64,
    pub l_repa: f64,
    pub l_d_total: f64,
    pub l_g_total: f64,
    pub lambda_agp: f64,
    pub lambda_repa: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.l_g_adv, self.l_d_adv, self.l_ar1, self.l_ar2, self.l_repa, self.l_d_total, self.l_g_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

pub fn combine(c: LossComponents, w: LossWeights) -> LossBreakdown {
    LossBreakdown {
        l_g_adv: c.l_g_adv,
        l_d_adv: c.l_d_adv,
        l_ar1: c.l_ar1,
        l_ar2: c.l_ar2,
        l_repa: c.l_repa,
        l_d_total: c.l_d_adv + w.lambda_agp * (c.l_ar1 + c.l_ar2) + w.lambda_repa * c.l_repa,
        l_g_total: c.l_g_adv,
        lambda_agp: w.lambda_agp,
        lambda_repa: w.lambda_repa,
    }
}
