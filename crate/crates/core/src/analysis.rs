//! Frozen teacher encoder, Fréchet distance between Gaussian fits, per-block
//! ablation contributions and PCA projections of block features.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::generator::{GenOptions, GeneratorLayout};
use crate::graph::{Graph, Var};
use crate::nn::{self, BlockCtx, Bound, Dense, DisBlockLayout, Init, ModelConfig, NnError, RMS_EPS};
use crate::params::{self, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const FRECHET_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalysisError {
    #[error("need at least {needed} samples for {dim}-dimensional features, got {got}; collect more samples or reduce the feature dimension")]
    TooFewSamples { needed: usize, dim: usize, got: usize },
    #[error("feature dimension mismatch: {0} vs {1}")]
    Dim(usize, usize),
    #[error("geometry mismatch: {0}")]
    Geometry(String),
    #[error(transparent)]
    Nn(#[from] NnError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    pub dim: usize,
    pub heads: usize,
    pub blocks: usize,
    pub seed: u64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self { dim: 64, heads: 4, blocks: 2, seed: 0x7eac }
    }
}

/// Randomly initialized ViT that is never trained.
#[derive(Debug, Clone)]
pub struct TeacherEncoder {
    pub cfg: TeacherConfig,
    pub patch: usize,
    pub channels: usize,
    pub hw: usize,
    layout_patch: Dense,
    cls: ParamId,
    blocks: Vec<DisBlockLayout>,
    store: ParamStore<f64>,
}

impl TeacherEncoder {
    pub fn new(cfg: TeacherConfig, model: &ModelConfig) -> Result<Self, AnalysisError> {
        if cfg.dim == 0 || cfg.heads == 0 || cfg.dim % cfg.heads != 0 || (cfg.dim / cfg.heads) % 2 != 0 {
            return Err(AnalysisError::Geometry(format!("teacher dim {} must split into {} even heads", cfg.dim, cfg.heads)));
        }
        model.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let m = ParamGroup::Main;
        let pd = model.patch_dim();
        let layout_patch = Dense::new(&mut store, &mut rng, "teacher.patch", pd, cfg.dim, true, Init::Normal((1.0 / pd as f64).sqrt()), m);
        let cls = store.add("teacher.cls", &[cfg.dim], params::normal_vec(&mut rng, cfg.dim, 1.0), m);
        let init = Init::Normal((1.0 / cfg.dim as f64).sqrt());
        let blocks = (0..cfg.blocks)
            .map(|i| DisBlockLayout::new(&mut store, &mut rng, &format!("teacher.block{i}"), cfg.dim, cfg.heads, nn::ffn_hidden(cfg.dim), init, 1.0))
            .collect();
        Ok(Self {
            cfg,
            patch: model.patch,
            channels: model.image_channels,
            hw: model.image_hw,
            layout_patch,
            cls,
            blocks,
            store,
        })
    }

    pub fn tokens_per_sample(&self) -> usize {
        let grid = self.hw / self.patch;
        grid * grid + 1
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.hw * self.hw
    }

    /// Normalized tokens `[batch, N + 1, dim]`, `[cls]` last.
    pub fn encode<T: Scalar>(&self, x: &[T], batch: usize) -> Result<Vec<T>, AnalysisError> {
        if x.len() != batch * self.image_len() {
            return Err(AnalysisError::Geometry(format!("teacher expects {} values per image, got {} for {batch} images", self.image_len(), x.len())));
        }
        let xs: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
        let mut g = Graph::<f64>::new();
        let p = Bound::new(&self.store, false);
        let grid = self.hw / self.patch;
        let (n, d) = (grid * grid, self.cfg.dim);
        let t = n + 1;
        let geo = ModelConfig {
            patch: self.patch,
            image_channels: self.channels,
            image_hw: self.hw,
            stages: 1,
            ..ModelConfig::toy()
        };
        let xv = g.constant(xs, &[batch, self.image_len()]);
        let idx = crate::discriminator::patchify_index(&geo, 1, batch);
        let patches = g.gather(xv, idx.into(), &[batch, n, geo.patch_dim()]);
        let tokens = self.layout_patch.forward(&mut g, p, patches);
        let cls = p.get(&mut g, self.cls);
        let joined = g.concat(&[tokens, cls]);
        let idx: Vec<i32> = (0..batch)
            .flat_map(|b| (0..t * d).map(move |j| if j < n * d { (b * n * d + j) as i32 } else { (batch * n * d + j - n * d) as i32 }))
            .collect();
        let mut h = g.gather(joined, idx.into(), &[batch, t, d]);
        let ctx = BlockCtx {
            batch,
            tokens: t,
            width: d,
            heads: self.cfg.heads,
            rope: Some(Arc::new(nn::rope_table::<f64>(grid, grid, 1, d / self.cfg.heads, true)?)),
        };
        for b in &self.blocks {
            h = b.forward(&mut g, p, h, &ctx);
        }
        let out = g.rms_norm(h, d, RMS_EPS);
        Ok(g.value(out).iter().map(|&v| T::lit(v)).collect())
    }

    /// `[cls]` feature rows of [`encode`](Self::encode).
    pub fn cls_features<T: Scalar>(&self, x: &[T], batch: usize) -> Result<Vec<Vec<f64>>, AnalysisError> {
        let tok = self.encode(x, batch)?;
        let (t, d) = (self.tokens_per_sample(), self.cfg.dim);
        Ok((0..batch).map(|b| tok[((b + 1) * t - 1) * d..(b + 1) * t * d].iter().map(|v| v.as_f64()).collect()).collect())
    }
}

fn mean_cov(x: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = x.len();
    let mut mu = DVector::zeros(dim);
    for r in x {
        mu += DVector::from_column_slice(r);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    for r in x {
        let d = DVector::from_column_slice(r) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let e = SymmetricEigen::new(m.clone());
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &e.eigenvectors * d * e.eigenvectors.transpose()
}

/// `‖μa − μb‖² + Tr(Σa + Σb − 2(Σa Σb)^½)` over Gaussian fits with
/// `eps·I` added to both covariances.
pub fn frechet_proxy(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, AnalysisError> {
    let dim = a.first().map_or(0, |r| r.len());
    for set in [a, b] {
        if set.len() < dim + 1 || set.len() < 2 {
            return Err(AnalysisError::TooFewSamples { needed: (dim + 1).max(2), dim, got: set.len() });
        }
        if let Some(r) = set.iter().find(|r| r.len() != dim) {
            return Err(AnalysisError::Dim(dim, r.len()));
        }
    }
    let (mu_a, mut ca) = mean_cov(a, dim);
    let (mu_b, mut cb) = mean_cov(b, dim);
    for i in 0..dim {
        ca[(i, i)] += FRECHET_EPS;
        cb[(i, i)] += FRECHET_EPS;
    }
    let sa = sym_sqrt(&ca);
    let m = &sa * &cb * &sa;
    let m = (&m + m.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let d = (mu_a - mu_b).norm_squared() + ca.trace() + cb.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DistanceKind {
    LatentL2,
    TeacherFeature,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockContributionReport {
    pub distances: Vec<f64>,
    pub sample_count: usize,
    pub distance_kind: DistanceKind,
}

impl BlockContributionReport {
    /// Mean over the first `depth / 2` blocks.
    pub fn early_mean(&self) -> f64 {
        let h = (self.distances.len() / 2).max(1);
        self.distances[..h].iter().sum::<f64>() / h as f64
    }
}

/// Distance of the final image with each block bypassed to the unablated
/// output, averaged over samples. `z: [count, latent_dim]`.
pub fn block_contribution<T: Scalar>(
    layout: &GeneratorLayout,
    params: &ParamStore<T>,
    z: &[T],
    classes: &[usize],
    teacher: Option<&TeacherEncoder>,
) -> Result<BlockContributionReport, AnalysisError> {
    let cfg = &layout.cfg;
    let count = classes.len();
    if z.len() != count * cfg.latent_dim {
        return Err(AnalysisError::Geometry(format!("{} latent values for {count} samples of {}", z.len(), cfg.latent_dim)));
    }
    let mut sums = vec![0.0; cfg.depth];
    const CHUNK: usize = 64;
    for start in (0..count).step_by(CHUNK) {
        let end = (start + CHUNK).min(count);
        let n = end - start;
        let zc = &z[start * cfg.latent_dim..end * cfg.latent_dim];
        let w = layout.styles(params, zc, &classes[start..end])?;
        let feats = |img: &[T]| -> Result<Vec<Vec<f64>>, AnalysisError> {
            match teacher {
                Some(t) => t.cls_features(img, n),
                None => Ok(img.chunks(cfg.image_len()).map(|r| r.iter().map(|v| v.as_f64()).collect()).collect()),
            }
        };
        let full = layout.synthesize(params, vec![w.clone(); cfg.depth], n, GenOptions::default())?;
        let base = feats(full.final_image())?;
        for (b, sum) in sums.iter_mut().enumerate() {
            let opts = GenOptions { ablate: Some(b), capture: false };
            let out = layout.synthesize(params, vec![w.clone(); cfg.depth], n, opts)?;
            let f = feats(out.final_image())?;
            *sum += base
                .iter()
                .zip(&f)
                .map(|(x, y)| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
                .sum::<f64>();
        }
    }
    Ok(BlockContributionReport {
        distances: sums.iter().map(|s| s / count.max(1) as f64).collect(),
        sample_count: count,
        distance_kind: if teacher.is_some() { DistanceKind::TeacherFeature } else { DistanceKind::LatentL2 },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBlock {
    /// Three unit-norm principal directions (zero rows when unavailable).
    pub components: Vec<Vec<f64>>,
    pub explained: Vec<f64>,
    pub rank_deficient: bool,
    pub rows: usize,
    pub cols: usize,
    /// Per sample, a `rows × cols` grid of 3-vectors in row-major order.
    pub grids: Vec<Vec<[f64; 3]>>,
}

/// Top-3 PCA of token features `[samples, rows·cols, dim]`.
pub fn pca_features(features: &[f64], samples: usize, rows: usize, cols: usize, dim: usize) -> Result<PcaBlock, AnalysisError> {
    let tokens = rows * cols;
    if features.len() != samples * tokens * dim {
        return Err(AnalysisError::Geometry(format!("{} feature values for {samples}x{tokens}x{dim}", features.len())));
    }
    let total = samples * tokens;
    if total < 2 {
        return Err(AnalysisError::TooFewSamples { needed: 2, dim, got: total });
    }
    let x = DMatrix::from_row_slice(total, dim, features);
    let mean = x.row_mean();
    let mut xc = x.clone();
    for mut r in xc.row_iter_mut() {
        r -= &mean;
    }
    let cov = xc.transpose() * &xc / (total - 1) as f64;
    let e = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| e.eigenvalues[b].total_cmp(&e.eigenvalues[a]));
    let var_total: f64 = e.eigenvalues.iter().map(|v| v.max(0.0)).sum();
    let top = e.eigenvalues[order[0]].max(0.0);
    let mut components = Vec::with_capacity(3);
    let mut explained = Vec::with_capacity(3);
    let mut rank_deficient = false;
    for k in 0..3 {
        match order.get(k) {
            Some(&i) if e.eigenvalues[i] > 1e-12 * top.max(1e-300) => {
                components.push(e.eigenvectors.column(i).iter().copied().collect::<Vec<f64>>());
                explained.push(if var_total > 0.0 { e.eigenvalues[i] / var_total } else { 0.0 });
            }
            _ => {
                rank_deficient = true;
                components.push(vec![0.0; dim]);
                explained.push(0.0);
            }
        }
    }
    let grids = (0..samples)
        .map(|s| {
            (0..tokens)
                .map(|t| {
                    let r = xc.row(s * tokens + t);
                    let mut out = [0.0; 3];
                    for (k, c) in components.iter().enumerate() {
                        out[k] = r.iter().zip(c).map(|(a, b)| a * b).sum();
                    }
                    out
                })
                .collect()
        })
        .collect();
    Ok(PcaBlock { components, explained, rank_deficient, rows, cols, grids })
}

/// Captured token features of every block for `z: [count, latent_dim]`.
pub fn block_features<T: Scalar>(layout: &GeneratorLayout, params: &ParamStore<T>, z: &[T], classes: &[usize]) -> Result<Vec<Vec<f64>>, AnalysisError> {
    let batch = classes.len();
    let mut g = Graph::new();
    let zv = g.constant(z.to_vec(), &[batch, layout.cfg.latent_dim]);
    let tape = layout.forward(&mut g, Bound::new(params, false), zv, classes, GenOptions { ablate: None, capture: true })?;
    Ok(tape.features.iter().map(|&v: &Var| g.value(v).iter().map(|x| x.as_f64()).collect()).collect())
}
