//! Style-modulated transformer generator with per-stage linear decoders.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::nn::{self, gat_block, BlockCtx, Bound, Dense, GatBlockLayout, GateVars, Init, MappingLayout, ModelConfig, NnError, INIT_STD, RMS_EPS};
use crate::params::{self, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StyleError {
    #[error("style statistics are empty")]
    EmptyStats,
    #[error("class {0} has no style statistics")]
    MissingClass(usize),
    #[error("{name} must be finite and non-negative, got {value}")]
    BadScalar { name: &'static str, value: f64 },
    #[error("style length {got} does not match width {expected}")]
    Width { got: usize, expected: usize },
}

/// Parameter layout of the generator.
#[derive(Debug, Clone)]
pub struct GeneratorLayout {
    pub cfg: ModelConfig,
    pub const_tokens: ParamId,
    pub mapping: MappingLayout,
    pub blocks: Vec<GatBlockLayout>,
    pub heads: Vec<Dense>,
    unpatchify: Arc<[i32]>,
}

/// Tape handles produced by one generator forward.
#[derive(Debug, Clone)]
pub struct GenTape {
    /// `[batch, channels, hw, hw]` per stage, cumulative.
    pub levels: Vec<Var>,
    /// Mapping-network output when the forward started from latents.
    pub style: Option<Var>,
    /// Token grid after every block, only filled when capturing.
    pub features: Vec<Var>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GenOptions {
    /// Bypass this block entirely (its gates forced to zero).
    pub ablate: Option<usize>,
    pub capture: bool,
}

/// K cumulative partial images plus the per-block styles that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorOutput<T> {
    pub batch: usize,
    pub images: Vec<Vec<T>>,
    pub styles_used: Vec<Vec<T>>,
}

impl<T: Scalar> GeneratorOutput<T> {
    pub fn final_image(&self) -> &[T] {
        self.images.last().expect("at least one stage")
    }
}

/// Index map from head outputs `[batch, tokens, channels·p·p]` to images
/// `[batch, channels, hw, hw]`.
pub fn unpatchify_index(cfg: &ModelConfig, batch: usize) -> Vec<i32> {
    let (p, ch, hw, grid) = (cfg.patch, cfg.image_channels, cfg.image_hw, cfg.grid());
    let pd = cfg.patch_dim();
    let n = cfg.num_patches();
    let mut idx = Vec::with_capacity(batch * ch * hw * hw);
    for b in 0..batch {
        for c in 0..ch {
            for y in 0..hw {
                for x in 0..hw {
                    let tok = (y / p) * grid + x / p;
                    let e = c * p * p + (y % p) * p + x % p;
                    idx.push((b * n * pd + tok * pd + e) as i32);
                }
            }
        }
    }
    idx
}

impl GeneratorLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<(Self, ParamStore<T>), NnError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let n = cfg.num_patches();
        let const_tokens = store.add("gen.const_tokens", &[n, cfg.width], params::trunc_normal(rng, n * cfg.width, INIT_STD), ParamGroup::Main);
        let mapping = MappingLayout::new(&mut store, rng, cfg);
        let blocks = (0..cfg.depth)
            .map(|i| GatBlockLayout::new(&mut store, rng, &format!("gen.block{i}"), cfg))
            .collect();
        let heads = (0..cfg.stages)
            .map(|k| {
                Dense::new(
                    &mut store,
                    rng,
                    &format!("gen.head{k}"),
                    cfg.width,
                    cfg.patch_dim(),
                    true,
                    Init::TruncNormal(INIT_STD),
                    ParamGroup::Main,
                )
            })
            .collect();
        let layout = Self {
            cfg: cfg.clone(),
            const_tokens,
            mapping,
            blocks,
            heads,
            unpatchify: unpatchify_index(cfg, 1).into(),
        };
        Ok((layout, store))
    }

    /// Blocks after which each stage head reads the token grid (1-based).
    pub fn head_positions(&self) -> Vec<usize> {
        let per = self.cfg.blocks_per_stage();
        (1..=self.cfg.stages).map(|k| k * per).collect()
    }

    fn unpatchify_for(&self, batch: usize) -> Arc<[i32]> {
        if batch == 1 {
            self.unpatchify.clone()
        } else {
            unpatchify_index(&self.cfg, batch).into()
        }
    }

    /// Latents `z: [batch, latent_dim]` through the mapping network and the
    /// block stack.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, z: Var, classes: &[usize], opts: GenOptions) -> Result<GenTape, NnError> {
        let style = self.mapping.forward(g, p, z, classes)?;
        let styles = vec![style; self.cfg.depth];
        let mut tape = self.forward_styles(g, p, &styles, classes.len(), opts)?;
        tape.style = Some(style);
        Ok(tape)
    }

    /// Block stack driven by one `[batch, width]` style per block.
    pub fn forward_styles<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, styles: &[Var], batch: usize, opts: GenOptions) -> Result<GenTape, NnError> {
        let cfg = &self.cfg;
        if styles.len() != cfg.depth {
            return Err(NnError::Config(format!("expected {} block styles, got {}", cfg.depth, styles.len())));
        }
        let (n, c) = (cfg.num_patches(), cfg.width);
        let rope = Arc::new(nn::rope_table::<T>(cfg.grid(), cfg.grid(), 0, cfg.head_dim(), true)?);
        let ctx = BlockCtx {
            batch,
            tokens: n,
            width: c,
            heads: cfg.heads,
            rope: Some(rope),
        };
        let base = p.get(g, self.const_tokens);
        let idx: Vec<i32> = (0..batch).flat_map(|_| 0..(n * c) as i32).collect();
        let mut x = g.gather(base, idx.into(), &[batch, n, c]);

        // Normalized styles are shared between blocks that use the same style.
        let mut normed: Vec<(Var, Var)> = Vec::new();
        let heads_at = self.head_positions();
        let unpatch = self.unpatchify_for(batch);
        let mut levels = Vec::with_capacity(cfg.stages);
        let mut features = Vec::new();
        for (bi, block) in self.blocks.iter().enumerate() {
            if opts.ablate != Some(bi) {
                let s = styles[bi];
                let sn = match normed.iter().find(|(raw, _)| *raw == s) {
                    Some(&(_, sn)) => sn,
                    None => {
                        if g.value(s).len() != batch * c {
                            return Err(NnError::Config(format!("style for block {bi} has length {}, expected {}", g.value(s).len(), batch * c)));
                        }
                        let sn = g.rms_norm(s, c, RMS_EPS);
                        normed.push((s, sn));
                        sn
                    }
                };
                let gates: GateVars = block.gates.forward(g, p, sn);
                x = gat_block(g, p, block, x, &gates, &ctx)?;
            }
            if opts.capture {
                features.push(x);
            }
            if let Some(k) = heads_at.iter().position(|&h| h == bi + 1) {
                let h = g.rms_norm(x, c, RMS_EPS);
                let r = self.heads[k].forward(g, p, h);
                let img = g.gather(r, unpatch.clone(), &[batch, cfg.image_channels, cfg.image_hw, cfg.image_hw]);
                let level = match levels.last() {
                    Some(&prev) => g.add(prev, img),
                    None => img,
                };
                levels.push(level);
            }
        }
        if let Some(f) = g.fault() {
            return Err(NnError::Fault(f.to_string()));
        }
        Ok(GenTape { levels, style: None, features })
    }

    /// Mapping-network styles for a batch, off the tape.
    pub fn styles<T: Scalar>(&self, params: &ParamStore<T>, z: &[T], classes: &[usize]) -> Result<Vec<T>, NnError> {
        let mut g = Graph::new();
        let zv = g.constant(z.to_vec(), &[classes.len(), self.cfg.latent_dim]);
        let w = self.mapping.forward(&mut g, Bound::new(params, false), zv, classes)?;
        Ok(g.value(w).to_vec())
    }

    /// Off-tape synthesis from explicit per-block styles (`[batch·width]`
    /// each).
    pub fn synthesize<T: Scalar>(&self, params: &ParamStore<T>, block_styles: Vec<Vec<T>>, batch: usize, opts: GenOptions) -> Result<GeneratorOutput<T>, NnError> {
        let mut g = Graph::new();
        let mut vars: Vec<Var> = Vec::with_capacity(block_styles.len());
        for s in &block_styles {
            let prev = block_styles.iter().position(|o| o == s).filter(|&i| i < vars.len());
            let v = match prev {
                Some(i) => vars[i],
                None => g.constant(s.clone(), &[batch, self.cfg.width]),
            };
            vars.push(v);
        }
        let tape = self.forward_styles(&mut g, Bound::new(params, false), &vars, batch, opts)?;
        Ok(GeneratorOutput {
            batch,
            images: tape.levels.iter().map(|&v| g.value(v).to_vec()).collect(),
            styles_used: block_styles,
        })
    }
}

/// Guidance ordering when both truncation and guidance are requested.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StyleOrder {
    #[default]
    TruncateThenGuide,
    GuideThenTruncate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Guidance {
    pub strength: f64,
    pub block_fraction: f64,
}

impl Default for Guidance {
    fn default() -> Self {
        Self {
            strength: 1.1,
            block_fraction: 0.3,
        }
    }
}

/// Style-space sampling controls.
#[derive(Debug, Clone, Copy, Default)]
pub struct SampleSettings<'a> {
    pub psi: Option<f64>,
    pub guidance: Option<Guidance>,
    pub order: StyleOrder,
    pub stats: Option<&'a StyleStats>,
}

/// Deterministic synthesis from latents and classes.
pub fn generate<T: Scalar>(layout: &GeneratorLayout, params: &ParamStore<T>, z: &[T], classes: &[usize], settings: &SampleSettings<'_>) -> Result<GeneratorOutput<T>, GenerateError> {
    let c = layout.cfg.width;
    let depth = layout.cfg.depth;
    let batch = classes.len();
    let w = layout.styles(params, z, classes)?;
    let needs_stats = settings.psi.is_some() || settings.guidance.is_some();
    let stats = match (needs_stats, settings.stats) {
        (true, None) => return Err(StyleError::EmptyStats.into()),
        (_, s) => s,
    };
    // Per-block, per-sample styles.
    let mut per_block: Vec<Vec<T>> = vec![Vec::with_capacity(batch * c); depth];
    for (b, &cls) in classes.iter().enumerate() {
        let wb = &w[b * c..(b + 1) * c];
        let truncate = |v: &[T]| -> Result<Vec<T>, StyleError> {
            match (settings.psi, stats) {
                (Some(psi), Some(st)) => truncate_style(v, st, Some(cls), psi),
                _ => Ok(v.to_vec()),
            }
        };
        let guide = |v: &[T]| -> Result<Vec<Vec<T>>, StyleError> {
            match (settings.guidance, stats) {
                (Some(gd), Some(st)) => latent_guidance(v, st, cls, gd.strength, gd.block_fraction, depth),
                _ => Ok(vec![v.to_vec(); depth]),
            }
        };
        let blocks = match settings.order {
            StyleOrder::TruncateThenGuide => guide(&truncate(wb)?)?,
            StyleOrder::GuideThenTruncate => guide(wb)?.iter().map(|v| truncate(v)).collect::<Result<_, _>>()?,
        };
        for (dst, src) in per_block.iter_mut().zip(blocks) {
            dst.extend(src);
        }
    }
    Ok(layout.synthesize(params, per_block, batch, GenOptions::default())?)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GenerateError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Style(#[from] StyleError),
}

/// Monte-Carlo style means, per class and overall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub class_means: BTreeMap<usize, Vec<f64>>,
    pub global_mean: Vec<f64>,
    pub sample_count: usize,
}

impl StyleStats {
    fn mean_for(&self, class: Option<usize>) -> Result<&[f64], StyleError> {
        if self.sample_count == 0 || self.global_mean.is_empty() {
            return Err(StyleError::EmptyStats);
        }
        Ok(class
            .and_then(|c| self.class_means.get(&c))
            .map(|m| m.as_slice())
            .unwrap_or(&self.global_mean))
    }
}

fn check_scalar(name: &'static str, value: f64) -> Result<(), StyleError> {
    if value.is_finite() && value >= 0.0 {
        Ok(())
    } else {
        Err(StyleError::BadScalar { name, value })
    }
}

/// `mean + psi·(w − mean)` using the class mean when present. `psi = 1`
/// returns `w` untouched.
pub fn truncate_style<T: Scalar>(w: &[T], stats: &StyleStats, class: Option<usize>, psi: f64) -> Result<Vec<T>, StyleError> {
    check_scalar("psi", psi)?;
    let mean = stats.mean_for(class)?;
    if mean.len() != w.len() {
        return Err(StyleError::Width { got: w.len(), expected: mean.len() });
    }
    if psi == 1.0 {
        return Ok(w.to_vec());
    }
    Ok(w.iter().zip(mean).map(|(&v, &m)| T::lit(m + psi * (v.as_f64() - m))).collect())
}

/// Number of leading blocks guided for a fraction of `depth`.
pub fn guided_block_count(block_fraction: f64, depth: usize) -> usize {
    let raw = block_fraction * depth as f64;
    // Guard against 0.3·10 = 3.0000000000000004 rounding up to 4.
    ((raw - 1e-9).ceil().max(0.0) as usize).min(depth)
}

/// Per-block styles: the first `⌈fraction·depth⌉` blocks get
/// `mean_c + strength·(w − mean_c)`, the rest get `w`.
pub fn latent_guidance<T: Scalar>(w: &[T], stats: &StyleStats, class: usize, strength: f64, block_fraction: f64, depth: usize) -> Result<Vec<Vec<T>>, StyleError> {
    check_scalar("strength", strength)?;
    if !(0.0..=1.0).contains(&block_fraction) {
        return Err(StyleError::BadScalar { name: "block_fraction", value: block_fraction });
    }
    if stats.sample_count == 0 {
        return Err(StyleError::EmptyStats);
    }
    let mean = stats.class_means.get(&class).ok_or(StyleError::MissingClass(class))?;
    if mean.len() != w.len() {
        return Err(StyleError::Width { got: w.len(), expected: mean.len() });
    }
    let guided: Vec<T> = if strength == 1.0 {
        w.to_vec()
    } else {
        w.iter().zip(mean).map(|(&v, &m)| T::lit(m + strength * (v.as_f64() - m))).collect()
    };
    let count = guided_block_count(block_fraction, depth);
    Ok((0..depth).map(|b| if b < count { guided.clone() } else { w.to_vec() }).collect())
}

/// Draws standard-normal latents.
pub fn sample_latents<T: Scalar, R: Rng + ?Sized>(rng: &mut R, count: usize, dim: usize) -> Vec<T> {
    (0..count * dim)
        .map(|_| {
            let v: f64 = StandardNormal.sample(rng);
            T::lit(v)
        })
        .collect()
}

/// Class means of the mapping output over `z ~ N(0, I)`.
pub fn collect_style_stats<T: Scalar>(layout: &GeneratorLayout, params: &ParamStore<T>, num_samples: usize, seed: u64) -> Result<StyleStats, NnError> {
    if num_samples == 0 {
        return Err(NnError::Config("num_samples must be at least 1".into()));
    }
    let c = layout.cfg.width;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut class_means = BTreeMap::new();
    let mut global = vec![0.0; c];
    const CHUNK: usize = 512;
    for class in 0..layout.cfg.num_classes {
        let mut acc = vec![0.0; c];
        let mut done = 0;
        while done < num_samples {
            let n = CHUNK.min(num_samples - done);
            let z: Vec<T> = sample_latents(&mut rng, n, layout.cfg.latent_dim);
            let w = layout.styles(params, &z, &vec![class; n])?;
            for row in w.chunks(c) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.as_f64();
                }
            }
            done += n;
        }
        for (gsum, a) in global.iter_mut().zip(&acc) {
            *gsum += a;
        }
        class_means.insert(class, acc.iter().map(|a| a / num_samples as f64).collect());
    }
    let total = num_samples * layout.cfg.num_classes;
    Ok(StyleStats {
        class_means,
        global_mean: global.iter().map(|s| s / total as f64).collect(),
        sample_count: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            width: 16,
            depth: 4,
            heads: 2,
            patch: 2,
            latent_dim: 8,
            stages: 2,
            num_classes: 3,
            image_channels: 2,
            image_hw: 4,
        }
    }

    fn stats_with(mean: Vec<f64>) -> StyleStats {
        StyleStats {
            class_means: [(0, mean.clone())].into_iter().collect(),
            global_mean: mean,
            sample_count: 1,
        }
    }

    #[test]
    fn heads_at_uniform_intervals() {
        let cfg = ModelConfig { depth: 28, ..ModelConfig::toy() };
        let (layout, _) = GeneratorLayout::new::<f32, _>(&cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(layout.head_positions(), vec![7, 14, 21, 28]);
        let bad = ModelConfig { depth: 6, ..ModelConfig::toy() };
        assert!(GeneratorLayout::new::<f32, _>(&bad, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    #[test]
    fn truncation_examples() {
        let mean = vec![1.0, -2.0, 0.5];
        let st = stats_with(mean.clone());
        let u = [0.4, 1.0, -3.0];
        let w: Vec<f64> = mean.iter().zip(&u).map(|(m, d)| m + d).collect();
        assert_eq!(truncate_style(&w, &st, Some(0), 1.0).unwrap(), w);
        assert_eq!(truncate_style(&w, &st, Some(0), 0.0).unwrap(), mean);
        let t = truncate_style(&w, &st, Some(0), 0.85).unwrap();
        for ((tv, m), d) in t.iter().zip(&mean).zip(&u) {
            assert!((tv - (m + 0.85 * d)).abs() < 1e-12);
        }
        let empty = StyleStats { class_means: BTreeMap::new(), global_mean: vec![], sample_count: 0 };
        assert_eq!(truncate_style(&w, &empty, None, 0.5), Err(StyleError::EmptyStats));
    }

    #[test]
    fn guidance_examples() {
        assert_eq!(guided_block_count(0.3, 28), 9);
        assert_eq!(guided_block_count(0.3, 10), 3);
        assert_eq!(guided_block_count(0.0, 28), 0);
        let st = stats_with(vec![0.0, 1.0]);
        let w = [2.0f64, 3.0];
        let blocks = latent_guidance(&w, &st, 0, 1.0, 0.3, 28).unwrap();
        assert!(blocks.iter().all(|b| b == &w));
        let blocks = latent_guidance(&w, &st, 0, 1.1, 0.3, 28).unwrap();
        assert_eq!(blocks.iter().filter(|b| b.as_slice() != w).count(), 9);
        assert!((blocks[0][0] - 2.2).abs() < 1e-12 && (blocks[0][1] - 3.2).abs() < 1e-12);
        assert!(latent_guidance(&w, &st, 0, 1.1, 0.0, 28).unwrap().iter().all(|b| b == &w));
        assert_eq!(latent_guidance(&w, &st, 2, 1.1, 0.3, 28), Err(StyleError::MissingClass(2)));
    }

    #[test]
    fn zero_heads_give_zero_levels() {
        let (layout, mut store) = GeneratorLayout::new::<f64, _>(&tiny(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for h in &layout.heads {
            store.get_mut(h.w).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let z = sample_latents(&mut ChaCha8Rng::seed_from_u64(2), 2, 8);
        let out = generate(&layout, &store, &z, &[0, 1], &SampleSettings::default()).unwrap();
        assert_eq!(out.images.len(), 2);
        assert!(out.images.iter().all(|l| l.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn unpatchify_is_a_permutation() {
        let cfg = tiny();
        let mut idx = unpatchify_index(&cfg, 3);
        idx.sort_unstable();
        assert_eq!(idx, (0..(3 * cfg.image_len()) as i32).collect::<Vec<_>>());
    }

    #[test]
    fn single_sample_stats_equal_that_style() {
        let (layout, store) = GeneratorLayout::new::<f64, _>(&tiny(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let st = collect_style_stats(&layout, &store, 1, 77).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let z: Vec<f64> = sample_latents(&mut rng, 1, 8);
        let w = layout.styles(&store, &z, &[0]).unwrap();
        assert_eq!(st.class_means[&0], w);
        assert_eq!(st, collect_style_stats(&layout, &store, 1, 77).unwrap());
    }
}
