//! ViT discriminator over the K-level image stack with a `[cls]` token and
//! projection conditioning, plus the token projector used for alignment.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::mng::ImageStack;
use crate::nn::{self, BlockCtx, Bound, Dense, DisBlockLayout, Init, ModelConfig, NnError, INIT_STD, LAYERSCALE_INIT, RMS_EPS};
use crate::params::{self, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiscError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("expected {expected} stack levels, got {got}")]
    Levels { expected: usize, got: usize },
    #[error("stack geometry {got} does not match configuration {expected}")]
    Shape { expected: String, got: String },
    #[error("non-finite discriminator input")]
    NonFinite,
}

/// How the K levels enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Ingest {
    /// Channel concatenation before a single patchify layer.
    #[default]
    Concat,
    /// One forward per level, logits summed.
    SeparateSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscSettings {
    pub ingest: Ingest,
    /// Rotary embeddings on grid tokens; off only for diagnostics.
    pub rope: bool,
}

impl Default for DiscSettings {
    fn default() -> Self {
        Self { ingest: Ingest::Concat, rope: true }
    }
}

#[derive(Debug, Clone)]
pub struct DiscriminatorLayout {
    pub cfg: ModelConfig,
    pub settings: DiscSettings,
    pub patch: Dense,
    pub cls: ParamId,
    pub blocks: Vec<DisBlockLayout>,
    pub final_norm: ParamId,
    pub head: Dense,
    pub class_embed: ParamId,
}

/// Tape handles of one discriminator forward.
#[derive(Debug, Clone, Copy)]
pub struct DiscTape {
    /// `[batch]`
    pub logit: Var,
    /// Final normalized tokens `[batch, patches + 1, width]`, `[cls]` last.
    pub tokens: Var,
}

/// Logit and last-layer tokens of one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorOutput<T> {
    pub logit: T,
    pub cls_token: Vec<T>,
    pub patch_tokens: Vec<Vec<T>>,
}

/// Index map from concatenated levels `[K, batch, ch, hw, hw]` to patch
/// rows `[batch, patches, K·ch·p·p]`.
pub fn patchify_index(cfg: &ModelConfig, levels: usize, batch: usize) -> Vec<i32> {
    let (p, ch, hw, grid) = (cfg.patch, cfg.image_channels, cfg.image_hw, cfg.grid());
    let img = cfg.image_len();
    let mut idx = Vec::with_capacity(levels * batch * img);
    for b in 0..batch {
        for gy in 0..grid {
            for gx in 0..grid {
                for k in 0..levels {
                    for c in 0..ch {
                        for dy in 0..p {
                            for dx in 0..p {
                                let (y, x) = (gy * p + dy, gx * p + dx);
                                idx.push((k * batch * img + b * img + c * hw * hw + y * hw + x) as i32);
                            }
                        }
                    }
                }
            }
        }
    }
    idx
}

impl DiscriminatorLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(cfg: &ModelConfig, settings: DiscSettings, rng: &mut R) -> Result<(Self, ParamStore<T>), NnError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let c = cfg.width;
        let init = Init::TruncNormal(INIT_STD);
        let m = ParamGroup::Main;
        let fan_in = match settings.ingest {
            Ingest::Concat => cfg.stages * cfg.patch_dim(),
            Ingest::SeparateSum => cfg.patch_dim(),
        };
        let patch = Dense::new(&mut store, rng, "disc.patch", fan_in, c, true, init, m);
        let cls = store.add("disc.cls", &[c], params::trunc_normal(rng, c, INIT_STD), m);
        let blocks = (0..cfg.depth)
            .map(|i| DisBlockLayout::new(&mut store, rng, &format!("disc.block{i}"), c, cfg.heads, cfg.ffn_hidden(), init, LAYERSCALE_INIT))
            .collect();
        let final_norm = store.add("disc.final_norm", &[c], params::constant(c, 1.0), m);
        let head = Dense::new(&mut store, rng, "disc.head", c, 1, true, init, m);
        let class_embed = store.add("disc.class_embed", &[cfg.num_classes, c], params::trunc_normal(rng, cfg.num_classes * c, INIT_STD), m);
        Ok((
            Self {
                cfg: cfg.clone(),
                settings,
                patch,
                cls,
                blocks,
                final_norm,
                head,
                class_embed,
            },
            store,
        ))
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.cfg.num_patches() + 1
    }

    /// Forward over `levels` (each `[batch, ch, hw, hw]`).
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, levels: &[Var], classes: &[usize]) -> Result<DiscTape, DiscError> {
        let k = self.cfg.stages;
        if levels.len() != k {
            return Err(DiscError::Levels { expected: k, got: levels.len() });
        }
        if let Some(&c) = classes.iter().find(|&&c| c >= self.cfg.num_classes) {
            return Err(NnError::ClassOutOfRange { class: c, num_classes: self.cfg.num_classes }.into());
        }
        let batch = classes.len();
        for &l in levels {
            if g.value(l).len() != batch * self.cfg.image_len() {
                return Err(DiscError::Shape {
                    expected: format!("{}x{}", batch, self.cfg.image_len()),
                    got: format!("{}", g.value(l).len()),
                });
            }
        }
        let tape = match self.settings.ingest {
            Ingest::Concat => self.forward_once(g, p, levels, classes)?,
            Ingest::SeparateSum => {
                let mut tapes = Vec::with_capacity(k);
                for &l in levels {
                    tapes.push(self.forward_once(g, p, &[l], classes)?);
                }
                let mut logit = tapes[0].logit;
                for t in &tapes[1..] {
                    logit = g.add(logit, t.logit);
                }
                DiscTape { logit, tokens: tapes[k - 1].tokens }
            }
        };
        if let Some(f) = g.fault() {
            return Err(NnError::Fault(f.to_string()).into());
        }
        Ok(tape)
    }

    fn forward_once<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, levels: &[Var], classes: &[usize]) -> Result<DiscTape, DiscError> {
        let cfg = &self.cfg;
        let batch = classes.len();
        let (n, c) = (cfg.num_patches(), cfg.width);
        let t = n + 1;
        let flat = if levels.len() == 1 { levels[0] } else { g.concat(levels) };
        let idx = patchify_index(cfg, levels.len(), batch);
        let patches = g.gather(flat, idx.into(), &[batch, n, levels.len() * cfg.patch_dim()]);
        let tokens = self.patch.forward(g, p, patches);
        let cls = p.get(g, self.cls);
        let joined = g.concat(&[tokens, cls]);
        let idx: Vec<i32> = (0..batch)
            .flat_map(|b| (0..t * c).map(move |j| if j < n * c { (b * n * c + j) as i32 } else { (batch * n * c + j - n * c) as i32 }))
            .collect();
        let mut x = g.gather(joined, idx.into(), &[batch, t, c]);
        let rope = Arc::new(nn::rope_table::<T>(cfg.grid(), cfg.grid(), 1, cfg.head_dim(), self.settings.rope)?);
        let ctx = BlockCtx {
            batch,
            tokens: t,
            width: c,
            heads: cfg.heads,
            rope: Some(rope),
        };
        for block in &self.blocks {
            x = block.forward(g, p, x, &ctx);
        }
        let x = g.rms_norm(x, c, RMS_EPS);
        let s = p.get(g, self.final_norm);
        let tokens = g.mul_bcast(x, s, batch * t, c);
        let idx: Vec<i32> = (0..batch).flat_map(|b| (0..c).map(move |j| ((b * t + n) * c + j) as i32)).collect();
        let cls_out = g.gather(tokens, idx.into(), &[batch, c]);
        let logit = self.projection_logit_tape(g, p, cls_out, classes);
        Ok(DiscTape { logit, tokens })
    }

    /// `linear(cls) + ⟨embed(c), cls⟩` for `cls: [batch, width]`.
    pub fn projection_logit_tape<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, cls: Var, classes: &[usize]) -> Var {
        let c = self.cfg.width;
        let batch = classes.len();
        let uncond = self.head.forward(g, p, cls);
        let uncond = g.reshape(uncond, &[batch]);
        let table = p.get(g, self.class_embed);
        let idx: Vec<i32> = classes.iter().flat_map(|&k| (0..c).map(move |j| (k * c + j) as i32)).collect();
        let e = g.gather(table, idx.into(), &[batch, c]);
        let prod = g.mul(e, cls);
        let cond = g.row_sum(prod, c);
        g.add(uncond, cond)
    }

    /// Off-tape logit of a single `[cls]` vector.
    pub fn projection_logit<T: Scalar>(&self, params: &ParamStore<T>, cls: &[T], class: usize) -> Result<T, NnError> {
        if class >= self.cfg.num_classes {
            return Err(NnError::ClassOutOfRange { class, num_classes: self.cfg.num_classes });
        }
        if cls.len() != self.cfg.width {
            return Err(NnError::Config(format!("cls length {} does not match width {}", cls.len(), self.cfg.width)));
        }
        let mut g = Graph::new();
        let v = g.constant(cls.to_vec(), &[1, self.cfg.width]);
        let l = self.projection_logit_tape(&mut g, Bound::new(params, false), v, &[class]);
        Ok(g.value(l)[0])
    }
}

/// Validated off-tape discriminator call.
pub fn discriminate<T: Scalar>(layout: &DiscriminatorLayout, params: &ParamStore<T>, stack: &ImageStack<T>, classes: &[usize]) -> Result<Vec<DiscriminatorOutput<T>>, DiscError> {
    let cfg = &layout.cfg;
    if stack.stages() != cfg.stages {
        return Err(DiscError::Levels { expected: cfg.stages, got: stack.stages() });
    }
    if stack.channels != cfg.image_channels || stack.hw != cfg.image_hw || stack.batch != classes.len() {
        return Err(DiscError::Shape {
            expected: format!("{}x{}x{}x{}", classes.len(), cfg.image_channels, cfg.image_hw, cfg.image_hw),
            got: format!("{}x{}x{}x{}", stack.batch, stack.channels, stack.hw, stack.hw),
        });
    }
    if stack.levels.iter().any(|l| l.iter().any(|v| !v.is_finite())) {
        return Err(DiscError::NonFinite);
    }
    let mut g = Graph::new();
    let shape = [stack.batch, stack.channels, stack.hw, stack.hw];
    let levels: Vec<Var> = stack.levels.iter().map(|l| g.constant(l.clone(), &shape)).collect();
    let tape = layout.forward(&mut g, Bound::new(params, false), &levels, classes)?;
    let (t, c, n) = (layout.tokens_per_sample(), cfg.width, cfg.num_patches());
    let tokens = g.value(tape.tokens);
    Ok(g.value(tape.logit)
        .iter()
        .enumerate()
        .map(|(b, &logit)| {
            let s = &tokens[b * t * c..(b + 1) * t * c];
            DiscriminatorOutput {
                logit,
                cls_token: s[n * c..].to_vec(),
                patch_tokens: s[..n * c].chunks(c).map(|r| r.to_vec()).collect(),
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Silu,
    Identity,
}

/// Three-layer token MLP mapping discriminator tokens to teacher width.
#[derive(Debug, Clone)]
pub struct ProjectorLayout {
    pub layers: [Dense; 3],
    pub activation: Activation,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl ProjectorLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(in_dim: usize, hidden: usize, out_dim: usize, activation: Activation, rng: &mut R) -> (Self, ParamStore<T>) {
        let mut store = ParamStore::new();
        let init = Init::TruncNormal(INIT_STD);
        let m = ParamGroup::Main;
        let layers = [
            Dense::new(&mut store, rng, "proj.l1", in_dim, hidden, true, init, m),
            Dense::new(&mut store, rng, "proj.l2", hidden, hidden, true, init, m),
            Dense::new(&mut store, rng, "proj.l3", hidden, out_dim, true, init, m),
        ];
        (Self { layers, activation, in_dim, out_dim }, store)
    }

    /// Square identity-weight projector with linear activations.
    pub fn identity<T: Scalar>(dim: usize) -> (Self, ParamStore<T>) {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let (layout, mut store) = Self::new::<T, _>(dim, dim, dim, Activation::Identity, &mut rng);
        for l in &layout.layers {
            let w = &mut store.get_mut(l.w).data;
            w.iter_mut().for_each(|v| *v = T::zero());
            for i in 0..dim {
                w[i * dim + i] = T::one();
            }
        }
        (layout, store)
    }

    /// `tokens: [rows, in_dim]` → `[rows, out_dim]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, tokens: Var) -> Result<Var, NnError> {
        if g.value(tokens).len() % self.in_dim != 0 {
            return Err(NnError::Config(format!("token width does not match projector input {}", self.in_dim)));
        }
        let mut h = tokens;
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, p, h);
            if i < 2 && self.activation == Activation::Silu {
                h = g.silu(h);
            }
        }
        Ok(h)
    }

    /// Checks the projector output against a teacher token width.
    pub fn check_teacher(&self, teacher_dim: usize) -> Result<(), NnError> {
        if teacher_dim != self.out_dim {
            return Err(NnError::Config(format!("projector emits {} dims but the teacher has {teacher_dim}", self.out_dim)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn patchify_geometry() {
        let cfg = ModelConfig::toy();
        assert_eq!(cfg.num_patches(), 16);
        assert_eq!(cfg.stages * cfg.patch_dim(), 64);
        let mut idx = patchify_index(&cfg, 4, 2);
        idx.sort_unstable();
        assert_eq!(idx, (0..(8 * cfg.image_len()) as i32).collect::<Vec<_>>());
    }

    #[test]
    fn projection_logit_identities() {
        let cfg = ModelConfig { num_classes: 3, ..ModelConfig::toy() };
        let (layout, mut store) = DiscriminatorLayout::new::<f64, _>(&cfg, DiscSettings::default(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let zero = vec![0.0; cfg.width];
        for c in 0..3 {
            assert_eq!(layout.projection_logit(&store, &zero, c).unwrap(), 0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let cls: Vec<f64> = (0..cfg.width).map(|_| rng.random_range(-1.0..1.0)).collect();
        let l0 = layout.projection_logit(&store, &cls, 0).unwrap();
        let l2 = layout.projection_logit(&store, &cls, 2).unwrap();
        let e = &store.get(layout.class_embed).data;
        let c = cfg.width;
        let diff: f64 = (0..c).map(|j| (e[j] - e[2 * c + j]) * cls[j]).sum();
        assert!((l0 - l2 - diff).abs() < 1e-12);
        store.get_mut(layout.class_embed).data.iter_mut().for_each(|v| *v = 0.0);
        let a = layout.projection_logit(&store, &cls, 0).unwrap();
        let b = layout.projection_logit(&store, &cls, 1).unwrap();
        assert_eq!(a, b);
        assert!(layout.projection_logit(&store, &cls, 3).is_err());
    }

    #[test]
    fn identity_projector_passes_tokens() {
        let (layout, store) = ProjectorLayout::identity::<f64>(5);
        let mut g = Graph::new();
        let x: Vec<f64> = (0..15).map(|i| i as f64 * 0.3 - 2.0).collect();
        let v = g.constant(x.clone(), &[3, 5]);
        let out = layout.forward(&mut g, Bound::new(&store, false), v).unwrap();
        assert_eq!(g.value(out), x.as_slice());
        assert!(layout.check_teacher(6).is_err());
    }
}
