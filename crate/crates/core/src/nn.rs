//! Transformer building blocks shared by the generator, the discriminator
//! and the frozen teacher encoder.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Graph, RopeTable, Var};
use crate::params::{self, ParamGroup, ParamId, ParamStore};
use crate::scalar::Scalar;

pub const RMS_EPS: f64 = 1e-6;
/// Standard deviation of the truncated-normal default initializer.
pub const INIT_STD: f64 = 0.02;
/// Empirical variance of style-derived gates at initialization.
pub const GATE_INIT_VARIANCE: f64 = 0.1;
pub const LAYERSCALE_INIT: f64 = 0.1;
/// Learning-rate multiplier of the mapping network parameter group.
pub const MAPPING_LR_MULT: f64 = 0.01;
const ROPE_THETA: f64 = 10_000.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("non-finite input at index {0}")]
    NonFinite(usize),
    #[error("class id {class} out of range for {num_classes} classes")]
    ClassOutOfRange { class: usize, num_classes: usize },
    #[error("numerical fault: {0}")]
    Fault(String),
}

/// Geometry shared by both networks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch: usize,
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_stages")]
    pub stages: usize,
    pub num_classes: usize,
    pub image_channels: usize,
    pub image_hw: usize,
}

fn default_latent_dim() -> usize {
    64
}

fn default_stages() -> usize {
    4
}

impl ModelConfig {
    /// Width 64, depth 8, four heads over 4×8×8 latents and ten classes.
    pub fn toy() -> Self {
        Self {
            width: 64,
            depth: 8,
            heads: 4,
            patch: 2,
            latent_dim: 64,
            stages: 4,
            num_classes: 10,
            image_channels: 4,
            image_hw: 8,
        }
    }

    /// Named presets: `toy`, and the four ImageNet-256 sizes (`s`, `b`, `l`,
    /// `xl`) over 4×32×32 latents with 1000 classes and patch 2.
    pub fn preset(name: &str) -> Option<Self> {
        let big = |depth, width, heads| Self {
            width,
            depth,
            heads,
            patch: 2,
            latent_dim: 64,
            stages: 4,
            num_classes: 1000,
            image_channels: 4,
            image_hw: 32,
        };
        match name.to_ascii_lowercase().as_str() {
            "toy" => Some(Self::toy()),
            "s" | "gat-s" => Some(big(12, 384, 6)),
            "b" | "gat-b" => Some(big(12, 768, 12)),
            "l" | "gat-l" => Some(big(24, 1024, 16)),
            "xl" | "gat-xl" => Some(big(28, 1152, 16)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let fail = |m: String| Err(NnError::Config(m));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return fail(format!("width {} not divisible by heads {}", self.width, self.heads));
        }
        if self.head_dim() % 2 != 0 {
            return fail(format!("head dimension {} must be even for rotary embeddings", self.head_dim()));
        }
        if self.patch == 0 || self.image_hw == 0 || self.image_hw % self.patch != 0 {
            return fail(format!("image size {} not divisible by patch {}", self.image_hw, self.patch));
        }
        if self.stages == 0 {
            return fail("stages must be at least 1".into());
        }
        if self.depth == 0 || self.depth % self.stages != 0 {
            return fail(format!("depth {} not divisible by stages {}", self.depth, self.stages));
        }
        if self.latent_dim == 0 {
            return fail("latent_dim must be at least 1".into());
        }
        if self.num_classes == 0 || self.image_channels == 0 {
            return fail("num_classes and image_channels must be at least 1".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn grid(&self) -> usize {
        self.image_hw / self.patch
    }

    /// Patch tokens per image.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.image_channels * self.patch * self.patch
    }

    pub fn image_len(&self) -> usize {
        self.image_channels * self.image_hw * self.image_hw
    }

    pub fn blocks_per_stage(&self) -> usize {
        self.depth / self.stages
    }

    pub fn ffn_hidden(&self) -> usize {
        ffn_hidden(self.width)
    }
}

/// SwiGLU hidden width: 8/3 of the model width rounded to a multiple of 8.
pub fn ffn_hidden(width: usize) -> usize {
    let raw = 8.0 * width as f64 / 3.0;
    ((raw / 8.0).round() as usize).max(1) * 8
}

/// Token sequence with an optional trailing `[cls]` token that carries no
/// grid position.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid<T> {
    pub tokens: Vec<T>,
    pub width: usize,
    pub rows: usize,
    pub cols: usize,
    pub has_cls: bool,
}

impl<T: Scalar> TokenGrid<T> {
    pub fn new(tokens: Vec<T>, width: usize, rows: usize, cols: usize, has_cls: bool) -> Self {
        let n = rows * cols + usize::from(has_cls);
        assert_eq!(tokens.len(), n * width, "token grid size mismatch");
        Self {
            tokens,
            width,
            rows,
            cols,
            has_cls,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len() / self.width
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, i: usize) -> &[T] {
        &self.tokens[i * self.width..(i + 1) * self.width]
    }
}

/// `x / sqrt(mean(x²) + eps)`.
pub fn rms_normalize<T: Scalar>(x: &[T], eps: f64) -> Result<Vec<T>, NnError> {
    if let Some(i) = x.iter().position(|v| !v.is_finite()) {
        return Err(NnError::NonFinite(i));
    }
    let ms = x.iter().map(|&v| v * v).sum::<T>() / T::lit(x.len() as f64);
    let s = T::one() / (ms + T::lit(eps)).sqrt();
    Ok(x.iter().map(|&v| v * s).collect())
}

/// 2-D axial rotary table for a `rows × cols` grid followed by `extra`
/// position-free tokens (zero angle). With `enabled = false` every angle is
/// zero, which turns the rotation into the identity.
pub fn rope_table<T: Scalar>(rows: usize, cols: usize, extra: usize, head_dim: usize, enabled: bool) -> Result<RopeTable<T>, NnError> {
    if head_dim % 2 != 0 {
        return Err(NnError::Config(format!("rotary embeddings need an even head dimension, got {head_dim}")));
    }
    let pairs = head_dim / 2;
    let row_pairs = pairs.div_ceil(2);
    let col_pairs = pairs - row_pairs;
    let freq = |i: usize, n: usize| ROPE_THETA.powf(-(i as f64) / n.max(1) as f64);
    let tokens = rows * cols + extra;
    let mut cos = Vec::with_capacity(tokens * pairs);
    let mut sin = Vec::with_capacity(tokens * pairs);
    for t in 0..tokens {
        for p in 0..pairs {
            let angle = if !enabled || t >= rows * cols {
                0.0
            } else if p < row_pairs {
                (t / cols) as f64 * freq(p, row_pairs)
            } else {
                (t % cols) as f64 * freq(p - row_pairs, col_pairs)
            };
            cos.push(T::lit(angle.cos()));
            sin.push(T::lit(angle.sin()));
        }
    }
    Ok(RopeTable { tokens, pairs, cos, sin })
}

/// Applies the axial rotation to query and key grids of one sample.
pub fn apply_rope<T: Scalar>(q: &TokenGrid<T>, k: &TokenGrid<T>, heads: usize) -> Result<(TokenGrid<T>, TokenGrid<T>), NnError> {
    if q.width != k.width || q.len() != k.len() || q.width % heads != 0 {
        return Err(NnError::Config("query/key grids disagree in geometry".into()));
    }
    let table = Arc::new(rope_table::<T>(q.rows, q.cols, usize::from(q.has_cls), q.width / heads, true)?);
    let mut g = Graph::new();
    let qv = g.constant(q.tokens.clone(), &[1, q.len(), q.width]);
    let kv = g.constant(k.tokens.clone(), &[1, k.len(), k.width]);
    let qr = g.rope(qv, table.clone(), heads);
    let kr = g.rope(kv, table, heads);
    let wrap = |src: &TokenGrid<T>, v: &[T]| TokenGrid { tokens: v.to_vec(), ..src.clone() };
    Ok((wrap(q, g.value(qr)), wrap(k, g.value(kr))))
}

/// Parameter binding for one forward pass.
#[derive(Clone, Copy)]
pub struct Bound<'a, T: Scalar> {
    pub store: &'a ParamStore<T>,
    pub trainable: bool,
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(store: &'a ParamStore<T>, trainable: bool) -> Self {
        Self { store, trainable }
    }

    pub fn get(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.store, id, self.trainable)
    }
}

/// How a dense layer's weight is drawn.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    TruncNormal(f64),
    Normal(f64),
    Zeros,
}

impl Init {
    fn draw<T: Scalar, R: Rng + ?Sized>(self, rng: &mut R, n: usize) -> Vec<T> {
        match self {
            Init::TruncNormal(std) => params::trunc_normal(rng, n, std),
            Init::Normal(std) => params::normal_vec(rng, n, std),
            Init::Zeros => vec![T::zero(); n],
        }
    }
}

/// `[in, out]` weight with an optional zero-initialized bias.
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Dense {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        init: Init,
        group: ParamGroup,
    ) -> Self {
        let w = store.add(format!("{name}.w"), &[fan_in, fan_out], init.draw(rng, fan_in * fan_out), group);
        let b = bias.then(|| store.add(format!("{name}.b"), &[fan_out], vec![T::zero(); fan_out], group));
        Self { w, b, fan_in, fan_out }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let w = p.get(g, self.w);
        let b = self.b.map(|b| p.get(g, b));
        g.linear(x, w, b)
    }
}

/// Batch geometry for a block forward.
#[derive(Debug, Clone)]
pub struct BlockCtx<T> {
    pub batch: usize,
    pub tokens: usize,
    pub width: usize,
    pub heads: usize,
    pub rope: Option<Arc<RopeTable<T>>>,
}

/// Multi-head self-attention with per-head RMS-normalized queries and keys.
#[derive(Debug, Clone)]
pub struct AttentionLayout {
    pub q: Dense,
    pub k: Dense,
    pub v: Dense,
    pub out: Dense,
    pub q_norm: ParamId,
    pub k_norm: ParamId,
}

impl AttentionLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize, heads: usize, init: Init) -> Self {
        let hd = width / heads;
        let m = ParamGroup::Main;
        Self {
            q: Dense::new(store, rng, &format!("{name}.q"), width, width, true, init, m),
            k: Dense::new(store, rng, &format!("{name}.k"), width, width, true, init, m),
            v: Dense::new(store, rng, &format!("{name}.v"), width, width, true, init, m),
            out: Dense::new(store, rng, &format!("{name}.out"), width, width, true, init, m),
            q_norm: store.add(format!("{name}.q_norm"), &[hd], params::constant(hd, 1.0), m),
            k_norm: store.add(format!("{name}.k_norm"), &[hd], params::constant(hd, 1.0), m),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var, ctx: &BlockCtx<T>) -> Var {
        let hd = ctx.width / ctx.heads;
        let rows = ctx.batch * ctx.tokens * ctx.heads;
        let qk = |dense: &Dense, norm: ParamId, g: &mut Graph<T>| {
            let h = dense.forward(g, p, x);
            let h = g.rms_norm(h, hd, RMS_EPS);
            let scale = p.get(g, norm);
            let h = g.mul_bcast(h, scale, rows, hd);
            match &ctx.rope {
                Some(table) => g.rope(h, table.clone(), ctx.heads),
                None => h,
            }
        };
        let q = qk(&self.q, self.q_norm, g);
        let k = qk(&self.k, self.k_norm, g);
        let v = self.v.forward(g, p, x);
        let o = g.attention(q, k, v, ctx.batch, ctx.tokens, ctx.heads);
        self.out.forward(g, p, o)
    }
}

/// `W₂(silu(W₁x) ⊙ W₃x)`.
#[derive(Debug, Clone)]
pub struct SwiGluLayout {
    pub w1: Dense,
    pub w3: Dense,
    pub w2: Dense,
}

impl SwiGluLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize, hidden: usize, init: Init) -> Self {
        let m = ParamGroup::Main;
        Self {
            w1: Dense::new(store, rng, &format!("{name}.w1"), width, hidden, true, init, m),
            w3: Dense::new(store, rng, &format!("{name}.w3"), width, hidden, true, init, m),
            w2: Dense::new(store, rng, &format!("{name}.w2"), hidden, width, true, init, m),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let a = self.w1.forward(g, p, x);
        let a = g.silu(a);
        let b = self.w3.forward(g, p, x);
        let h = g.mul(a, b);
        self.w2.forward(g, p, h)
    }
}

/// Mapping network: `w = L₂(silu(L₁[ẑ; ê]))` where `ẑ`, `ê` are the
/// RMS-normalized latent and class embedding.
#[derive(Debug, Clone)]
pub struct MappingLayout {
    pub embed: ParamId,
    pub l1: Dense,
    pub l2: Dense,
    pub latent_dim: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl MappingLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, cfg: &ModelConfig) -> Self {
        let grp = ParamGroup::Mapping;
        let c = cfg.width;
        let embed = store.add("mapping.embed", &[cfg.num_classes, c], params::trunc_normal(rng, cfg.num_classes * c, INIT_STD), grp);
        let l1 = Dense::new(store, rng, "mapping.l1", cfg.latent_dim + c, c, true, Init::TruncNormal(INIT_STD), grp);
        let l2 = Dense::new(store, rng, "mapping.l2", c, c, true, Init::TruncNormal(INIT_STD), grp);
        Self {
            embed,
            l1,
            l2,
            latent_dim: cfg.latent_dim,
            width: c,
            num_classes: cfg.num_classes,
        }
    }

    /// `z: [batch, latent_dim]` → `[batch, width]`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, z: Var, classes: &[usize]) -> Result<Var, NnError> {
        let batch = classes.len();
        if let Some(&c) = classes.iter().find(|&&c| c >= self.num_classes) {
            return Err(NnError::ClassOutOfRange { class: c, num_classes: self.num_classes });
        }
        assert_eq!(g.value(z).len(), batch * self.latent_dim, "latent batch mismatch");
        let c = self.width;
        let table = p.get(g, self.embed);
        let idx: Vec<i32> = classes
            .iter()
            .flat_map(|&cls| (0..c).map(move |j| (cls * c + j) as i32))
            .collect();
        let e = g.gather(table, idx.into(), &[batch, c]);
        let e = g.rms_norm(e, c, RMS_EPS);
        let zn = g.rms_norm(z, self.latent_dim, RMS_EPS);
        let cat = g.concat(&[zn, e]);
        let d = self.latent_dim;
        let idx: Vec<i32> = (0..batch)
            .flat_map(|b| {
                (0..d)
                    .map(move |j| (b * d + j) as i32)
                    .chain((0..c).map(move |j| (batch * d + b * c + j) as i32))
            })
            .collect();
        let x = g.gather(cat, idx.into(), &[batch, d + c]);
        let h = self.l1.forward(g, p, x);
        let h = g.silu(h);
        Ok(self.l2.forward(g, p, h))
    }
}

/// Style-derived de-normalization scales and Layerscale gates of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ModulationGates<T> {
    pub gamma_attn: Vec<T>,
    pub gamma_ffn: Vec<T>,
    pub alpha_attn: Vec<T>,
    pub alpha_ffn: Vec<T>,
}

impl<T: Scalar> ModulationGates<T> {
    pub fn zeros(width: usize) -> Self {
        let z = vec![T::zero(); width];
        Self {
            gamma_attn: z.clone(),
            gamma_ffn: z.clone(),
            alpha_attn: z.clone(),
            alpha_ffn: z,
        }
    }

    pub fn width(&self) -> usize {
        self.gamma_attn.len()
    }
}

/// Gate tensors on the tape, each `[batch, width]`.
#[derive(Debug, Clone, Copy)]
pub struct GateVars {
    pub gamma_attn: Var,
    pub gamma_ffn: Var,
    pub alpha_attn: Var,
    pub alpha_ffn: Var,
}

impl GateVars {
    /// Lifts explicit gate values (batch 1) onto the tape as constants.
    pub fn constant<T: Scalar>(g: &mut Graph<T>, gates: &ModulationGates<T>) -> Self {
        let w = gates.width();
        Self {
            gamma_attn: g.constant(gates.gamma_attn.clone(), &[1, w]),
            gamma_ffn: g.constant(gates.gamma_ffn.clone(), &[1, w]),
            alpha_attn: g.constant(gates.alpha_attn.clone(), &[1, w]),
            alpha_ffn: g.constant(gates.alpha_ffn.clone(), &[1, w]),
        }
    }
}

/// Four zero-bias linear heads from the normalized style to the gates.
#[derive(Debug, Clone)]
pub struct GateHeads {
    pub gamma_attn: Dense,
    pub gamma_ffn: Dense,
    pub alpha_attn: Dense,
    pub alpha_ffn: Dense,
}

impl GateHeads {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, width: usize) -> Self {
        // Unit-RMS style input: gate variance = width · std².
        let init = Init::Normal((GATE_INIT_VARIANCE / width as f64).sqrt());
        let m = ParamGroup::Main;
        Self {
            gamma_attn: Dense::new(store, rng, &format!("{name}.gamma_attn"), width, width, false, init, m),
            gamma_ffn: Dense::new(store, rng, &format!("{name}.gamma_ffn"), width, width, false, init, m),
            alpha_attn: Dense::new(store, rng, &format!("{name}.alpha_attn"), width, width, false, init, m),
            alpha_ffn: Dense::new(store, rng, &format!("{name}.alpha_ffn"), width, width, false, init, m),
        }
    }

    /// `style_norm: [batch, width]`, already RMS-normalized.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, style_norm: Var) -> GateVars {
        GateVars {
            gamma_attn: self.gamma_attn.forward(g, p, style_norm),
            gamma_ffn: self.gamma_ffn.forward(g, p, style_norm),
            alpha_attn: self.alpha_attn.forward(g, p, style_norm),
            alpha_ffn: self.alpha_ffn.forward(g, p, style_norm),
        }
    }

    /// Gates for a single style vector, off the tape.
    pub fn gates_for<T: Scalar>(&self, store: &ParamStore<T>, style: &[T]) -> Result<ModulationGates<T>, NnError> {
        let width = self.gamma_attn.fan_in;
        if style.len() != width {
            return Err(NnError::Config(format!("style length {} does not match width {width}", style.len())));
        }
        let normed = rms_normalize(style, RMS_EPS)?;
        let mut g = Graph::new();
        let s = g.constant(normed, &[1, width]);
        let v = self.forward(&mut g, Bound::new(store, false), s);
        Ok(ModulationGates {
            gamma_attn: g.value(v.gamma_attn).to_vec(),
            gamma_ffn: g.value(v.gamma_ffn).to_vec(),
            alpha_attn: g.value(v.alpha_attn).to_vec(),
            alpha_ffn: g.value(v.alpha_ffn).to_vec(),
        })
    }
}

/// Generator block: residual attention and SwiGLU branches, each
/// de-normalized by γ and gated by α from the style.
#[derive(Debug, Clone)]
pub struct GatBlockLayout {
    pub attn: AttentionLayout,
    pub ffn: SwiGluLayout,
    pub gates: GateHeads,
}

impl GatBlockLayout {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, name: &str, cfg: &ModelConfig) -> Self {
        let init = Init::TruncNormal(INIT_STD);
        Self {
            attn: AttentionLayout::new(store, rng, &format!("{name}.attn"), cfg.width, cfg.heads, init),
            ffn: SwiGluLayout::new(store, rng, &format!("{name}.ffn"), cfg.width, cfg.ffn_hidden(), init),
            gates: GateHeads::new(store, rng, &format!("{name}.gates"), cfg.width),
        }
    }
}

/// `x + α_a ⊙ Attn(γ_a ⊙ norm(x))`, then `x + α_f ⊙ FFN(γ_f ⊙ norm(x))`.
/// Gate vars are `[batch, width]` or `[1, width]` when the batch is 1.
pub fn gat_block<T: Scalar>(g: &mut Graph<T>, p: Bound<'_, T>, layout: &GatBlockLayout, x: Var, gates: &GateVars, ctx: &BlockCtx<T>) -> Result<Var, NnError> {
    for v in [gates.gamma_attn, gates.gamma_ffn, gates.alpha_attn, gates.alpha_ffn] {
        if g.value(v).len() != ctx.batch * ctx.width {
            return Err(NnError::Config(format!(
                "gate length {} does not match batch {} × width {}",
                g.value(v).len(),
                ctx.batch,
                ctx.width
            )));
        }
    }
    let (t, c) = (ctx.tokens, ctx.width);
    let h = g.rms_norm(x, c, RMS_EPS);
    let h = g.mul_bcast(h, gates.gamma_attn, t, c);
    let a = layout.attn.forward(g, p, h, ctx);
    let a = g.mul_bcast(a, gates.alpha_attn, t, c);
    let x = g.add(x, a);
    let h = g.rms_norm(x, c, RMS_EPS);
    let h = g.mul_bcast(h, gates.gamma_ffn, t, c);
    let f = layout.ffn.forward(g, p, h);
    let f = g.mul_bcast(f, gates.alpha_ffn, t, c);
    Ok(g.add(x, f))
}

/// Discriminator block: learned RMSNorm scales and Layerscale vectors.
#[derive(Debug, Clone)]
pub struct DisBlockLayout {
    pub attn: AttentionLayout,
    pub ffn: SwiGluLayout,
    pub norm_attn: ParamId,
    pub norm_ffn: ParamId,
    pub ls_attn: ParamId,
    pub ls_ffn: ParamId,
}

impl DisBlockLayout {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        width: usize,
        heads: usize,
        hidden: usize,
        init: Init,
        layerscale: f64,
    ) -> Self {
        let m = ParamGroup::Main;
        Self {
            attn: AttentionLayout::new(store, rng, &format!("{name}.attn"), width, heads, init),
            ffn: SwiGluLayout::new(store, rng, &format!("{name}.ffn"), width, hidden, init),
            norm_attn: store.add(format!("{name}.norm_attn"), &[width], params::constant(width, 1.0), m),
            norm_ffn: store.add(format!("{name}.norm_ffn"), &[width], params::constant(width, 1.0), m),
            ls_attn: store.add(format!("{name}.ls_attn"), &[width], params::constant(width, layerscale), m),
            ls_ffn: store.add(format!("{name}.ls_ffn"), &[width], params::constant(width, layerscale), m),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var, ctx: &BlockCtx<T>) -> Var {
        let c = ctx.width;
        let rows = ctx.batch * ctx.tokens;
        let h = g.rms_norm(x, c, RMS_EPS);
        let s = p.get(g, self.norm_attn);
        let h = g.mul_bcast(h, s, rows, c);
        let a = self.attn.forward(g, p, h, ctx);
        let ls = p.get(g, self.ls_attn);
        let a = g.mul_bcast(a, ls, rows, c);
        let x = g.add(x, a);
        let h = g.rms_norm(x, c, RMS_EPS);
        let s = p.get(g, self.norm_ffn);
        let h = g.mul_bcast(h, s, rows, c);
        let f = self.ffn.forward(g, p, h);
        let ls = p.get(g, self.ls_ffn);
        let f = g.mul_bcast(f, ls, rows, c);
        g.add(x, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| StandardNormal.sample(rng)).collect()
    }

    #[test]
    fn rms_normalize_examples() {
        let y = rms_normalize(&[3.0f64, 4.0], 0.0).unwrap();
        assert!((y[0] - 3.0 / 12.5f64.sqrt()).abs() < 1e-12);
        assert!((y[1] - 4.0 / 12.5f64.sqrt()).abs() < 1e-12);
        assert!((y[0] - 0.8485).abs() < 1e-4 && (y[1] - 1.1314).abs() < 1e-4);
        let ones = rms_normalize(&[2.5f64; 7], 0.0).unwrap();
        assert!(ones.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn(&mut rng, 257);
        let y = rms_normalize(&x, 1e-6).unwrap();
        let ms = y.iter().map(|v| v * v).sum::<f64>() / y.len() as f64;
        assert!((ms - 1.0).abs() < 1e-4);
        assert_eq!(rms_normalize(&[1.0, f64::NAN], 0.0), Err(NnError::NonFinite(1)));
    }

    #[test]
    fn ffn_hidden_rounding() {
        assert_eq!(ffn_hidden(384), 1024);
        assert_eq!(ffn_hidden(64), 168);
        assert_eq!(ffn_hidden(32), 88);
    }

    #[test]
    fn config_validation() {
        assert!(ModelConfig::toy().validate().is_ok());
        let mut c = ModelConfig::toy();
        c.depth = 6;
        assert!(matches!(c.validate(), Err(NnError::Config(_))));
        let mut c = ModelConfig::toy();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.width = 12;
        c.heads = 4; // head dim 3 is odd
        assert!(c.validate().is_err());
        assert!(rope_table::<f64>(2, 2, 0, 3, true).is_err());
    }

    #[test]
    fn rope_origin_is_identity_and_norms_preserved() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let width = 16;
        let q = TokenGrid::new(randn(&mut rng, 17 * width), width, 4, 4, true);
        let k = TokenGrid::new(randn(&mut rng, 17 * width), width, 4, 4, true);
        let (qr, _) = apply_rope(&q, &k, 2).unwrap();
        assert_eq!(qr.token(0), q.token(0));
        assert_eq!(qr.token(16), q.token(16), "[cls] must stay unrotated");
        for i in 0..q.len() {
            let n0: f64 = q.token(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let n1: f64 = qr.token(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n0 - n1).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_scores_depend_only_on_offset() {
        // Place the same q and k vectors at every grid position and check
        // that the score only depends on the (row, col) offset.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (width, heads) = (8, 1);
        let qv = randn(&mut rng, width);
        let kv = randn(&mut rng, width);
        let rep = |v: &[f64]| TokenGrid::new(v.repeat(16), width, 4, 4, false);
        let (qr, kr) = apply_rope(&rep(&qv), &rep(&kv), heads).unwrap();
        let mut by_offset: std::collections::HashMap<(i64, i64), f64> = Default::default();
        for i in 0..16 {
            for j in 0..16 {
                let off = ((i / 4) as i64 - (j / 4) as i64, (i % 4) as i64 - (j % 4) as i64);
                let s: f64 = qr.token(i).iter().zip(kr.token(j)).map(|(a, b)| a * b).sum();
                let e = *by_offset.entry(off).or_insert(s);
                assert!((e - s).abs() < 1e-9, "offset {off:?}: {e} vs {s}");
            }
        }
        assert_eq!(by_offset.len(), 49);
    }
}
