//! Tape-based reverse-mode automatic differentiation over flat tensors.
//!
//! Every op appends a node holding its forward value; [`Graph::backward`]
//! walks the tape in reverse. Ops are specialized to what the transformer
//! stacks need (row-major linear layers, broadcast gating, fused attention,
//! axial rotary embeddings) rather than a general broadcasting algebra.

use std::collections::HashMap;
use std::sync::Arc;

use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-token rotation table: `cos`/`sin` laid out `[tokens, pairs]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable<T> {
    pub tokens: usize,
    pub pairs: usize,
    pub cos: Vec<T>,
    pub sin: Vec<T>,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var>, rows: usize, k: usize, n: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MulBcast { x: Var, g: Var, mid: usize, inner: usize },
    AddBcast { x: Var, g: Var, mid: usize, inner: usize },
    RmsNorm { x: Var, dim: usize, inv: Vec<T> },
    Silu(Var),
    Softplus(Var),
    Square(Var),
    Gather { x: Var, index: Arc<[i32]> },
    Concat(Vec<Var>),
    Reshape(Var),
    Rope { x: Var, table: Arc<RopeTable<T>>, heads: usize, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize, head_dim: usize, probs: Vec<T> },
    Sum(Var),
    Mean(Var),
    RowSum { x: Var, dim: usize },
    Cosine { a: Var, b: Var, dim: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward/backward tape.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    leaves: HashMap<(u64, usize), Var>,
    grads: Vec<Option<Vec<T>>>,
    fault: Option<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp_fast())
}

pub(crate) fn softplus_t<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaves: HashMap::new(),
            grads: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<T>, shape: Vec<usize>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "not a scalar node");
        val[0]
    }

    /// First numerical fault recorded during the forward pass, if any.
    pub fn fault(&self) -> Option<&str> {
        self.fault.as_deref()
    }

    fn record_fault(&mut self, msg: String) {
        if self.fault.is_none() {
            self.fault = Some(msg);
        }
    }

    pub fn constant(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "constant shape mismatch");
        self.push(value, shape.to_vec(), Op::Leaf, false)
    }

    /// Differentiable input leaf (used by gradient checks on activations).
    pub fn input(&mut self, value: Vec<T>, shape: &[usize]) -> Var {
        assert_eq!(value.len(), shape.iter().product::<usize>(), "input shape mismatch");
        self.push(value, shape.to_vec(), Op::Leaf, true)
    }

    /// Leaf for a stored parameter; repeated requests return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId, trainable: bool) -> Var {
        let key = (store.uid(), id.0);
        if let Some(&v) = self.leaves.get(&key) {
            return v;
        }
        let t = store.get(id);
        let v = self.push(t.data.clone(), t.shape.clone(), Op::Leaf, trainable);
        self.leaves.insert(key, v);
        v
    }

    // ----- elementwise -------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "add length mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, shape, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "sub length mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, shape, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.value(a).len(), self.value(b).len(), "mul length mismatch");
        let value = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, shape, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let value = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x * sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, Op::Silu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| softplus_t(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, Op::Softplus(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).iter().map(|&x| x * x).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(value, shape, Op::Square(a), rg)
    }

    /// `x[a, m, i] * g[a, i]` with `x` viewed as `[A, mid, inner]`.
    pub fn mul_bcast(&mut self, x: Var, g: Var, mid: usize, inner: usize) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        let outer = gv.len() / inner;
        assert_eq!(gv.len(), outer * inner, "gate length not a multiple of inner");
        assert_eq!(xv.len(), outer * mid * inner, "mul_bcast shape mismatch");
        let mut value = Vec::with_capacity(xv.len());
        for a in 0..outer {
            let gr = &gv[a * inner..(a + 1) * inner];
            for m in 0..mid {
                let base = (a * mid + m) * inner;
                value.extend(xv[base..base + inner].iter().zip(gr).map(|(&p, &q)| p * q));
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(g);
        self.push(value, shape, Op::MulBcast { x, g, mid, inner }, rg)
    }

    /// `x[a, m, i] + g[a, i]` with `x` viewed as `[A, mid, inner]`.
    pub fn add_bcast(&mut self, x: Var, g: Var, mid: usize, inner: usize) -> Var {
        let (xv, gv) = (self.value(x), self.value(g));
        let outer = gv.len() / inner;
        assert_eq!(xv.len(), outer * mid * inner, "add_bcast shape mismatch");
        let mut value = Vec::with_capacity(xv.len());
        for a in 0..outer {
            let gr = &gv[a * inner..(a + 1) * inner];
            for m in 0..mid {
                let base = (a * mid + m) * inner;
                value.extend(xv[base..base + inner].iter().zip(gr).map(|(&p, &q)| p + q));
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(g);
        self.push(value, shape, Op::AddBcast { x, g, mid, inner }, rg)
    }

    /// RMS normalization over contiguous chunks of length `dim`, no learned
    /// scale or shift.
    pub fn rms_norm(&mut self, x: Var, dim: usize, eps: f64) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len() % dim, 0, "rms_norm dim does not divide length");
        let eps = T::lit(eps);
        let d = T::lit(dim as f64);
        let rows = xv.len() / dim;
        let mut inv = Vec::with_capacity(rows);
        let mut value = Vec::with_capacity(xv.len());
        for r in 0..rows {
            let row = &xv[r * dim..(r + 1) * dim];
            let ms = row.iter().map(|&v| v * v).sum::<T>() / d;
            let s = T::one() / (ms + eps).sqrt();
            inv.push(s);
            value.extend(row.iter().map(|&v| v * s));
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(value, shape, Op::RmsNorm { x, dim, inv }, rg)
    }

    // ----- structural ----------------------------------------------------

    /// `out[i] = x[index[i]]`, or zero where `index[i] < 0`.
    pub fn gather(&mut self, x: Var, index: Arc<[i32]>, shape: &[usize]) -> Var {
        assert_eq!(index.len(), shape.iter().product::<usize>(), "gather shape mismatch");
        let xv = self.value(x);
        let value = index
            .iter()
            .map(|&i| if i < 0 { T::zero() } else { xv[i as usize] })
            .collect();
        let rg = self.rg(x);
        self.push(value, shape.to_vec(), Op::Gather { x, index }, rg)
    }

    /// Flat concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut value = Vec::new();
        for &p in parts {
            value.extend_from_slice(self.value(p));
        }
        let n = value.len();
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(value, vec![n], Op::Concat(parts.to_vec()), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        assert_eq!(self.value(x).len(), shape.iter().product::<usize>(), "reshape size mismatch");
        let value = self.value(x).to_vec();
        let rg = self.rg(x);
        self.push(value, shape.to_vec(), Op::Reshape(x), rg)
    }

    // ----- dense ---------------------------------------------------------

    /// `x · w + b` with `x: [.., k]`, `w: [k, n]`, `b: [n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let wshape = self.shape(w);
        assert_eq!(wshape.len(), 2, "linear weight must be 2-D");
        let (k, n) = (wshape[0], wshape[1]);
        let xv = self.value(x);
        assert_eq!(xv.len() % k, 0, "linear input width mismatch");
        let rows = xv.len() / k;
        let mut value = vec![T::zero(); rows * n];
        T::gemm(
            rows,
            k,
            n,
            T::one(),
            xv,
            k as isize,
            1,
            self.value(w),
            n as isize,
            1,
            T::zero(),
            &mut value,
            n as isize,
            1,
        );
        if let Some(b) = b {
            let bv = self.value(b);
            assert_eq!(bv.len(), n, "bias length mismatch");
            for row in value.chunks_mut(n) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        if let Some(last) = shape.last_mut() {
            *last = n;
        }
        if shape.len() <= 1 && rows > 1 {
            shape = vec![rows, n];
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, shape, Op::Linear { x, w, b, rows, k, n }, rg)
    }

    /// Axial rotary embedding on `x: [batch, tokens, heads * head_dim]`.
    pub fn rope(&mut self, x: Var, table: Arc<RopeTable<T>>, heads: usize) -> Var {
        let xv = self.value(x);
        let tokens = table.tokens;
        let pairs = table.pairs;
        let head_dim = pairs * 2;
        let width = heads * head_dim;
        assert_eq!(xv.len() % (tokens * width), 0, "rope shape mismatch");
        let mut value = xv.to_vec();
        for (t_idx, tok) in value.chunks_mut(width).enumerate() {
            let t = t_idx % tokens;
            let cs = &table.cos[t * pairs..(t + 1) * pairs];
            let sn = &table.sin[t * pairs..(t + 1) * pairs];
            for head in tok.chunks_mut(head_dim) {
                for p in 0..pairs {
                    let (a, b) = (head[2 * p], head[2 * p + 1]);
                    head[2 * p] = a * cs[p] - b * sn[p];
                    head[2 * p + 1] = a * sn[p] + b * cs[p];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x);
        self.push(value, shape, Op::Rope { x, table, heads, head_dim }, rg)
    }

    /// Multi-head softmax attention over `[batch, tokens, heads * head_dim]`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let width = self.value(q).len() / (batch * tokens);
        assert_eq!(width * batch * tokens, self.value(q).len(), "attention shape mismatch");
        assert_eq!(self.value(k).len(), self.value(q).len());
        assert_eq!(self.value(v).len(), self.value(q).len());
        assert_eq!(width % heads, 0);
        let head_dim = width / heads;
        let scale = T::one() / T::lit(head_dim as f64).sqrt();
        let tt = tokens * tokens;
        let mut probs = vec![T::zero(); batch * heads * tt];
        let mut out = vec![T::zero(); batch * tokens * width];
        let mut nonfinite = false;
        {
            let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
            let c = width as isize;
            for b in 0..batch {
                for h in 0..heads {
                    let off = b * tokens * width + h * head_dim;
                    let p = &mut probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                    T::gemm(tokens, head_dim, tokens, scale, &qv[off..], c, 1, &kv[off..], 1, c, T::zero(), p, tokens as isize, 1);
                    for row in p.chunks_mut(tokens) {
                        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                        if !mx.is_finite() {
                            nonfinite = true;
                        }
                        let mut s = T::zero();
                        for e in row.iter_mut() {
                            *e = (*e - mx).exp_fast();
                            s += *e;
                        }
                        for e in row.iter_mut() {
                            *e /= s;
                        }
                    }
                    T::gemm(tokens, tokens, head_dim, T::one(), p, tokens as isize, 1, &vv[off..], c, 1, T::zero(), &mut out[off..], c, 1);
                }
            }
        }
        if nonfinite {
            self.record_fault("non-finite attention logits".to_string());
        }
        let shape = self.shape(q).to_vec();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(out, shape, Op::Attention { q, k, v, batch, tokens, heads, head_dim, probs }, rg)
    }

    // ----- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum::<T>();
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.iter().copied().sum::<T>() / T::lit(xv.len() as f64);
        let rg = self.rg(x);
        self.push(vec![s], vec![1], Op::Mean(x), rg)
    }

    /// Sum over contiguous chunks of length `dim`.
    pub fn row_sum(&mut self, x: Var, dim: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len() % dim, 0);
        let value: Vec<T> = xv.chunks(dim).map(|c| c.iter().copied().sum()).collect();
        let n = value.len();
        let rg = self.rg(x);
        self.push(value, vec![n], Op::RowSum { x, dim }, rg)
    }

    /// Row-wise cosine similarity; rows with a zero norm score 0.
    pub fn cosine(&mut self, a: Var, b: Var, dim: usize) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "cosine length mismatch");
        let value: Vec<T> = av
            .chunks(dim)
            .zip(bv.chunks(dim))
            .map(|(x, y)| cosine_row(x, y).0)
            .collect();
        let n = value.len();
        let rg = self.rg(a) || self.rg(b);
        self.push(value, vec![n], Op::Cosine { a, b, dim }, rg)
    }

    // ----- backward ------------------------------------------------------

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        match &mut self.grads[v.0] {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(&contrib) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reverse sweep from a scalar node. Gradients are retrievable with
    /// [`Graph::grad`] afterwards.
    pub fn backward(&mut self, loss: Var) {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = self.grads[i].take() else { continue };
            self.backward_node(i, &dy);
            self.grads[i] = Some(dy);
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients for every tensor of `store`, zero-filled where the tensor
    /// did not take part in the loss.
    pub fn param_grads(&self, store: &ParamStore<T>) -> Vec<Vec<T>> {
        store
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| {
                self.leaves
                    .get(&(store.uid(), i))
                    .and_then(|&v| self.grad(v))
                    .map(|g| g.to_vec())
                    .unwrap_or_else(|| vec![T::zero(); t.data.len()])
            })
            .collect()
    }

    fn backward_node(&mut self, i: usize, dy: &[T]) {
        // Split borrow: the op is read while other nodes' grads are written.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.rg(*a) {
                    self.accumulate(*a, dy.to_vec());
                }
                if self.rg(*b) {
                    self.accumulate(*b, dy.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    self.accumulate(*a, dy.to_vec());
                }
                if self.rg(*b) {
                    self.accumulate(*b, dy.iter().map(|&g| -g).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let c = dy.iter().zip(self.value(*b)).map(|(&g, &y)| g * y).collect();
                    self.accumulate(*a, c);
                }
                if self.rg(*b) {
                    let c = dy.iter().zip(self.value(*a)).map(|(&g, &x)| g * x).collect();
                    self.accumulate(*b, c);
                }
            }
            Op::Scale(a, s) => {
                let c = dy.iter().map(|&g| g * *s).collect();
                self.accumulate(*a, c);
            }
            Op::Silu(a) => {
                let c = dy
                    .iter()
                    .zip(self.value(*a))
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * s * (T::one() + x * (T::one() - s))
                    })
                    .collect();
                self.accumulate(*a, c);
            }
            Op::Softplus(a) => {
                let c = dy.iter().zip(self.value(*a)).map(|(&g, &x)| g * sigmoid(x)).collect();
                self.accumulate(*a, c);
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                let c = dy.iter().zip(self.value(*a)).map(|(&g, &x)| g * two * x).collect();
                self.accumulate(*a, c);
            }
            Op::MulBcast { x, g, mid, inner } => {
                let (mid, inner) = (*mid, *inner);
                let outer = self.value(*g).len() / inner;
                if self.rg(*x) {
                    let gv = self.value(*g);
                    let mut c = Vec::with_capacity(dy.len());
                    for a in 0..outer {
                        let gr = &gv[a * inner..(a + 1) * inner];
                        for m in 0..mid {
                            let base = (a * mid + m) * inner;
                            c.extend(dy[base..base + inner].iter().zip(gr).map(|(&p, &q)| p * q));
                        }
                    }
                    self.accumulate(*x, c);
                }
                if self.rg(*g) {
                    let xv = self.value(*x);
                    let mut c = vec![T::zero(); outer * inner];
                    for a in 0..outer {
                        let cr = &mut c[a * inner..(a + 1) * inner];
                        for m in 0..mid {
                            let base = (a * mid + m) * inner;
                            for ((o, &d), &xx) in cr.iter_mut().zip(&dy[base..base + inner]).zip(&xv[base..base + inner]) {
                                *o += d * xx;
                            }
                        }
                    }
                    self.accumulate(*g, c);
                }
            }
            Op::AddBcast { x, g, mid, inner } => {
                let (mid, inner) = (*mid, *inner);
                if self.rg(*x) {
                    self.accumulate(*x, dy.to_vec());
                }
                if self.rg(*g) {
                    let outer = self.value(*g).len() / inner;
                    let mut c = vec![T::zero(); outer * inner];
                    for a in 0..outer {
                        let cr = &mut c[a * inner..(a + 1) * inner];
                        for m in 0..mid {
                            let base = (a * mid + m) * inner;
                            for (o, &d) in cr.iter_mut().zip(&dy[base..base + inner]) {
                                *o += d;
                            }
                        }
                    }
                    self.accumulate(*g, c);
                }
            }
            Op::RmsNorm { x, dim, inv } => {
                let dim = *dim;
                let d = T::lit(dim as f64);
                let xv = self.value(*x);
                let mut c = Vec::with_capacity(dy.len());
                for (r, &s) in inv.iter().enumerate() {
                    let xr = &xv[r * dim..(r + 1) * dim];
                    let gr = &dy[r * dim..(r + 1) * dim];
                    let dot = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum::<T>();
                    let k = s * s * s * dot / d;
                    c.extend(xr.iter().zip(gr).map(|(&a, &g)| s * g - k * a));
                }
                self.accumulate(*x, c);
            }
            Op::Gather { x, index } => {
                let mut c = vec![T::zero(); self.value(*x).len()];
                for (&idx, &g) in index.iter().zip(dy) {
                    if idx >= 0 {
                        c[idx as usize] += g;
                    }
                }
                self.accumulate(*x, c);
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if self.rg(p) {
                        self.accumulate(p, dy[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
            Op::Reshape(x) => self.accumulate(*x, dy.to_vec()),
            Op::Linear { x, w, b, rows, k, n } => {
                let (rows, k, n) = (*rows, *k, *n);
                if self.rg(*x) {
                    let mut c = vec![T::zero(); rows * k];
                    T::gemm(rows, n, k, T::one(), dy, n as isize, 1, self.value(*w), 1, n as isize, T::zero(), &mut c, k as isize, 1);
                    self.accumulate(*x, c);
                }
                if self.rg(*w) {
                    let mut c = vec![T::zero(); k * n];
                    T::gemm(k, rows, n, T::one(), self.value(*x), 1, k as isize, dy, n as isize, 1, T::zero(), &mut c, n as isize, 1);
                    self.accumulate(*w, c);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut c = vec![T::zero(); n];
                        for row in dy.chunks(n) {
                            for (o, &g) in c.iter_mut().zip(row) {
                                *o += g;
                            }
                        }
                        self.accumulate(*b, c);
                    }
                }
            }
            Op::Rope { x, table, heads, head_dim } => {
                let (pairs, tokens) = (table.pairs, table.tokens);
                let width = heads * head_dim;
                let mut c = dy.to_vec();
                for (t_idx, tok) in c.chunks_mut(width).enumerate() {
                    let t = t_idx % tokens;
                    let cs = &table.cos[t * pairs..(t + 1) * pairs];
                    let sn = &table.sin[t * pairs..(t + 1) * pairs];
                    for head in tok.chunks_mut(*head_dim) {
                        for p in 0..pairs {
                            let (a, b) = (head[2 * p], head[2 * p + 1]);
                            head[2 * p] = a * cs[p] + b * sn[p];
                            head[2 * p + 1] = -a * sn[p] + b * cs[p];
                        }
                    }
                }
                self.accumulate(*x, c);
            }
            Op::Attention { q, k, v, batch, tokens, heads, head_dim, probs } => {
                let (batch, tokens, heads, head_dim) = (*batch, *tokens, *heads, *head_dim);
                let width = heads * head_dim;
                let c = width as isize;
                let tt = tokens * tokens;
                let scale = T::one() / T::lit(head_dim as f64).sqrt();
                let len = batch * tokens * width;
                let mut dq = vec![T::zero(); len];
                let mut dk = vec![T::zero(); len];
                let mut dv = vec![T::zero(); len];
                let mut dp = vec![T::zero(); tt];
                {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    for b in 0..batch {
                        for h in 0..heads {
                            let off = b * tokens * width + h * head_dim;
                            let p = &probs[(b * heads + h) * tt..(b * heads + h + 1) * tt];
                            // dV = P^T dO
                            T::gemm(tokens, tokens, head_dim, T::one(), p, 1, tokens as isize, &dy[off..], c, 1, T::zero(), &mut dv[off..], c, 1);
                            // dP = dO V^T
                            T::gemm(tokens, head_dim, tokens, T::one(), &dy[off..], c, 1, &vv[off..], 1, c, T::zero(), &mut dp, tokens as isize, 1);
                            for (dr, pr) in dp.chunks_mut(tokens).zip(p.chunks(tokens)) {
                                let dot = dr.iter().zip(pr).map(|(&a, &b)| a * b).sum::<T>();
                                for (d, &pp) in dr.iter_mut().zip(pr) {
                                    *d = pp * (*d - dot);
                                }
                            }
                            // dQ = scale dS K ; dK = scale dS^T Q
                            T::gemm(tokens, tokens, head_dim, scale, &dp, tokens as isize, 1, &kv[off..], c, 1, T::zero(), &mut dq[off..], c, 1);
                            T::gemm(tokens, tokens, head_dim, scale, &dp, 1, tokens as isize, &qv[off..], c, 1, T::zero(), &mut dk[off..], c, 1);
                        }
                    }
                }
                if self.rg(*q) {
                    self.accumulate(*q, dq);
                }
                if self.rg(*k) {
                    self.accumulate(*k, dk);
                }
                if self.rg(*v) {
                    self.accumulate(*v, dv);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(*x, vec![dy[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                let g = dy[0] / T::lit(n as f64);
                self.accumulate(*x, vec![g; n]);
            }
            Op::RowSum { x, dim } => {
                let c = dy.iter().flat_map(|&g| std::iter::repeat_n(g, *dim)).collect();
                self.accumulate(*x, c);
            }
            Op::Cosine { a, b, dim } => {
                let dim = *dim;
                let (av, bv) = (self.value(*a), self.value(*b));
                let mut ga = Vec::with_capacity(av.len());
                let mut gb = Vec::with_capacity(bv.len());
                for ((x, y), &g) in av.chunks(dim).zip(bv.chunks(dim)).zip(dy) {
                    let (cos, nx, ny) = cosine_row(x, y);
                    if nx == T::zero() || ny == T::zero() {
                        ga.extend(std::iter::repeat_n(T::zero(), dim));
                        gb.extend(std::iter::repeat_n(T::zero(), dim));
                        continue;
                    }
                    let inv = T::one() / (nx * ny);
                    ga.extend(x.iter().zip(y).map(|(&xi, &yi)| g * (yi * inv - cos * xi / (nx * nx))));
                    gb.extend(x.iter().zip(y).map(|(&xi, &yi)| g * (xi * inv - cos * yi / (ny * ny))));
                }
                if self.rg(*a) {
                    self.accumulate(*a, ga);
                }
                if self.rg(*b) {
                    self.accumulate(*b, gb);
                }
            }
        }
        self.nodes[i].op = op;
    }
}

/// (cosine, |x|, |y|) with cosine 0 when either norm vanishes.
fn cosine_row<T: Scalar>(x: &[T], y: &[T]) -> (T, T, T) {
    let dot = x.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
    let nx = x.iter().map(|&a| a * a).sum::<T>().sqrt();
    let ny = y.iter().map(|&a| a * a).sum::<T>().sqrt();
    if nx == T::zero() || ny == T::zero() {
        (T::zero(), nx, ny)
    } else {
        (dot / (nx * ny), nx, ny)
    }
}
