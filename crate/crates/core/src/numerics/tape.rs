use super::array::{permute_data, sigmoid, softmax_in_place, MatmulPlan};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Multiply-add counts (2 FLOPs each) accumulated by forward passes.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopStats {
    /// Dense matrix products (projections, FFN, routers, heads).
    pub matmul: u64,
    /// Score and value products inside scaled dot-product attention.
    pub attention: u64,
    /// Gated value mixing.
    pub mixing: u64,
}

/// Layout of one fused causal attention call.
///
/// Rows of `q` are `batch * q_len` query positions, each holding `heads`
/// chunks of `key_dim`. Keys and values hold `batch * kv_len` rows with either
/// one chunk per head or a single chunk shared by all heads. Query `i` sees key
/// `j` iff `j <= q_offset + i`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnLayout {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub q_offset: usize,
    pub heads: usize,
    pub k_heads: usize,
    pub v_heads: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    pub scale: f64,
}

impl AttnLayout {
    /// Full causal self-attention over `batch` sequences of `len` tokens.
    pub fn causal(batch: usize, len: usize, heads: usize, head_dim: usize) -> Self {
        AttnLayout {
            batch,
            q_len: len,
            kv_len: len,
            q_offset: 0,
            heads,
            k_heads: heads,
            v_heads: heads,
            key_dim: head_dim,
            value_dim: head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
        }
    }

    fn q_width(&self) -> usize {
        self.heads * self.key_dim
    }
    fn k_width(&self) -> usize {
        self.k_heads * self.key_dim
    }
    fn v_width(&self) -> usize {
        self.v_heads * self.value_dim
    }
    fn out_width(&self) -> usize {
        self.heads * self.value_dim
    }
    fn k_head(&self, h: usize) -> usize {
        if self.k_heads == 1 {
            0
        } else {
            h
        }
    }
    fn v_head(&self, h: usize) -> usize {
        if self.v_heads == 1 {
            0
        } else {
            h
        }
    }
}

/// Layout of a gated value mixture: `out = g0·base + Σᵢ gᵢ·memᵢ` per head.
///
/// `base` rows hold `heads × width`; `memory` rows hold `slots × heads × width`;
/// `gates` rows hold `heads × (slots + 1)` with the standard-path gate first
/// when `gated_std`, otherwise `heads × slots` and the standard path is added
/// with unit weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixLayout {
    pub heads: usize,
    pub slots: usize,
    pub width: usize,
    pub gated_std: bool,
}

impl MixLayout {
    pub fn gate_stride(&self) -> usize {
        self.slots + usize::from(self.gated_std)
    }
}

#[derive(Clone, Debug)]
struct RopeCache<S> {
    heads: usize,
    head_dim: usize,
    /// Per row, `head_dim / 2` (cos, sin) pairs.
    angles: Vec<(S, S)>,
}

#[derive(Clone, Debug)]
enum Op<S> {
    Param,
    Constant,
    MatMul { a: Var, b: Var, plan: MatmulPlan },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Sigmoid(Var),
    /// Input and the derivative at each element.
    Gelu(Var, Vec<S>),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<S> },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Gather { table: Var, indices: Vec<usize> },
    Rope { x: Var, cache: RopeCache<S> },
    Attention { q: Var, k: Var, v: Var, layout: AttnLayout, probs: Vec<S> },
    GatedMix { base: Var, memory: Var, gates: Var, layout: MixLayout },
    CrossEntropy { logits: Var, targets: Vec<usize>, weights: Option<Vec<S>>, probs: Vec<S> },
}

#[derive(Clone, Debug)]
struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Append-only record of a forward computation.
///
/// A tape is single-owner; build a fresh one per forward/backward pass.
#[derive(Clone, Debug, Default)]
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
    stats: FlopStats,
}

/// Gradients of a scalar loss with respect to every parameter leaf.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    pub fn get(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves a leaf gradient out. Panics if `v` is not a parameter leaf.
    pub fn take(&mut self, v: Var) -> Tensor<S> {
        self.grads[v.0].take().expect("gradient requested for a non-parameter node")
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), stats: FlopStats::default() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn stats(&self) -> FlopStats {
        self.stats
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Trainable leaf: backward produces a gradient for it.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Param, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn is_param(&self, v: Var) -> bool {
        matches!(self.nodes[v.0].op, Op::Param)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> Error {
        Error::ShapeMismatch { op, lhs: self.shape(a).to_vec(), rhs: self.shape(b).to_vec() }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let plan = MatmulPlan::new(self.shape(a), self.shape(b))?;
        let mut out = vec![S::zero(); plan.out_shape.iter().product()];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        self.stats.matmul += plan.flops();
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, plan }, needs))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch(name, a, b));
        }
        self.value(a).zip_with(self.value(b), name, f)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "add", |x, y| x + y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), needs))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "sub", |x, y| x - y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.binary(a, b, "mul", |x, y| x * y)?;
        let needs = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), needs))
    }

    pub fn scale(&mut self, a: Var, c: S) -> Var {
        let value = self.value(a).scale(c);
        let needs = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), needs)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let needs = self.needs(&[a]);
        self.push(value, Op::Sum(a), needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let needs = self.needs(&[a]);
        self.push(value, Op::Sigmoid(a), needs)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let xv = self.value(a);
        let (y, dy): (Vec<S>, Vec<S>) = xv.data().iter().map(|&x| gelu_parts(x)).unzip();
        let value = Tensor::new(xv.shape().to_vec(), y).expect("same shape");
        let needs = self.needs(&[a]);
        self.push(value, Op::Gelu(a, dy), needs)
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let value = self.value(a).softmax_lastdim();
        let needs = self.needs(&[a]);
        self.push(value, Op::Softmax(a), needs)
    }

    /// Root-mean-square normalization over the last axis with a learned gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var, eps: f64) -> Result<Var> {
        let w = self.value(x).last_dim();
        if self.shape(gain) != [w] {
            return Err(self.mismatch("rms_norm", x, gain));
        }
        let eps = S::lit(eps);
        let xv = self.value(x);
        let g = self.value(gain).data();
        let mut out = Vec::with_capacity(xv.numel());
        let mut inv_rms = Vec::with_capacity(xv.rows());
        let wn = S::lit(w as f64);
        for row in xv.data().chunks(w) {
            let ms = row.iter().map(|&v| v * v).sum::<S>() / wn;
            let r = S::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            out.extend(row.iter().zip(g).map(|(&v, &gi)| v * r * gi));
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, needs))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Reshape(a), needs))
    }

    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(a).permute(axes)?;
        let needs = self.needs(&[a]);
        Ok(self.push(value, Op::Permute { x: a, axes: axes.to_vec() }, needs))
    }

    /// Row lookup: `out[i] = table[indices[i]]` over the first axis.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.rank() == 0 {
            return Err(Error::ShapeMismatch { op: "gather", lhs: vec![], rhs: vec![indices.len()] });
        }
        let rows = t.shape()[0];
        let width = t.numel() / rows.max(1);
        let mut out = Vec::with_capacity(indices.len() * width);
        for (position, &ix) in indices.iter().enumerate() {
            if ix >= rows {
                return Err(Error::TokenOutOfRange { position, token: ix, vocab: rows });
            }
            out.extend_from_slice(&t.data()[ix * width..(ix + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = indices.len();
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[table]);
        Ok(self.push(value, Op::Gather { table, indices: indices.to_vec() }, needs))
    }

    /// Rotary position rotation of each head chunk (half-split pairing).
    ///
    /// `x` is `[rows, heads * head_dim]`; `positions[r]` is the absolute
    /// position of row `r`.
    pub fn rope(&mut self, x: Var, positions: &[usize], heads: usize, head_dim: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[1] != heads * head_dim || shape[0] != positions.len() || !head_dim.is_multiple_of(2) {
            return Err(Error::ShapeMismatch {
                op: "rope",
                lhs: shape,
                rhs: vec![positions.len(), heads, head_dim],
            });
        }
        let half = head_dim / 2;
        let mut angles = Vec::with_capacity(positions.len() * half);
        for &p in positions {
            for i in 0..half {
                let freq = 10000f64.powf(-2.0 * i as f64 / head_dim as f64);
                let a = p as f64 * freq;
                angles.push((S::lit(a.cos()), S::lit(a.sin())));
            }
        }
        let cache = RopeCache { heads, head_dim, angles };
        let mut out = self.value(x).data().to_vec();
        rotate(&mut out, &cache, false);
        let value = Tensor::new(shape, out)?;
        let needs = self.needs(&[x]);
        Ok(self.push(value, Op::Rope { x, cache }, needs))
    }

    /// Fused scaled dot-product attention with a causal mask.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Result<Var> {
        let l = layout;
        let bad = (l.k_heads != 1 && l.k_heads != l.heads) || (l.v_heads != 1 && l.v_heads != l.heads);
        let want_q = [l.batch * l.q_len, l.q_width()];
        let want_k = [l.batch * l.kv_len, l.k_width()];
        let want_v = [l.batch * l.kv_len, l.v_width()];
        if bad || self.shape(q) != want_q || self.shape(k) != want_k {
            return Err(self.mismatch("attention(q, k)", q, k));
        }
        if self.shape(v) != want_v || l.q_offset + l.q_len > l.kv_len {
            return Err(self.mismatch("attention(k, v)", k, v));
        }
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let scale = S::lit(l.scale);
        let tile = l.q_len * l.kv_len;
        let mut probs = vec![S::zero(); l.batch * l.heads * tile];
        let mut out = vec![S::zero(); l.batch * l.q_len * l.out_width()];
        for b in 0..l.batch {
            for h in 0..l.heads {
                let p = &mut probs[(b * l.heads + h) * tile..][..tile];
                let q_off = b * l.q_len * l.q_width() + h * l.key_dim;
                let k_off = b * l.kv_len * l.k_width() + l.k_head(h) * l.key_dim;
                let v_off = b * l.kv_len * l.v_width() + l.v_head(h) * l.value_dim;
                let o_off = b * l.q_len * l.out_width() + h * l.value_dim;
                S::gemm(
                    l.q_len,
                    l.key_dim,
                    l.kv_len,
                    scale,
                    &qd[q_off..],
                    (l.q_width(), 1),
                    &kd[k_off..],
                    (1, l.k_width()),
                    S::zero(),
                    p,
                    (l.kv_len, 1),
                );
                for (i, row) in p.chunks_mut(l.kv_len).enumerate() {
                    for x in row.iter_mut().skip(l.q_offset + i + 1) {
                        *x = S::neg_infinity();
                    }
                    softmax_in_place(row);
                }
                S::gemm(
                    l.q_len,
                    l.kv_len,
                    l.value_dim,
                    S::one(),
                    p,
                    (l.kv_len, 1),
                    &vd[v_off..],
                    (l.v_width(), 1),
                    S::zero(),
                    &mut out[o_off..],
                    (l.out_width(), 1),
                );
            }
        }
        self.stats.attention +=
            2 * (l.batch * l.heads * tile * (l.key_dim + l.value_dim)) as u64;
        let value = Tensor::new(vec![l.batch * l.q_len, l.out_width()], out)?;
        let needs = self.needs(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, layout, probs }, needs))
    }

    /// Attention probabilities of a recorded attention node, `[batch, heads, q_len, kv_len]`.
    pub fn attention_probs(&self, v: Var) -> Option<Tensor<S>> {
        match &self.nodes[v.0].op {
            Op::Attention { layout: l, probs, .. } => {
                Tensor::new(vec![l.batch, l.heads, l.q_len, l.kv_len], probs.clone()).ok()
            }
            _ => None,
        }
    }

    /// Gate-weighted sum of a base stream and retrieved memory slots.
    pub fn gated_mix(&mut self, base: Var, memory: Var, gates: Var, layout: MixLayout) -> Result<Var> {
        let rows = self.value(base).rows();
        let hw = layout.heads * layout.width;
        if self.shape(base) != [rows, hw] {
            return Err(self.mismatch("gated_mix(base)", base, memory));
        }
        let mem_rows_ok = layout.slots == 0 || self.shape(memory).first() == Some(&rows);
        if self.value(memory).numel() != rows * layout.slots * hw || !mem_rows_ok {
            return Err(self.mismatch("gated_mix(memory)", base, memory));
        }
        if self.shape(gates) != [rows, layout.heads * layout.gate_stride()] {
            return Err(self.mismatch("gated_mix(gates)", base, gates));
        }
        let mut out = vec![S::zero(); rows * hw];
        mix_forward(
            self.value(base).data(),
            self.value(memory).data(),
            self.value(gates).data(),
            layout,
            &mut out,
        );
        self.stats.mixing += 2 * (rows * hw * (layout.slots + 1)) as u64;
        let value = Tensor::new(vec![rows, hw], out)?;
        let needs = self.needs(&[base, memory, gates]);
        Ok(self.push(value, Op::GatedMix { base, memory, gates, layout }, needs))
    }

    /// Summed (optionally weighted) negative log-likelihood of `targets`
    /// under row-wise softmax of `logits`, in nats.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: Option<&[S]>) -> Result<Var> {
        let lv = self.value(logits);
        let vocab = lv.last_dim();
        if lv.rank() != 2 || lv.rows() != targets.len() || weights.is_some_and(|w| w.len() != targets.len()) {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some((position, &token)) = targets.iter().enumerate().find(|(_, &t)| t >= vocab) {
            return Err(Error::TokenOutOfRange { position, token, vocab });
        }
        let probs = lv.softmax_lastdim().into_data();
        let mut total = S::zero();
        for (n, &t) in targets.iter().enumerate() {
            let w = weights.map_or(S::one(), |w| w[n]);
            if w != S::zero() {
                total += w * row_nll(lv.row(n), t);
            }
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights: weights.map(<[S]>::to_vec),
            probs,
        };
        let needs = self.needs(&[logits]);
        Ok(self.push(Tensor::scalar(total), op, needs))
    }

    /// Reverse sweep from a scalar loss. Every parameter leaf receives a
    /// gradient (zeros when the loss does not depend on it).
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss { shape: lv.shape().to_vec() });
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![S::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Param | Op::Constant) || !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(&node.op, &node.value, &g, &mut grads);
        }
        let out = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| match n.op {
                Op::Param => {
                    let data = grads[i].take().unwrap_or_else(|| vec![S::zero(); n.value.numel()]);
                    Some(Tensor::new(n.value.shape().to_vec(), data).expect("gradient shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<S>>], v: Var) -> Option<&'g mut [S]> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        let n = node.value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![S::zero(); n]).as_mut_slice())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<S>>], v: Var, f: impl Fn(usize) -> S) {
        if let Some(dst) = self.slot(grads, v) {
            for (i, d) in dst.iter_mut().enumerate() {
                *d += f(i);
            }
        }
    }

    fn backprop(&self, op: &Op<S>, out: &Tensor<S>, g: &[S], grads: &mut [Option<Vec<S>>]) {
        match op {
            Op::Param | Op::Constant => {}
            Op::MatMul { a, b, plan } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = self.slot(grads, *a).map(|s| s.to_vec());
                let mut db = self.slot(grads, *b).map(|s| s.to_vec());
                plan.backward(av, bv, g, da.as_deref_mut(), db.as_deref_mut());
                if let Some(da) = da {
                    grads[a.0] = Some(da);
                }
                if let Some(db) = db {
                    grads[b.0] = Some(db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| g[i]);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |i| g[i]);
                self.accumulate(grads, *b, |i| -g[i]);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |i| g[i] * bv[i]);
                self.accumulate(grads, *b, |i| g[i] * av[i]);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, |i| g[i] * *c),
            Op::Sum(a) => self.accumulate(grads, *a, |_| g[0]),
            Op::Sigmoid(a) => {
                let y = out.data();
                self.accumulate(grads, *a, |i| g[i] * y[i] * (S::one() - y[i]));
            }
            Op::Gelu(a, dy) => {
                self.accumulate(grads, *a, |i| g[i] * dy[i]);
            }
            Op::Softmax(a) => {
                let y = out.data();
                let w = out.last_dim();
                let mut dx = vec![S::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)) {
                    let dot: S = yr.iter().zip(gr).map(|(&p, &d)| p * d).sum();
                    for ((d, &p), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = p * (gi - dot);
                    }
                }
                self.accumulate(grads, *a, |i| dx[i]);
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = self.value(*x).data();
                let gv = self.value(*gain).data();
                let w = gv.len();
                let wn = S::lit(w as f64);
                if let Some(dg) = self.slot(grads, *gain) {
                    for (r, (xr, gr)) in xv.chunks(w).zip(g.chunks(w)).enumerate() {
                        for j in 0..w {
                            dg[j] += gr[j] * xr[j] * inv_rms[r];
                        }
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    for (r, ((xr, gr), dr)) in xv.chunks(w).zip(g.chunks(w)).zip(dx.chunks_mut(w)).enumerate() {
                        let ir = inv_rms[r];
                        let dot: S = (0..w).map(|j| gr[j] * gv[j] * xr[j] * ir).sum::<S>() / wn;
                        for j in 0..w {
                            dr[j] += ir * (gr[j] * gv[j] - xr[j] * ir * dot);
                        }
                    }
                }
            }
            Op::Reshape(a) => self.accumulate(grads, *a, |i| g[i]),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (_, back) = permute_data(out.shape(), g, &inverse).expect("inverse permutation");
                self.accumulate(grads, *x, |i| back[i]);
            }
            Op::Gather { table, indices } => {
                let width = out.last_dim_product();
                if let Some(dt) = self.slot(grads, *table) {
                    for (r, &ix) in indices.iter().enumerate() {
                        for (d, &gi) in dt[ix * width..(ix + 1) * width].iter_mut().zip(&g[r * width..(r + 1) * width]) {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Rope { x, cache } => {
                let mut back = g.to_vec();
                rotate(&mut back, cache, true);
                self.accumulate(grads, *x, |i| back[i]);
            }
            Op::Attention { q, k, v, layout, probs } => {
                self.attention_backward(*q, *k, *v, layout, probs, g, grads);
            }
            Op::GatedMix { base, memory, gates, layout } => {
                let bv = self.value(*base).data();
                let mv = self.value(*memory).data();
                let gv = self.value(*gates).data();
                let l = *layout;
                let hw = l.heads * l.width;
                let gs = l.gate_stride();
                let off = usize::from(l.gated_std);
                let rows = bv.len() / hw.max(1);
                if let Some(db) = self.slot(grads, *base) {
                    for n in 0..rows {
                        for h in 0..l.heads {
                            let g0 = if l.gated_std { gv[n * l.heads * gs + h * gs] } else { S::one() };
                            let o = n * hw + h * l.width;
                            for j in 0..l.width {
                                db[o + j] += g0 * g[o + j];
                            }
                        }
                    }
                }
                if let Some(dm) = self.slot(grads, *memory) {
                    for n in 0..rows {
                        for i in 0..l.slots {
                            for h in 0..l.heads {
                                let gi = gv[n * l.heads * gs + h * gs + i + off];
                                let o = n * hw + h * l.width;
                                let mo = (n * l.slots + i) * hw + h * l.width;
                                for j in 0..l.width {
                                    dm[mo + j] += gi * g[o + j];
                                }
                            }
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gates) {
                    for n in 0..rows {
                        for h in 0..l.heads {
                            let o = n * hw + h * l.width;
                            let go = &g[o..o + l.width];
                            let gbase = n * l.heads * gs + h * gs;
                            if l.gated_std {
                                dg[gbase] += dot(go, &bv[o..o + l.width]);
                            }
                            for i in 0..l.slots {
                                let mo = (n * l.slots + i) * hw + h * l.width;
                                dg[gbase + i + off] += dot(go, &mv[mo..mo + l.width]);
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy { logits, targets, weights, probs } => {
                let vocab = self.value(*logits).last_dim();
                if let Some(dl) = self.slot(grads, *logits) {
                    for (n, &t) in targets.iter().enumerate() {
                        let w = weights.as_ref().map_or(S::one(), |w| w[n]) * g[0];
                        if w == S::zero() {
                            continue;
                        }
                        let row = &mut dl[n * vocab..(n + 1) * vocab];
                        for (d, &p) in row.iter_mut().zip(&probs[n * vocab..(n + 1) * vocab]) {
                            *d += w * p;
                        }
                        row[t] -= w;
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        l: &AttnLayout,
        probs: &[S],
        g: &[S],
        grads: &mut [Option<Vec<S>>],
    ) {
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut dq = self.slot(grads, q).map(|s| s.to_vec());
        let mut dk = self.slot(grads, k).map(|s| s.to_vec());
        let mut dv = self.slot(grads, v).map(|s| s.to_vec());
        let scale = S::lit(l.scale);
        let tile = l.q_len * l.kv_len;
        let mut ds = vec![S::zero(); tile];
        for b in 0..l.batch {
            for h in 0..l.heads {
                let p = &probs[(b * l.heads + h) * tile..][..tile];
                let q_off = b * l.q_len * l.q_width() + h * l.key_dim;
                let k_off = b * l.kv_len * l.k_width() + l.k_head(h) * l.key_dim;
                let v_off = b * l.kv_len * l.v_width() + l.v_head(h) * l.value_dim;
                let o_off = b * l.q_len * l.out_width() + h * l.value_dim;
                if let Some(dv) = dv.as_deref_mut() {
                    S::gemm(
                        l.kv_len,
                        l.q_len,
                        l.value_dim,
                        S::one(),
                        p,
                        (1, l.kv_len),
                        &g[o_off..],
                        (l.out_width(), 1),
                        S::one(),
                        &mut dv[v_off..],
                        (l.v_width(), 1),
                    );
                }
                if dq.is_none() && dk.is_none() {
                    continue;
                }
                // dP = dO·Vᵀ, then the softmax Jacobian.
                S::gemm(
                    l.q_len,
                    l.value_dim,
                    l.kv_len,
                    S::one(),
                    &g[o_off..],
                    (l.out_width(), 1),
                    &vd[v_off..],
                    (1, l.v_width()),
                    S::zero(),
                    &mut ds,
                    (l.kv_len, 1),
                );
                for (dr, pr) in ds.chunks_mut(l.kv_len).zip(p.chunks(l.kv_len)) {
                    let rowdot: S = dr.iter().zip(pr).map(|(&d, &pp)| d * pp).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - rowdot);
                    }
                }
                if let Some(dq) = dq.as_deref_mut() {
                    S::gemm(
                        l.q_len,
                        l.kv_len,
                        l.key_dim,
                        scale,
                        &ds,
                        (l.kv_len, 1),
                        &kd[k_off..],
                        (l.k_width(), 1),
                        S::one(),
                        &mut dq[q_off..],
                        (l.q_width(), 1),
                    );
                }
                if let Some(dk) = dk.as_deref_mut() {
                    S::gemm(
                        l.kv_len,
                        l.q_len,
                        l.key_dim,
                        scale,
                        &ds,
                        (1, l.kv_len),
                        &qd[q_off..],
                        (l.q_width(), 1),
                        S::one(),
                        &mut dk[k_off..],
                        (l.k_width(), 1),
                    );
                }
            }
        }
        for (var, buf) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(buf) = buf {
                grads[var.0] = Some(buf);
            }
        }
    }
}

impl<S: Scalar> Tensor<S> {
    fn last_dim_product(&self) -> usize {
        self.shape().iter().skip(1).product()
    }
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn row_nll<S: Scalar>(row: &[S], target: usize) -> S {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let lse = row.iter().map(|&x| (x - max).exp()).sum::<S>().ln() + max;
    lse - row[target]
}

/// GELU value and derivative (tanh approximation, written through the
/// logistic function: `(1 + tanh u) / 2 = σ(2u)`).
fn gelu_parts<S: Scalar>(x: S) -> (S, S) {
    let c = S::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = S::lit(0.044715);
    let two = S::lit(2.0);
    let u = c * (x + a * x * x * x);
    let s = sigmoid(two * u);
    let du = c * (S::one() + S::lit(3.0) * a * x * x);
    (x * s, s + two * x * s * (S::one() - s) * du)
}

fn rotate<S: Scalar>(data: &mut [S], cache: &RopeCache<S>, inverse: bool) {
    let half = cache.head_dim / 2;
    let width = cache.heads * cache.head_dim;
    for (r, row) in data.chunks_mut(width).enumerate() {
        let ang = &cache.angles[r * half..(r + 1) * half];
        for h in 0..cache.heads {
            let chunk = &mut row[h * cache.head_dim..(h + 1) * cache.head_dim];
            for (i, &(c, s)) in ang.iter().enumerate() {
                let (x1, x2) = (chunk[i], chunk[i + half]);
                if inverse {
                    chunk[i] = x1 * c + x2 * s;
                    chunk[i + half] = -x1 * s + x2 * c;
                } else {
                    chunk[i] = x1 * c - x2 * s;
                    chunk[i + half] = x1 * s + x2 * c;
                }
            }
        }
    }
}

pub(crate) fn mix_forward<S: Scalar>(base: &[S], memory: &[S], gates: &[S], l: MixLayout, out: &mut [S]) {
    let hw = l.heads * l.width;
    let gs = l.gate_stride();
    let off = usize::from(l.gated_std);
    let rows = out.len() / hw.max(1);
    for n in 0..rows {
        for h in 0..l.heads {
            let o = n * hw + h * l.width;
            let gbase = n * l.heads * gs + h * gs;
            let dst = &mut out[o..o + l.width];
            if l.gated_std {
                let g0 = gates[gbase];
                for (d, &b) in dst.iter_mut().zip(&base[o..o + l.width]) {
                    *d = g0 * b;
                }
            } else {
                dst.copy_from_slice(&base[o..o + l.width]);
            }
            for i in 0..l.slots {
                let gi = gates[gbase + i + off];
                let mo = (n * l.slots + i) * hw + h * l.width;
                for (d, &m) in dst.iter_mut().zip(&memory[mo..mo + l.width]) {
                    *d += gi * m;
                }
            }
        }
    }
}
