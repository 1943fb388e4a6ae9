use rand::Rng;

use super::memory::{GateTensor, LaveParams, Router, StdPath, ValueBank};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, MixLayout, Scalar, Tape, Tensor, Var};

/// Per-head projections stacked column-wise: head `h` owns columns
/// `h·d_h .. (h+1)·d_h` of `w_q`, `w_k`, `w_v` and the matching rows of `w_o`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams<S> {
    pub w_q: Tensor<S>,
    pub w_k: Tensor<S>,
    pub w_v: Tensor<S>,
    pub w_o: Tensor<S>,
    pub heads: usize,
    pub head_dim: usize,
}

impl<S: Scalar> AttentionParams<S> {
    /// Gaussian init with `1/√fan_in` scale; `out_scale` further shrinks `w_o`.
    pub fn random<R: Rng + ?Sized>(d_model: usize, heads: usize, out_scale: f64, rng: &mut R) -> Result<Self> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("width {d_model} is not divisible by {heads} heads")));
        }
        let std = 1.0 / (d_model as f64).sqrt();
        Ok(AttentionParams {
            w_q: Tensor::randn(vec![d_model, d_model], std, rng),
            w_k: Tensor::randn(vec![d_model, d_model], std, rng),
            w_v: Tensor::randn(vec![d_model, d_model], std, rng),
            w_o: Tensor::randn(vec![d_model, d_model], std * out_scale, rng),
            heads,
            head_dim: d_model / heads,
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> AttentionVars {
        let mut leaf = |t: &Tensor<S>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        AttentionVars { w_q: leaf(&self.w_q), w_k: leaf(&self.w_k), w_v: leaf(&self.w_v), w_o: leaf(&self.w_o) }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

/// Value-stream memory attached to one attention layer.
///
/// MoVE layers own only their router; the bank is global and passed in.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerMemory<S> {
    None,
    Move(Router<S>),
    Lave(LaveParams<S>),
}

/// Tape handles for a layer's memory path.
#[derive(Clone, Copy, Debug)]
pub enum MemoryVars {
    None,
    /// `bank` is the shared `[N_vocab, M, width]` leaf.
    Move { bank: Var, router: Var, slots: usize, std_path: StdPath },
    Lave { bank: Var, router: Var, std_path: StdPath },
}

impl<S: Scalar> LayerMemory<S> {
    pub fn bind(&self, tape: &mut Tape<S>, bank: Option<Var>, trainable: bool) -> Result<MemoryVars> {
        let mut leaf = |t: &Tensor<S>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        Ok(match self {
            LayerMemory::None => MemoryVars::None,
            LayerMemory::Move(r) => {
                let bank = bank.ok_or_else(|| Error::InvalidConfig("MoVE layer without a value bank".into()))?;
                MemoryVars::Move { bank, router: leaf(&r.weight), slots: r.slots, std_path: r.std_path }
            }
            LayerMemory::Lave(l) => MemoryVars::Lave {
                bank: leaf(&l.bank),
                router: leaf(&l.router.weight),
                std_path: l.router.std_path,
            },
        })
    }

    pub fn router(&self) -> Option<&Router<S>> {
        match self {
            LayerMemory::None => None,
            LayerMemory::Move(r) => Some(r),
            LayerMemory::Lave(l) => Some(&l.router),
        }
    }

    /// One token's memory rows: `[1, M, width]` for MoVE, `[1, width]` for LaVE.
    pub(crate) fn token_rows(&self, bank: Option<&ValueBank<S>>, token: usize) -> Result<Option<Tensor<S>>> {
        Ok(match self {
            LayerMemory::None => None,
            LayerMemory::Move(_) => {
                let bank = bank.ok_or_else(|| Error::InvalidConfig("MoVE layer without a value bank".into()))?;
                let row = bank.token_row(token)?.to_vec();
                Some(Tensor::new(vec![1, bank.slots(), bank.width()], row)?)
            }
            LayerMemory::Lave(l) => {
                let vocab = l.bank.shape()[0];
                if token >= vocab {
                    return Err(Error::TokenOutOfRange { position: 0, token, vocab });
                }
                Some(Tensor::new(vec![1, l.bank.last_dim()], l.bank.row(token).to_vec())?)
            }
        })
    }
}

/// `batch` sequences of `len` tokens, the first at absolute position `offset`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SeqShape {
    pub batch: usize,
    pub len: usize,
    pub offset: usize,
}

impl SeqShape {
    pub fn single(len: usize) -> Self {
        SeqShape { batch: 1, len, offset: 0 }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.len
    }

    pub fn positions(&self) -> Vec<usize> {
        (0..self.rows()).map(|r| self.offset + r % self.len).collect()
    }
}

/// Output of one attention layer, with the gates it used when captured.
#[derive(Clone, Debug)]
pub struct LayerOutput<S> {
    pub out: Var,
    pub gates: Option<GateTensor<S>>,
}

/// Router gates `2σ(x·W_G)` mixed into `base` with pre-gathered memory rows.
pub(crate) fn mix_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    base: Var,
    x: Var,
    rows: Var,
    router: Var,
    layout: MixLayout,
) -> Result<(Var, Var)> {
    let z = tape.matmul(x, router)?;
    let s = tape.sigmoid(z);
    let gates = tape.scale(s, S::lit(2.0));
    let mixed = tape.gated_mix(base, rows, gates, layout)?;
    Ok((mixed, gates))
}

/// Applies a layer's memory to a value stream whose rows split into `chunks`.
pub(crate) fn apply_memory<S: Scalar>(
    tape: &mut Tape<S>,
    base: Var,
    x: Var,
    tokens: &[usize],
    memory: &MemoryVars,
    chunks: usize,
    capture: bool,
) -> Result<(Var, Option<GateTensor<S>>)> {
    let width = tape.value(base).last_dim() / chunks;
    let (bank, router, slots, std_path) = match *memory {
        MemoryVars::None => return Ok((base, None)),
        MemoryVars::Move { bank, router, slots, std_path } => (bank, router, slots, std_path),
        MemoryVars::Lave { bank, router, std_path } => (bank, router, 1, std_path),
    };
    let rows = tape.gather(bank, tokens)?;
    let layout = MixLayout { heads: chunks, slots, width, gated_std: std_path.is_gated() };
    let (mixed, gates) = mix_on_tape(tape, base, x, rows, router, layout)?;
    let captured = capture.then(|| GateTensor::from_router_rows(tape.value(gates), chunks, slots, std_path));
    Ok((mixed, captured))
}

/// Multi-head causal self-attention with optional value-stream memory.
///
/// `x` is `[batch·len, d]`; `tokens` are the token ids of those rows (used
/// only for memory retrieval).
#[allow(clippy::too_many_arguments)]
pub fn mha_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    tokens: &[usize],
    seq: SeqShape,
    heads: usize,
    attn: &AttentionVars,
    memory: &MemoryVars,
    rope: bool,
    capture: bool,
) -> Result<LayerOutput<S>> {
    let d = tape.value(x).last_dim();
    if tape.value(x).rows() != seq.rows() || tokens.len() != seq.rows() {
        return Err(Error::ShapeMismatch {
            op: "mha_forward",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![seq.batch, seq.len, tokens.len()],
        });
    }
    let head_dim = tape.value(attn.w_q).last_dim() / heads;
    let mut q = tape.matmul(x, attn.w_q)?;
    let mut k = tape.matmul(x, attn.w_k)?;
    let v = tape.matmul(x, attn.w_v)?;
    if rope {
        let pos = seq.positions();
        q = tape.rope(q, &pos, heads, head_dim)?;
        k = tape.rope(k, &pos, heads, head_dim)?;
    }
    let (v_s, gates) = apply_memory(tape, v, x, tokens, memory, heads, capture)?;
    let o = tape.attention(q, k, v_s, AttnLayout::causal(seq.batch, seq.len, heads, head_dim))?;
    let out = tape.matmul(o, attn.w_o)?;
    debug_assert_eq!(tape.value(out).last_dim(), d);
    Ok(LayerOutput { out, gates })
}

/// Read-only view of one attention layer for evaluation and decoding.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayer<'a, S> {
    pub params: &'a AttentionParams<S>,
    pub memory: &'a LayerMemory<S>,
    pub bank: Option<&'a ValueBank<S>>,
    pub rope: bool,
}

impl<'a, S: Scalar> AttentionLayer<'a, S> {
    pub fn plain(params: &'a AttentionParams<S>, memory: &'a LayerMemory<S>) -> Self {
        AttentionLayer { params, memory, bank: None, rope: false }
    }

    /// Full-sequence forward over `x: [T, d]`, returning `[T, d]` and the gates used.
    pub fn forward(&self, x: &Tensor<S>, tokens: &[usize]) -> Result<(Tensor<S>, Option<GateTensor<S>>)> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let attn = self.params.bind(&mut tape, false);
        let bank = self.bank.map(|b| tape.constant(b.tensor().clone()));
        let memory = self.memory.bind(&mut tape, bank, false)?;
        let out = mha_forward(
            &mut tape,
            xv,
            tokens,
            SeqShape::single(x.rows()),
            self.params.heads,
            &attn,
            &memory,
            self.rope,
            true,
        )?;
        Ok((tape.value(out.out).clone(), out.gates))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::memory::LaveParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn single_token_output_is_projected_value() {
        let mut r = rng(1);
        let p = AttentionParams::<f64>::random(8, 2, 1.0, &mut r).unwrap();
        let x = Tensor::randn(vec![1, 8], 1.0, &mut r);
        let (y, _) = AttentionLayer::plain(&p, &LayerMemory::None).forward(&x, &[0]).unwrap();
        let want = x.matmul(&p.w_v).unwrap().matmul(&p.w_o).unwrap();
        assert!(y.max_abs_diff(&want) <= 1e-14);
    }

    #[test]
    fn identity_projections_average_one_hot_rows() {
        // One head, identity Q/K/V/O: row 1 attends to x0, x1 with softmax of
        // scores [x1·x0, x1·x1] / √d.
        let d = 3;
        let eye = Tensor::<f64>::from_fn(vec![d, d], |i| if i / d == i % d { 1.0 } else { 0.0 });
        let p = AttentionParams { w_q: eye.clone(), w_k: eye.clone(), w_v: eye.clone(), w_o: eye, heads: 1, head_dim: d };
        let x = Tensor::new(vec![2, d], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let (y, _) = AttentionLayer::plain(&p, &LayerMemory::None).forward(&x, &[0, 1]).unwrap();
        let s = 1.0 / (d as f64).sqrt();
        let w0 = 1.0 / (1.0 + s.exp());
        let want = [1.0, 0.0, 0.0, w0, 1.0 - w0, 0.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() <= 1e-15, "{y:?}");
        }
    }

    #[test]
    fn zeroed_memory_reduces_to_standard_exactly() {
        let mut r = rng(2);
        let (d, h, vocab) = (8, 2, 11);
        let p = AttentionParams::<f64>::random(d, h, 1.0, &mut r).unwrap();
        let x = Tensor::randn(vec![5, d], 1.0, &mut r);
        let tokens = [3, 1, 4, 1, 5];
        let (base, _) = AttentionLayer { rope: true, ..AttentionLayer::plain(&p, &LayerMemory::None) }
            .forward(&x, &tokens)
            .unwrap();

        let bank = ValueBank::zeros(vocab, 3, d);
        let mv = LayerMemory::Move(Router::zeros(d, h, 3, StdPath::Gated));
        let layer = AttentionLayer { params: &p, memory: &mv, bank: Some(&bank), rope: true };
        let (y, gates) = layer.forward(&x, &tokens).unwrap();
        assert_eq!(y, base);
        assert!(gates.unwrap().values().data().iter().all(|&g| g == 1.0));

        for std_path in [StdPath::Ungated, StdPath::Gated] {
            let lave = LayerMemory::Lave(LaveParams::zeros(vocab, d, d, h, std_path));
            let layer = AttentionLayer { params: &p, memory: &lave, bank: None, rope: true };
            assert_eq!(layer.forward(&x, &tokens).unwrap().0, base);
        }
    }

    #[test]
    fn later_tokens_do_not_affect_earlier_outputs() {
        let mut r = rng(3);
        let (d, h, vocab) = (8, 2, 9);
        let p = AttentionParams::<f64>::random(d, h, 1.0, &mut r).unwrap();
        let bank = ValueBank::random(vocab, 2, d, 1.0, &mut r);
        let mut router = Router::zeros(d, h, 2, StdPath::Gated);
        router.weight = Tensor::randn(router.weight.shape().to_vec(), 1.0, &mut r);
        let mv = LayerMemory::Move(router);
        let layer = AttentionLayer { params: &p, memory: &mv, bank: Some(&bank), rope: true };
        let x = Tensor::randn(vec![6, d], 1.0, &mut r);
        let (y, _) = layer.forward(&x, &[1, 2, 3, 4, 5, 6]).unwrap();
        let mut x2 = x.clone();
        for v in &mut x2.data_mut()[5 * d..] {
            *v += 3.0;
        }
        let (y2, _) = layer.forward(&x2, &[1, 2, 3, 4, 5, 0]).unwrap();
        for t in 0..5 {
            for (a, b) in y.row(t).iter().zip(y2.row(t)) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }
}
