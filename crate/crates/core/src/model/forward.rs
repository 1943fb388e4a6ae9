use super::params::{BoundAttention, BoundModel, ModelParams};
use crate::attention::{mha_forward, GateTensor, SeqShape};
use crate::error::{Error, Result};
use crate::mla::mla_forward;
use crate::numerics::{Scalar, Tape, Tensor, Var};

/// Per-layer gates; `None` for layers without memory.
pub type LayerGates<S> = Vec<Option<GateTensor<S>>>;

pub const NORM_EPS: f64 = 1e-6;

/// Logits node plus the per-layer gates when captured (`None` for layers
/// without memory).
#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    pub logits: Var,
    pub gates: LayerGates<S>,
}

/// Builds the full network on `tape` for `tokens` laid out as `seq`.
pub fn forward_tape<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &BoundModel,
    tokens: &[usize],
    seq: SeqShape,
    capture: bool,
) -> Result<ForwardOutput<S>> {
    let c = &params.config;
    if tokens.len() != seq.rows() || seq.len == 0 {
        return Err(Error::ShapeMismatch { op: "forward", lhs: vec![tokens.len()], rhs: vec![seq.batch, seq.len] });
    }
    if seq.offset + seq.len > c.max_len {
        return Err(Error::InvalidConfig(format!(
            "positions up to {} exceed the context length {}",
            seq.offset + seq.len,
            c.max_len
        )));
    }
    let mut h = tape.gather(bound.embed, tokens)?;
    if let Some(pos) = bound.pos {
        let p = tape.gather(pos, &seq.positions())?;
        h = tape.add(h, p)?;
    }
    let mut gates = Vec::with_capacity(bound.blocks.len());
    for b in &bound.blocks {
        let a = tape.rms_norm(h, b.norm1, NORM_EPS)?;
        let out = match &b.attn {
            BoundAttention::Mha { vars, heads } => mha_forward(tape, a, tokens, seq, *heads, vars, &b.memory, true, capture)?,
            BoundAttention::Mla(vars) => mla_forward(tape, a, tokens, seq, vars, &b.memory, capture)?,
        };
        gates.push(out.gates);
        h = tape.add(h, out.out)?;
        let f = tape.rms_norm(h, b.norm2, NORM_EPS)?;
        let up = tape.matmul(f, b.w_up)?;
        let act = tape.gelu(up);
        let down = tape.matmul(act, b.w_down)?;
        h = tape.add(h, down)?;
    }
    let h = tape.rms_norm(h, bound.final_norm, NORM_EPS)?;
    let logits = tape.matmul(h, bound.head)?;
    Ok(ForwardOutput { logits, gates })
}

/// Summed next-token loss in nats over a batch; `targets[i]` is the token
/// following `inputs[i]`. Optional per-position weights select which
/// targets count.
pub fn sequence_loss<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ModelParams<S>,
    bound: &BoundModel,
    inputs: &[usize],
    targets: &[usize],
    weights: Option<&[S]>,
    seq: SeqShape,
) -> Result<Var> {
    let out = forward_tape(tape, params, bound, inputs, seq, false)?;
    tape.cross_entropy(out.logits, targets, weights)
}

impl<S: Scalar> ModelParams<S> {
    /// Logits `[T, N_vocab]` for one sequence starting at position 0.
    pub fn forward_logits(&self, tokens: &[usize]) -> Result<Tensor<S>> {
        Ok(self.forward_inner(tokens, false)?.0)
    }

    /// Logits plus every memory layer's gates.
    pub fn forward_with_gates(&self, tokens: &[usize]) -> Result<(Tensor<S>, LayerGates<S>)> {
        self.forward_inner(tokens, true)
    }

    fn forward_inner(&self, tokens: &[usize], capture: bool) -> Result<(Tensor<S>, LayerGates<S>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let out = forward_tape(&mut tape, self, &bound, tokens, SeqShape::single(tokens.len()), capture)?;
        let gates = out.gates;
        let logits = tape.value(out.logits).clone();
        Ok((logits, gates))
    }
}
