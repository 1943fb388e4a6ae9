//! Multi-head latent attention: keys and values share one low-rank latent per
//! token, value memory is injected into that latent, and the value
//! up-projection is folded into the output projection.

use std::hash::{Hash, Hasher};

use rand::Rng;

use crate::attention::{
    apply_memory, mix_on_tape, mix_values_move, GateTensor, LayerCache, LayerMemory, LayerOutput, MemoryVars,
    RetrievedMemory, SeqShape, ValueBank,
};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, MixLayout, Scalar, Tape, Tensor, Var};

/// Which latent the key up-projection reads.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KeySource {
    /// Keys from the memory-augmented latent `c_S`, so only `c_S` is cached.
    #[default]
    Augmented,
    /// Keys from the raw latent `c`; the cache then also keeps `c`.
    Raw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlaParams<S> {
    /// `d → d_c`
    pub w_dkv: Tensor<S>,
    /// `d_c → H·d_h`
    pub w_uk: Tensor<S>,
    /// `d_c → H·d_h`
    pub w_uv: Tensor<S>,
    /// `d → H·d_h`, head `h` in columns `h·d_h ..`
    pub w_q: Tensor<S>,
    /// `H·d_h → d`
    pub w_o: Tensor<S>,
    pub heads: usize,
    pub head_dim: usize,
    /// Number of latent chunks the memory mixture gates independently.
    pub kv_heads: usize,
    pub key_source: KeySource,
}

impl<S: Scalar> MlaParams<S> {
    pub fn random<R: Rng + ?Sized>(
        d_model: usize,
        heads: usize,
        latent_dim: usize,
        kv_heads: usize,
        out_scale: f64,
        rng: &mut R,
    ) -> Result<Self> {
        Self::check_dims(d_model, heads, latent_dim, kv_heads)?;
        let inner = d_model;
        let std_d = 1.0 / (d_model as f64).sqrt();
        let std_c = 1.0 / (latent_dim as f64).sqrt();
        Ok(MlaParams {
            w_dkv: Tensor::randn(vec![d_model, latent_dim], std_d, rng),
            w_uk: Tensor::randn(vec![latent_dim, inner], std_c, rng),
            w_uv: Tensor::randn(vec![latent_dim, inner], std_c, rng),
            w_q: Tensor::randn(vec![d_model, inner], std_d, rng),
            w_o: Tensor::randn(vec![inner, d_model], std_d * out_scale, rng),
            heads,
            head_dim: d_model / heads,
            kv_heads,
            key_source: KeySource::Augmented,
        })
    }

    pub(crate) fn check_dims(d_model: usize, heads: usize, latent_dim: usize, kv_heads: usize) -> Result<()> {
        if heads == 0 || !d_model.is_multiple_of(heads) {
            return Err(Error::InvalidConfig(format!("width {d_model} is not divisible by {heads} heads")));
        }
        if kv_heads == 0 || latent_dim == 0 || !latent_dim.is_multiple_of(kv_heads) {
            return Err(Error::InvalidConfig(format!(
                "latent width {latent_dim} does not split into {kv_heads} chunks"
            )));
        }
        if latent_dim > d_model {
            return Err(Error::InvalidConfig(format!("latent width {latent_dim} exceeds model width {d_model}")));
        }
        Ok(())
    }

    pub fn d_model(&self) -> usize {
        self.w_dkv.shape()[0]
    }

    pub fn latent_dim(&self) -> usize {
        self.w_dkv.shape()[1]
    }

    pub fn chunk_width(&self) -> usize {
        self.latent_dim() / self.kv_heads
    }

    pub fn bind(&self, tape: &mut Tape<S>, trainable: bool) -> MlaVars {
        let mut leaf = |t: &Tensor<S>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        MlaVars {
            w_dkv: leaf(&self.w_dkv),
            w_uk: leaf(&self.w_uk),
            w_uv: leaf(&self.w_uv),
            w_q: leaf(&self.w_q),
            w_o: leaf(&self.w_o),
            heads: self.heads,
            head_dim: self.head_dim,
            kv_heads: self.kv_heads,
            key_source: self.key_source,
        }
    }

    fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for t in [&self.w_uv, &self.w_o] {
            t.shape().hash(&mut h);
            for x in t.data() {
                x.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct MlaVars {
    pub w_dkv: Var,
    pub w_uk: Var,
    pub w_uv: Var,
    pub w_q: Var,
    pub w_o: Var,
    pub heads: usize,
    pub head_dim: usize,
    pub kv_heads: usize,
    pub key_source: KeySource,
}

/// Raw and memory-augmented latents for a sequence, both `[T, d_c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState<S> {
    pub c: Tensor<S>,
    pub c_s: Tensor<S>,
    pub kv_heads: usize,
}

impl<S: Scalar> LatentState<S> {
    /// A state without memory: `c_S = c`.
    pub fn plain(c: Tensor<S>, kv_heads: usize) -> Self {
        LatentState { c_s: c.clone(), c, kv_heads }
    }

    /// `c_S` viewed as `[T, H_kv, d_c / H_kv]`.
    pub fn chunks(&self) -> Result<Tensor<S>> {
        let (t, dc) = (self.c_s.rows(), self.c_s.last_dim());
        self.c_s.reshape(vec![t, self.kv_heads, dc / self.kv_heads])
    }
}

/// `c = X·W_DKV`.
pub fn compress_latent<S: Scalar>(x: &Tensor<S>, w_dkv: &Tensor<S>) -> Result<Tensor<S>> {
    x.matmul(w_dkv)
}

/// Chunk-wise mixture of the latent with retrieved latent memory, then
/// concatenation back to `[T, d_c]`.
///
/// `memory` is `[T, M, H_kv, d_c/H_kv]` and `gates` `[T, H_kv, M+1]`.
pub fn inject_latent_memory<S: Scalar>(
    c: &Tensor<S>,
    memory: &RetrievedMemory<S>,
    gates: &GateTensor<S>,
) -> Result<LatentState<S>> {
    let kv_heads = gates.heads();
    let (t, dc) = (c.rows(), c.last_dim());
    if c.rank() != 2 || kv_heads == 0 || dc % kv_heads != 0 {
        return Err(Error::ShapeMismatch {
            op: "inject_latent_memory",
            lhs: c.shape().to_vec(),
            rhs: gates.values().shape().to_vec(),
        });
    }
    let chunked = c.reshape(vec![t, kv_heads, dc / kv_heads])?;
    let mixed = mix_values_move(&chunked, memory, gates)?;
    Ok(LatentState { c: c.clone(), c_s: mixed.into_reshape(vec![t, dc])?, kv_heads })
}

/// Per-head products `W_UV⁽ʰ⁾·W_O⁽ʰ⁾` stacked as `[H·d_c, d]`, tagged with
/// the parameters they were built from.
#[derive(Clone, Debug, PartialEq)]
pub struct FusedOutput<S> {
    matrix: Tensor<S>,
    fingerprint: u64,
}

impl<S: Scalar> FusedOutput<S> {
    pub fn matrix(&self) -> &Tensor<S> {
        &self.matrix
    }

    /// Rejects use with parameters other than the ones it was fused from.
    pub fn check(&self, params: &MlaParams<S>) -> Result<()> {
        if self.fingerprint != params.fingerprint() {
            return Err(Error::StaleFusion);
        }
        Ok(())
    }
}

pub fn fuse_output<S: Scalar>(params: &MlaParams<S>) -> Result<FusedOutput<S>> {
    let (h, dh, dc, d) = (params.heads, params.head_dim, params.latent_dim(), params.d_model());
    let uv = params.w_uv.reshape(vec![dc, h, dh])?.permute(&[1, 0, 2])?;
    let o = params.w_o.reshape(vec![h, dh, d])?;
    let matrix = uv.matmul(&o)?.into_reshape(vec![h * dc, d])?;
    Ok(FusedOutput { matrix, fingerprint: params.fingerprint() })
}

fn check_weights<S: Scalar>(c_s: &Tensor<S>, weights: &Tensor<S>, heads: usize) -> Result<()> {
    let t = c_s.rows();
    if weights.shape() != [heads, t, t] {
        return Err(Error::ShapeMismatch {
            op: "latent output",
            lhs: c_s.shape().to_vec(),
            rhs: weights.shape().to_vec(),
        });
    }
    Ok(())
}

/// `O = Σ_h (A_h·c_S)·(W_UV⁽ʰ⁾W_O⁽ʰ⁾)` using a precomputed fused matrix.
///
/// `weights` are attention probabilities `[H, T, T]`.
pub fn absorbed_output<S: Scalar>(
    c_s: &Tensor<S>,
    weights: &Tensor<S>,
    params: &MlaParams<S>,
    fused: &FusedOutput<S>,
) -> Result<Tensor<S>> {
    fused.check(params)?;
    let h = params.heads;
    check_weights(c_s, weights, h)?;
    let (t, dc) = (c_s.rows(), c_s.last_dim());
    // [H, T, d_c] -> [T, H·d_c]
    let mixed = weights.matmul(c_s)?.permute(&[1, 0, 2])?.into_reshape(vec![t, h * dc])?;
    mixed.matmul(&fused.matrix)
}

/// Reference path: materializes `V = c_S·W_UV`, attends per head, then `W_O`.
pub fn materialized_output<S: Scalar>(c_s: &Tensor<S>, weights: &Tensor<S>, params: &MlaParams<S>) -> Result<Tensor<S>> {
    let (h, dh) = (params.heads, params.head_dim);
    check_weights(c_s, weights, h)?;
    let t = c_s.rows();
    let v = c_s.matmul(&params.w_uv)?.into_reshape(vec![t, h, dh])?.permute(&[1, 0, 2])?;
    let o = weights.matmul(&v)?.permute(&[1, 0, 2])?.into_reshape(vec![t, h * dh])?;
    o.matmul(&params.w_o)
}

/// Causal attention probabilities `[H, T, T]` of queries `X·W_Q` against keys
/// up-projected from `latent`.
pub fn latent_attention_weights<S: Scalar>(x: &Tensor<S>, latent: &Tensor<S>, params: &MlaParams<S>) -> Result<Tensor<S>> {
    let (h, dh, t) = (params.heads, params.head_dim, x.rows());
    let q = x.matmul(&params.w_q)?.into_reshape(vec![t, h, dh])?.permute(&[1, 0, 2])?;
    let k = latent.matmul(&params.w_uk)?.into_reshape(vec![t, h, dh])?.permute(&[1, 2, 0])?;
    let mut scores = q.matmul(&k)?.scale(S::lit(1.0 / (dh as f64).sqrt()));
    for (r, row) in scores.data_mut().chunks_mut(t).enumerate() {
        for x in row.iter_mut().skip(r % t + 1) {
            *x = S::neg_infinity();
        }
    }
    Ok(scores.softmax_lastdim())
}

/// `W_UV·W_O` folded per head on the tape, `[H·d_c, d]`.
fn fused_on_tape<S: Scalar>(tape: &mut Tape<S>, vars: &MlaVars) -> Result<Var> {
    let (h, dh) = (vars.heads, vars.head_dim);
    let (dc, d) = (tape.shape(vars.w_uv)[0], tape.shape(vars.w_o)[1]);
    let uv = tape.reshape(vars.w_uv, vec![dc, h, dh])?;
    let uv = tape.permute(uv, &[1, 0, 2])?;
    let o = tape.reshape(vars.w_o, vec![h, dh, d])?;
    let fused = tape.matmul(uv, o)?;
    tape.reshape(fused, vec![h * dc, d])
}

/// Latent attention over `x: [batch·len, d]`.
///
/// Keys are materialized from the chosen latent; values go through the
/// absorbed path, so no `[T, H·d_h]` value tensor is ever formed.
pub fn mla_forward<S: Scalar>(
    tape: &mut Tape<S>,
    x: Var,
    tokens: &[usize],
    seq: SeqShape,
    vars: &MlaVars,
    memory: &MemoryVars,
    capture: bool,
) -> Result<LayerOutput<S>> {
    if tape.value(x).rows() != seq.rows() || tokens.len() != seq.rows() {
        return Err(Error::ShapeMismatch {
            op: "mla_forward",
            lhs: tape.shape(x).to_vec(),
            rhs: vec![seq.batch, seq.len, tokens.len()],
        });
    }
    let c = tape.matmul(x, vars.w_dkv)?;
    let (c_s, gates) = apply_memory(tape, c, x, tokens, memory, vars.kv_heads, capture)?;
    let key_latent = match vars.key_source {
        KeySource::Augmented => c_s,
        KeySource::Raw => c,
    };
    let q = tape.matmul(x, vars.w_q)?;
    let k = tape.matmul(key_latent, vars.w_uk)?;
    let dc = tape.shape(c)[1];
    let layout = AttnLayout { v_heads: 1, value_dim: dc, ..AttnLayout::causal(seq.batch, seq.len, vars.heads, vars.head_dim) };
    let mixed = tape.attention(q, k, c_s, layout)?;
    let fused = fused_on_tape(tape, vars)?;
    let out = tape.matmul(mixed, fused)?;
    Ok(LayerOutput { out, gates })
}

/// Read-only latent attention layer for evaluation and decoding.
#[derive(Clone, Copy, Debug)]
pub struct MlaLayer<'a, S> {
    pub params: &'a MlaParams<S>,
    pub memory: &'a LayerMemory<S>,
    /// Global latent bank `[N_vocab, M, d_c]` for MoVE layers.
    pub bank: Option<&'a ValueBank<S>>,
    pub fused: &'a FusedOutput<S>,
}

impl<S: Scalar> MlaLayer<'_, S> {
    pub fn new_cache(&self) -> LayerCache<S> {
        LayerCache::latent(self.params.latent_dim(), self.params.key_source == KeySource::Raw)
    }

    /// Full-sequence forward over `x: [T, d]`.
    pub fn forward(&self, x: &Tensor<S>, tokens: &[usize]) -> Result<(Tensor<S>, Option<GateTensor<S>>)> {
        self.fused.check(self.params)?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.params.bind(&mut tape, false);
        let bank = self.bank.map(|b| tape.constant(b.tensor().clone()));
        let memory = self.memory.bind(&mut tape, bank, false)?;
        let out = mla_forward(&mut tape, xv, tokens, SeqShape::single(x.rows()), &vars, &memory, true)?;
        Ok((tape.value(out.out).clone(), out.gates))
    }

    /// One decode step that caches only the latent row(s) of the new token.
    ///
    /// Queries are absorbed into the latent space (`q̃_h = q_h·W_UK⁽ʰ⁾ᵀ`) and
    /// the output uses the fused matrix.
    pub fn decode_step(
        &self,
        cache: &mut LayerCache<S>,
        x_t: &Tensor<S>,
        token: usize,
        position: usize,
    ) -> Result<(Tensor<S>, Option<GateTensor<S>>)> {
        self.fused.check(self.params)?;
        cache.check_position(position)?;
        let LayerCache::Latent { latent, raw, width, len } = cache else {
            return Err(Error::InvalidConfig("latent layer given a key/value cache".into()));
        };
        let p = self.params;
        let (h, dh, dc) = (p.heads, p.head_dim, p.latent_dim());
        if *width != dc || raw.is_some() != (p.key_source == KeySource::Raw) {
            return Err(Error::InvalidConfig("latent cache does not match the layer".into()));
        }
        let c = compress_latent(x_t, &p.w_dkv)?;
        let mut c_s = c.clone();
        let mut gates = None;
        if let (Some(router), Some(rows)) = (self.memory.router(), self.memory.token_rows(self.bank, token)?) {
            let mut tape = Tape::new();
            let (cv, xv) = (tape.constant(c.clone()), tape.constant(x_t.clone()));
            let (rows, w_g) = (tape.constant(rows), tape.constant(router.weight.clone()));
            let layout = MixLayout {
                heads: p.kv_heads,
                slots: router.slots,
                width: p.chunk_width(),
                gated_std: router.std_path.is_gated(),
            };
            let (mixed, g) = mix_on_tape(&mut tape, cv, xv, rows, w_g, layout)?;
            gates = Some(GateTensor::from_router_rows(tape.value(g), p.kv_heads, router.slots, router.std_path));
            c_s = tape.value(mixed).clone();
        }
        latent.extend_from_slice(c_s.data());
        if let Some(raw) = raw.as_mut() {
            raw.extend_from_slice(c.data());
        }
        *len += 1;

        // q̃[h] = q[h]·W_UK[:, h]ᵀ, a [1, H·d_c] row.
        let q = x_t.matmul(&p.w_q)?.into_reshape(vec![h, 1, dh])?;
        let uk_t = p.w_uk.reshape(vec![dc, h, dh])?.permute(&[1, 2, 0])?;
        let q_abs = q.matmul(&uk_t)?.into_reshape(vec![1, h * dc])?;

        let mut tape = Tape::new();
        let qv = tape.constant(q_abs);
        let keys = raw.as_ref().unwrap_or(latent);
        let kv = tape.constant(Tensor::new(vec![*len, dc], keys.clone())?);
        let vv = tape.constant(Tensor::new(vec![*len, dc], latent.clone())?);
        let layout = AttnLayout {
            batch: 1,
            q_len: 1,
            kv_len: *len,
            q_offset: position,
            heads: h,
            k_heads: 1,
            v_heads: 1,
            key_dim: dc,
            value_dim: dc,
            scale: 1.0 / (dh as f64).sqrt(),
        };
        let o = tape.attention(qv, kv, vv, layout)?;
        let y = tape.value(o).matmul(&self.fused.matrix)?;
        Ok((y, gates))
    }
}
