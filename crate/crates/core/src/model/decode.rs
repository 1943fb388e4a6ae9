use rand::distributions::{Distribution, WeightedIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::forward::{LayerGates, NORM_EPS};
use super::params::{BlockAttention, ModelParams};
use crate::attention::{AttentionLayer, KvCache, LayerCache};
use crate::error::{Error, Result};
use crate::mla::{fuse_output, FusedOutput, MlaLayer};
use crate::numerics::{argmax, Scalar, Tape, Tensor};

/// Incremental decoder holding one cache per layer.
#[derive(Clone, Debug)]
pub struct Decoder<'a, S> {
    params: &'a ModelParams<S>,
    cache: KvCache<S>,
    fused: Vec<Option<FusedOutput<S>>>,
}

impl<'a, S: Scalar> Decoder<'a, S> {
    pub fn new(params: &'a ModelParams<S>) -> Result<Self> {
        let mut layers = Vec::with_capacity(params.blocks.len());
        let mut fused = Vec::with_capacity(params.blocks.len());
        for b in &params.blocks {
            match &b.attn {
                BlockAttention::Mha(a) => {
                    layers.push(LayerCache::mha(a.heads * a.head_dim));
                    fused.push(None);
                }
                BlockAttention::Mla(m) => {
                    layers.push(LayerCache::latent(m.latent_dim(), m.key_source == crate::mla::KeySource::Raw));
                    fused.push(Some(fuse_output(m)?));
                }
            }
        }
        Ok(Decoder { params, cache: KvCache::new(layers), fused })
    }

    /// Positions decoded so far.
    pub fn position(&self) -> usize {
        self.cache.len()
    }

    pub fn cache(&self) -> &KvCache<S> {
        &self.cache
    }

    /// Feeds one token and returns its next-token logits `[N_vocab]` and the
    /// per-layer gates.
    pub fn step(&mut self, token: usize) -> Result<(Vec<S>, LayerGates<S>)> {
        let p = self.params;
        let pos = self.position();
        if pos >= p.config.max_len {
            return Err(Error::InvalidConfig(format!("context length {} exhausted", p.config.max_len)));
        }
        if token >= p.config.vocab {
            return Err(Error::TokenOutOfRange { position: pos, token, vocab: p.config.vocab });
        }
        let mut x = Tensor::new(vec![1, p.config.d_model], p.embed.row(token).to_vec())?;
        if let Some(pe) = &p.pos {
            x = x.add(&Tensor::new(vec![1, p.config.d_model], pe.row(pos).to_vec())?)?;
        }
        let mut gates = Vec::with_capacity(p.blocks.len());
        for (i, b) in p.blocks.iter().enumerate() {
            let mut tape = Tape::new();
            let xv = tape.constant(x);
            let g1 = tape.constant(b.norm1.clone());
            let a = tape.rms_norm(xv, g1, NORM_EPS)?;
            let a_val = tape.value(a).clone();
            let (attn_out, g) = match &b.attn {
                BlockAttention::Mha(params) => {
                    let layer = AttentionLayer { params, memory: &b.memory, bank: p.bank.as_ref(), rope: true };
                    layer.decode_step(&mut self.cache.layers[i], &a_val, token, pos)?
                }
                BlockAttention::Mla(params) => {
                    let fused = self.fused[i].as_ref().expect("latent layers carry a fused projection");
                    let layer = MlaLayer { params, memory: &b.memory, bank: p.bank.as_ref(), fused };
                    layer.decode_step(&mut self.cache.layers[i], &a_val, token, pos)?
                }
            };
            gates.push(g);
            let o = tape.constant(attn_out);
            let h = tape.add(xv, o)?;
            let g2 = tape.constant(b.norm2.clone());
            let f = tape.rms_norm(h, g2, NORM_EPS)?;
            let w_up = tape.constant(b.w_up.clone());
            let up = tape.matmul(f, w_up)?;
            let act = tape.gelu(up);
            let w_down = tape.constant(b.w_down.clone());
            let down = tape.matmul(act, w_down)?;
            let h = tape.add(h, down)?;
            x = tape.value(h).clone();
        }
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let gn = tape.constant(p.final_norm.clone());
        let n = tape.rms_norm(xv, gn, NORM_EPS)?;
        let head = tape.constant(p.head.clone());
        let logits = tape.matmul(n, head)?;
        Ok((tape.value(logits).data().to_vec(), gates))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sampling {
    Greedy,
    /// Samples from `softmax(logits / temperature)` with a seeded stream.
    Temperature { temperature: f64, seed: u64 },
}

/// Feeds `prompt` through a cached decoder, then extends it by `steps` tokens.
pub fn generate<S: Scalar>(params: &ModelParams<S>, prompt: &[usize], steps: usize, sampling: Sampling) -> Result<Vec<usize>> {
    let Some((&last, head)) = prompt.split_last() else {
        return Err(Error::InvalidConfig("generation needs a nonempty prompt".into()));
    };
    let mut out = prompt.to_vec();
    if steps == 0 {
        return Ok(out);
    }
    if prompt.len() + steps - 1 > params.config.max_len {
        return Err(Error::InvalidConfig(format!(
            "prompt of {} plus {steps} steps exceeds the context length {}",
            prompt.len(),
            params.config.max_len
        )));
    }
    let mut rng = match sampling {
        Sampling::Temperature { temperature, seed } if temperature > 0.0 => Some((temperature, ChaCha8Rng::seed_from_u64(seed))),
        Sampling::Temperature { .. } => return Err(Error::InvalidConfig("temperature must be positive".into())),
        Sampling::Greedy => None,
    };
    let mut dec = Decoder::new(params)?;
    for &t in head {
        dec.step(t)?;
    }
    let mut next = last;
    for _ in 0..steps {
        let (logits, _) = dec.step(next)?;
        next = match &mut rng {
            None => argmax(&logits),
            Some((temp, rng)) => sample(&logits, *temp, rng)?,
        };
        out.push(next);
    }
    Ok(out)
}

fn sample<S: Scalar>(logits: &[S], temperature: f64, rng: &mut ChaCha8Rng) -> Result<usize> {
    let max = logits.iter().map(|l| l.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| ((l.as_f64() - max) / temperature).exp()).collect();
    let dist = WeightedIndex::new(&weights).map_err(|e| Error::NonFinite(format!("sampling weights: {e}")))?;
    Ok(dist.sample(rng))
}
