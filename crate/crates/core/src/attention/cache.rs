use super::memory::GateTensor;
use super::mha::{mix_on_tape, AttentionLayer, LayerMemory};
use crate::error::{Error, Result};
use crate::numerics::{AttnLayout, MixLayout, Scalar, Tape, Tensor};

/// Append-only per-layer decode state.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerCache<S> {
    /// Rotated keys and memory-mixed values, one `H·d_h` row per position.
    Mha { keys: Vec<S>, values: Vec<S>, width: usize, len: usize },
    /// Augmented latent rows (`d_c` each); raw latents too when keys read them.
    Latent { latent: Vec<S>, raw: Option<Vec<S>>, width: usize, len: usize },
}

impl<S: Scalar> LayerCache<S> {
    pub fn mha(width: usize) -> Self {
        LayerCache::Mha { keys: Vec::new(), values: Vec::new(), width, len: 0 }
    }

    pub fn latent(width: usize, keep_raw: bool) -> Self {
        LayerCache::Latent { latent: Vec::new(), raw: keep_raw.then(Vec::new), width, len: 0 }
    }

    pub fn len(&self) -> usize {
        match self {
            LayerCache::Mha { len, .. } | LayerCache::Latent { len, .. } => *len,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Floats stored per cached position.
    pub fn floats_per_step(&self) -> usize {
        match self {
            LayerCache::Mha { width, .. } => 2 * width,
            LayerCache::Latent { width, raw, .. } => width * (1 + usize::from(raw.is_some())),
        }
    }

    /// Cached mixed values `V_S` as `[len, H·d_h]` (MHA caches only).
    pub fn values(&self) -> Option<Tensor<S>> {
        match self {
            LayerCache::Mha { values, width, len, .. } => Tensor::new(vec![*len, *width], values.clone()).ok(),
            LayerCache::Latent { .. } => None,
        }
    }

    /// Cached augmented latents `[len, d_c]` (latent caches only).
    pub fn latents(&self) -> Option<Tensor<S>> {
        match self {
            LayerCache::Latent { latent, width, len, .. } => Tensor::new(vec![*len, *width], latent.clone()).ok(),
            LayerCache::Mha { .. } => None,
        }
    }

    pub(crate) fn check_position(&self, position: usize) -> Result<()> {
        if self.len() != position {
            return Err(Error::CacheMismatch { expected: position, got: self.len() });
        }
        Ok(())
    }
}

/// Decode state for a whole model.
#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<S> {
    pub layers: Vec<LayerCache<S>>,
}

impl<S: Scalar> KvCache<S> {
    pub fn new(layers: Vec<LayerCache<S>>) -> Self {
        KvCache { layers }
    }

    /// Number of decoded positions.
    pub fn len(&self) -> usize {
        self.layers.first().map_or(0, LayerCache::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn floats_per_step(&self) -> usize {
        self.layers.iter().map(LayerCache::floats_per_step).sum()
    }
}

impl<S: Scalar> AttentionLayer<'_, S> {
    /// One incremental step: projects only the new position, appends its key
    /// and mixed value to `cache`, and attends over every cached position.
    pub fn decode_step(
        &self,
        cache: &mut LayerCache<S>,
        x_t: &Tensor<S>,
        token: usize,
        position: usize,
    ) -> Result<(Tensor<S>, Option<GateTensor<S>>)> {
        cache.check_position(position)?;
        let LayerCache::Mha { keys, values, width, len } = cache else {
            return Err(Error::InvalidConfig("attention layer given a latent cache".into()));
        };
        let p = self.params;
        let (heads, head_dim) = (p.heads, p.head_dim);
        let mut tape = Tape::new();
        let x = tape.constant(x_t.clone());
        let attn = p.bind(&mut tape, false);
        let mut q = tape.matmul(x, attn.w_q)?;
        let mut k = tape.matmul(x, attn.w_k)?;
        let mut v = tape.matmul(x, attn.w_v)?;
        if self.rope {
            q = tape.rope(q, &[position], heads, head_dim)?;
            k = tape.rope(k, &[position], heads, head_dim)?;
        }
        let mut gates = None;
        if let (Some(router), Some(rows)) = (self.memory.router(), self.memory.token_rows(self.bank, token)?) {
            let rows = tape.constant(rows);
            let w_g = tape.constant(router.weight.clone());
            let layout = MixLayout { heads, slots: router.slots, width: head_dim, gated_std: router.std_path.is_gated() };
            let (mixed, g) = mix_on_tape(&mut tape, v, x, rows, w_g, layout)?;
            gates = Some(GateTensor::from_router_rows(tape.value(g), heads, router.slots, router.std_path));
            v = mixed;
        }
        keys.extend_from_slice(tape.value(k).data());
        values.extend_from_slice(tape.value(v).data());
        *len += 1;
        let all_k = tape.constant(Tensor::new(vec![*len, *width], keys.clone())?);
        let all_v = tape.constant(Tensor::new(vec![*len, *width], values.clone())?);
        let layout = AttnLayout { q_len: 1, kv_len: *len, q_offset: position, ..AttnLayout::causal(1, 1, heads, head_dim) };
        let o = tape.attention(q, all_k, all_v, layout)?;
        let y = tape.matmul(o, attn.w_o)?;
        Ok((tape.value(y).clone(), gates))
    }
}

impl<S: Scalar> LayerMemory<S> {
    pub fn is_none(&self) -> bool {
        matches!(self, LayerMemory::None)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::memory::{LaveParams, Router, StdPath, ValueBank};
    use crate::attention::mha::AttentionParams;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_router(d: usize, h: usize, slots: usize, std_path: StdPath, r: &mut ChaCha8Rng) -> Router<f64> {
        let mut router = Router::zeros(d, h, slots, std_path);
        router.weight = Tensor::randn(router.weight.shape().to_vec(), 0.5, r);
        router
    }

    #[test]
    fn incremental_decode_matches_full_forward() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let (d, h, vocab, t) = (8, 2, 13, 7);
        let p = AttentionParams::<f64>::random(d, h, 1.0, &mut r).unwrap();
        let bank = ValueBank::random(vocab, 3, d, 1.0, &mut r);
        let mut lave = LaveParams::zeros(vocab, d, d, h, StdPath::Gated);
        lave.bank = Tensor::randn(vec![vocab, d], 1.0, &mut r);
        lave.router = random_router(d, h, 1, StdPath::Gated, &mut r);
        let memories = [
            LayerMemory::None,
            LayerMemory::Move(random_router(d, h, 3, StdPath::Gated, &mut r)),
            LayerMemory::Move(random_router(d, h, 3, StdPath::Ungated, &mut r)),
            LayerMemory::Lave(lave),
        ];
        let x = Tensor::randn(vec![t, d], 1.0, &mut r);
        let tokens: Vec<usize> = (0..t).map(|i| (i * 5) % vocab).collect();
        for memory in &memories {
            let layer = AttentionLayer { params: &p, memory, bank: Some(&bank), rope: true };
            let (full, full_gates) = layer.forward(&x, &tokens).unwrap();
            let mut cache = LayerCache::mha(d);
            for (pos, &tok) in tokens.iter().enumerate() {
                let xt = Tensor::new(vec![1, d], x.row(pos).to_vec()).unwrap();
                let (y, gates) = layer.decode_step(&mut cache, &xt, tok, pos).unwrap();
                for (a, b) in y.data().iter().zip(full.row(pos)) {
                    assert!((a - b).abs() <= 1e-10);
                }
                if let (Some(g), Some(fg)) = (gates, &full_gates) {
                    for hh in 0..h {
                        for i in 0..=g.slots() {
                            assert!((g.get(0, hh, i) - fg.get(pos, hh, i)).abs() <= 1e-12);
                        }
                    }
                }
            }
            assert_eq!(cache.len(), t);
            assert!(matches!(
                layer.decode_step(&mut cache, &Tensor::zeros(vec![1, d]), 0, 3),
                Err(Error::CacheMismatch { expected: 3, got: 7 })
            ));
        }
    }

    #[test]
    fn cached_values_survive_router_changes() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let (d, h, vocab) = (4, 2, 5);
        let p = AttentionParams::<f64>::random(d, h, 1.0, &mut r).unwrap();
        let bank = ValueBank::random(vocab, 2, d, 1.0, &mut r);
        let mut memory = LayerMemory::Move(random_router(d, h, 2, StdPath::Gated, &mut r));
        let mut cache = LayerCache::mha(d);
        let x = Tensor::randn(vec![3, d], 1.0, &mut r);
        for pos in 0..2 {
            let layer = AttentionLayer { params: &p, memory: &memory, bank: Some(&bank), rope: true };
            let xt = Tensor::new(vec![1, d], x.row(pos).to_vec()).unwrap();
            layer.decode_step(&mut cache, &xt, pos, pos).unwrap();
        }
        let before = cache.values().unwrap();
        if let LayerMemory::Move(router) = &mut memory {
            router.weight = router.weight.map(|w| w + 1.0);
        }
        let layer = AttentionLayer { params: &p, memory: &memory, bank: Some(&bank), rope: true };
        let xt = Tensor::new(vec![1, d], x.row(2).to_vec()).unwrap();
        layer.decode_step(&mut cache, &xt, 2, 2).unwrap();
        let after = cache.values().unwrap();
        assert_eq!(&after.data()[..2 * d], before.data());
    }
}
