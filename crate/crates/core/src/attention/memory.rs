//! Value banks, routers and the gated value mixture.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{mix_forward, sigmoid, MixLayout, Scalar, Tensor};

/// Whether the dense value projection carries its own gate `g₀`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StdPath {
    /// `V_S = V + Σ gᵢ·Mᵢ`
    Ungated,
    /// `V_S = g₀·V + Σ gᵢ·Mᵢ`
    Gated,
}

impl StdPath {
    pub fn is_gated(self) -> bool {
        self == StdPath::Gated
    }
}

/// Per-token, per-head gates in `(0, 2)`, shape `[T, H, M + 1]`.
///
/// Slot 0 is the standard-path gate; it is exactly 1 for ungated models.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTensor<S> {
    values: Tensor<S>,
}

impl<S: Scalar> GateTensor<S> {
    /// `g = 2·σ(z)` for logits shaped `[T, H, M + 1]`.
    pub fn from_logits(logits: &Tensor<S>) -> Result<Self> {
        if logits.rank() != 3 {
            return Err(Error::ShapeMismatch { op: "gate logits", lhs: logits.shape().to_vec(), rhs: vec![] });
        }
        Ok(GateTensor { values: scaled_gate(logits) })
    }

    /// Builds a gate tensor from router output rows `[T, H·stride]`,
    /// inserting a unit standard-path gate when the router has none.
    pub(crate) fn from_router_rows(rows: &Tensor<S>, heads: usize, slots: usize, std_path: StdPath) -> Self {
        let t = rows.rows();
        let stride = slots + usize::from(std_path.is_gated());
        let mut out = Vec::with_capacity(t * heads * (slots + 1));
        for r in 0..t {
            let row = rows.row(r);
            for h in 0..heads {
                let g = &row[h * stride..(h + 1) * stride];
                if !std_path.is_gated() {
                    out.push(S::one());
                }
                out.extend_from_slice(g);
            }
        }
        GateTensor { values: Tensor::new(vec![t, heads, slots + 1], out).expect("gate layout") }
    }

    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn tokens(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn heads(&self) -> usize {
        self.values.shape()[1]
    }

    /// Memory slots, excluding the standard-path gate.
    pub fn slots(&self) -> usize {
        self.values.shape()[2] - 1
    }

    pub fn get(&self, t: usize, h: usize, i: usize) -> S {
        let (hh, ss) = (self.heads(), self.slots() + 1);
        self.values.data()[(t * hh + h) * ss + i]
    }
}

/// Element-wise `2·σ(z)`: 1 at zero, saturating toward 0 and 2.
pub fn scaled_gate<S: Scalar>(logits: &Tensor<S>) -> Tensor<S> {
    let two = S::lit(2.0);
    logits.map(|z| two * sigmoid(z))
}

/// Global table of `M` value slots per vocabulary entry, `[N_vocab, M, width]`.
///
/// For MHA models `width = d`; for latent-space injection `width = d_c`.
#[derive(Clone, Debug, PartialEq)]
pub struct ValueBank<S> {
    table: Tensor<S>,
}

impl<S: Scalar> ValueBank<S> {
    pub fn zeros(vocab: usize, slots: usize, width: usize) -> Self {
        ValueBank { table: Tensor::zeros(vec![vocab, slots, width]) }
    }

    pub fn from_tensor(table: Tensor<S>) -> Result<Self> {
        if table.rank() != 3 {
            return Err(Error::ShapeMismatch { op: "value bank", lhs: table.shape().to_vec(), rhs: vec![] });
        }
        Ok(ValueBank { table })
    }

    pub fn random<R: Rng + ?Sized>(vocab: usize, slots: usize, width: usize, std: f64, rng: &mut R) -> Self {
        ValueBank { table: Tensor::randn(vec![vocab, slots, width], std, rng) }
    }

    pub fn vocab(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.table.shape()[2]
    }

    /// `N_vocab · M · width`.
    pub fn param_count(&self) -> usize {
        self.table.numel()
    }

    pub fn tensor(&self) -> &Tensor<S> {
        &self.table
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor<S> {
        &mut self.table
    }

    /// All `M × width` values of one token.
    pub fn token_row(&self, token: usize) -> Result<&[S]> {
        if token >= self.vocab() {
            return Err(Error::TokenOutOfRange { position: 0, token, vocab: self.vocab() });
        }
        let w = self.slots() * self.width();
        Ok(&self.table.data()[token * w..(token + 1) * w])
    }
}

/// Memory gathered for a token sequence, `[T, M, H, d_h]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievedMemory<S> {
    values: Tensor<S>,
}

impl<S: Scalar> RetrievedMemory<S> {
    pub fn values(&self) -> &Tensor<S> {
        &self.values
    }

    pub fn slots(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Pure gather of bank rows, reshaped so each slot splits into head chunks.
pub fn retrieve_memory<S: Scalar>(bank: &ValueBank<S>, tokens: &[usize], heads: usize) -> Result<RetrievedMemory<S>> {
    if heads == 0 || !bank.width().is_multiple_of(heads) {
        return Err(Error::InvalidConfig(format!(
            "bank width {} does not split into {heads} heads",
            bank.width()
        )));
    }
    let w = bank.slots() * bank.width();
    let mut data = Vec::with_capacity(tokens.len() * w);
    for (position, &tok) in tokens.iter().enumerate() {
        if tok >= bank.vocab() {
            return Err(Error::TokenOutOfRange { position, token: tok, vocab: bank.vocab() });
        }
        data.extend_from_slice(&bank.table.data()[tok * w..(tok + 1) * w]);
    }
    let shape = vec![tokens.len(), bank.slots(), heads, bank.width() / heads];
    Ok(RetrievedMemory { values: Tensor::new(shape, data)? })
}

/// Per-layer router `W_G: d → H·(M+1)` (or `H·M` with an ungated standard path).
#[derive(Clone, Debug, PartialEq)]
pub struct Router<S> {
    pub weight: Tensor<S>,
    pub heads: usize,
    pub slots: usize,
    pub std_path: StdPath,
}

impl<S: Scalar> Router<S> {
    pub fn zeros(d_model: usize, heads: usize, slots: usize, std_path: StdPath) -> Self {
        let cols = heads * (slots + usize::from(std_path.is_gated()));
        Router { weight: Tensor::zeros(vec![d_model, cols]), heads, slots, std_path }
    }

    pub fn layout(&self, width: usize) -> MixLayout {
        MixLayout { heads: self.heads, slots: self.slots, width, gated_std: self.std_path.is_gated() }
    }

    /// Gates for hidden states `x: [T, d]`.
    pub fn gates(&self, x: &Tensor<S>) -> Result<GateTensor<S>> {
        let rows = scaled_gate(&x.matmul(&self.weight)?);
        Ok(GateTensor::from_router_rows(&rows, self.heads, self.slots, self.std_path))
    }
}

/// Layer-local LaVE memory: one `[N_vocab, width]` bank and a per-head gate.
#[derive(Clone, Debug, PartialEq)]
pub struct LaveParams<S> {
    pub bank: Tensor<S>,
    pub router: Router<S>,
}

impl<S: Scalar> LaveParams<S> {
    pub fn zeros(vocab: usize, width: usize, d_model: usize, heads: usize, std_path: StdPath) -> Self {
        LaveParams { bank: Tensor::zeros(vec![vocab, width]), router: Router::zeros(d_model, heads, 1, std_path) }
    }
}

/// LaVE layer set: ×1 selects `L−1, L−3, …`; ×2 selects every layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LaveSelection {
    layers: Vec<usize>,
}

impl LaveSelection {
    pub fn for_scale(num_layers: usize, scale: usize) -> Result<Self> {
        let layers = match scale {
            1 => (0..num_layers).rev().step_by(2).collect(),
            2 => (0..num_layers).rev().collect(),
            other => {
                return Err(Error::InvalidConfig(format!(
                    "LaVE memory is bound to depth and supports only x1 or x2, not x{other}"
                )))
            }
        };
        Ok(LaveSelection { layers })
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn contains(&self, layer: usize) -> bool {
        self.layers.contains(&layer)
    }
}

fn check_mix_shapes<S: Scalar>(v: &Tensor<S>, mem: &Tensor<S>, gates: &GateTensor<S>) -> Result<(usize, usize, usize)> {
    let bad = |rhs: &[usize]| Error::ShapeMismatch { op: "value mixing", lhs: v.shape().to_vec(), rhs: rhs.to_vec() };
    if v.rank() != 3 {
        return Err(bad(mem.shape()));
    }
    let (t, h, dh) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let slots = gates.slots();
    if mem.shape() != [t, slots, h, dh] {
        return Err(bad(mem.shape()));
    }
    if gates.tokens() != t || gates.heads() != h {
        return Err(bad(gates.values().shape()));
    }
    Ok((t, h, dh))
}

/// `V_S[t,h] = g[t,h,0]·V[t,h] + Σᵢ g[t,h,i]·M[t,i,h]` on `[T, H, d_h]` values.
pub fn mix_values_move<S: Scalar>(v: &Tensor<S>, memory: &RetrievedMemory<S>, gates: &GateTensor<S>) -> Result<Tensor<S>> {
    let (t, h, dh) = check_mix_shapes(v, &memory.values, gates)?;
    let layout = MixLayout { heads: h, slots: gates.slots(), width: dh, gated_std: true };
    let mut out = vec![S::zero(); t * h * dh];
    mix_forward(v.data(), memory.values.data(), gates.values().data(), layout, &mut out);
    Tensor::new(vec![t, h, dh], out)
}

/// LaVE mixing on a selected layer.
///
/// `memory` is `[T, H, d_h]`; `gates` is `[T, H]` for the ungated standard
/// path or `[T, H, 2]` (`g₀`, `g₁`) for the gated one.
pub fn mix_values_lave<S: Scalar>(
    selection: &LaveSelection,
    layer: usize,
    v: &Tensor<S>,
    memory: &Tensor<S>,
    gates: &Tensor<S>,
    std_path: StdPath,
) -> Result<Tensor<S>> {
    if !selection.contains(layer) {
        return Err(Error::LayerNotSelected { layer });
    }
    if memory.shape() != v.shape() || v.rank() != 3 {
        return Err(Error::ShapeMismatch { op: "lave mixing", lhs: v.shape().to_vec(), rhs: memory.shape().to_vec() });
    }
    let (t, h, dh) = (v.shape()[0], v.shape()[1], v.shape()[2]);
    let stride = 1 + usize::from(std_path.is_gated());
    if gates.numel() != t * h * stride {
        return Err(Error::ShapeMismatch { op: "lave gates", lhs: v.shape().to_vec(), rhs: gates.shape().to_vec() });
    }
    let layout = MixLayout { heads: h, slots: 1, width: dh, gated_std: std_path.is_gated() };
    let mut out = vec![S::zero(); t * h * dh];
    mix_forward(v.data(), memory.data(), gates.data(), layout, &mut out);
    Tensor::new(vec![t, h, dh], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn scaled_gate_values_and_limits() {
        let z = Tensor::new(vec![4], vec![0.0, 3f64.ln(), 800.0, -800.0]).unwrap();
        let g = scaled_gate(&z);
        assert_eq!(g.data()[0], 1.0);
        assert!((g.data()[1] - 1.5).abs() <= 1e-15);
        assert_eq!(g.data()[2], 2.0);
        assert_eq!(g.data()[3], 0.0);
    }

    #[test]
    fn retrieval_is_a_pure_gather() {
        let bank = ValueBank::<f64>::zeros(5, 2, 4);
        let m = retrieve_memory(&bank, &[1, 3], 2).unwrap();
        assert_eq!(m.values().shape(), &[2, 2, 2, 2]);
        assert!(m.values().data().iter().all(|&x| x == 0.0));

        let bank = ValueBank::<f64>::random(5, 2, 4, 1.0, &mut rng(1));
        let m = retrieve_memory(&bank, &[3, 0, 3], 2).unwrap();
        let w = 8;
        assert_eq!(&m.values().data()[..w], &m.values().data()[2 * w..]);
        assert_eq!(&m.values().data()[..w], bank.token_row(3).unwrap());
        assert!(matches!(retrieve_memory(&bank, &[0, 5], 2), Err(Error::TokenOutOfRange { position: 1, token: 5, .. })));
    }

    #[test]
    fn move_mix_reductions() {
        let mut r = rng(2);
        let v = Tensor::<f64>::randn(vec![3, 2, 4], 1.0, &mut r);
        let bank = ValueBank::zeros(6, 3, 8);
        let mem = retrieve_memory(&bank, &[0, 5, 2], 2).unwrap();
        let ones = GateTensor::from_logits(&Tensor::zeros(vec![3, 2, 4])).unwrap();
        assert_eq!(mix_values_move(&v, &mem, &ones).unwrap(), v);

        // M = 1, unit gates, memory equal to V doubles it.
        let twin = RetrievedMemory { values: v.reshape(vec![3, 1, 2, 4]).unwrap() };
        let ones = GateTensor::from_logits(&Tensor::zeros(vec![3, 2, 2])).unwrap();
        assert_eq!(mix_values_move(&v, &twin, &ones).unwrap(), v.scale(2.0));
    }

    #[test]
    fn move_mix_matches_loop_oracle() {
        let mut r = rng(3);
        let (t, h, dh, m) = (3, 2, 3, 4);
        let v = Tensor::<f64>::randn(vec![t, h, dh], 1.0, &mut r);
        let bank = ValueBank::random(7, m, h * dh, 1.0, &mut r);
        let tokens = [6, 1, 6];
        let mem = retrieve_memory(&bank, &tokens, h).unwrap();
        let gates = GateTensor::from_logits(&Tensor::randn(vec![t, h, m + 1], 1.0, &mut r)).unwrap();
        let got = mix_values_move(&v, &mem, &gates).unwrap();
        let md = mem.values().data();
        for ti in 0..t {
            for hi in 0..h {
                for j in 0..dh {
                    let mut want = gates.get(ti, hi, 0) * v.data()[(ti * h + hi) * dh + j];
                    for i in 1..=m {
                        want += gates.get(ti, hi, i) * md[((ti * m + i - 1) * h + hi) * dh + j];
                    }
                    assert!((got.data()[(ti * h + hi) * dh + j] - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn lave_selection_sets() {
        assert_eq!(LaveSelection::for_scale(4, 1).unwrap().layers(), &[3, 1]);
        assert_eq!(LaveSelection::for_scale(5, 1).unwrap().layers(), &[4, 2, 0]);
        assert_eq!(LaveSelection::for_scale(4, 2).unwrap().layers(), &[3, 2, 1, 0]);
        assert!(LaveSelection::for_scale(4, 4).is_err());
    }

    #[test]
    fn lave_mix_cases() {
        let sel = LaveSelection::for_scale(4, 1).unwrap();
        let mut r = rng(4);
        let (t, h, dh) = (2, 2, 3);
        let v = Tensor::<f64>::randn(vec![t, h, dh], 1.0, &mut r);
        let zero = Tensor::zeros(vec![t, h, dh]);
        let unit = scaled_gate(&Tensor::zeros(vec![t, h]));
        assert_eq!(mix_values_lave(&sel, 3, &v, &zero, &unit, StdPath::Ungated).unwrap(), v);
        let mem = Tensor::randn(vec![t, h, dh], 1.0, &mut r);
        let got = mix_values_lave(&sel, 1, &v, &mem, &unit, StdPath::Ungated).unwrap();
        assert_eq!(got, v.add(&mem).unwrap());
        assert!(matches!(
            mix_values_lave(&sel, 2, &v, &mem, &unit, StdPath::Ungated),
            Err(Error::LayerNotSelected { layer: 2 })
        ));

        // Loop oracle for the gated standard path.
        let gates = scaled_gate(&Tensor::randn(vec![t, h, 2], 1.0, &mut r));
        let got = mix_values_lave(&sel, 3, &v, &mem, &gates, StdPath::Gated).unwrap();
        for ti in 0..t {
            for hi in 0..h {
                let g0 = gates.data()[(ti * h + hi) * 2];
                let g1 = gates.data()[(ti * h + hi) * 2 + 1];
                for j in 0..dh {
                    let k = (ti * h + hi) * dh + j;
                    let want = g0 * v.data()[k] + g1 * mem.data()[k];
                    assert!((got.data()[k] - want).abs() <= 1e-12);
                }
            }
        }
        let ungated = scaled_gate(&Tensor::randn(vec![t, h], 1.0, &mut r));
        let got = mix_values_lave(&sel, 3, &v, &mem, &ungated, StdPath::Ungated).unwrap();
        for k in 0..t * h * dh {
            let want = v.data()[k] + ungated.data()[k / dh] * mem.data()[k];
            assert!((got.data()[k] - want).abs() <= 1e-12);
        }
    }

    #[test]
    fn router_gates_capture_unit_std_slot_when_ungated() {
        let router = Router::<f64>::zeros(4, 2, 3, StdPath::Ungated);
        let g = router.gates(&Tensor::ones(vec![5, 4])).unwrap();
        assert_eq!(g.values().shape(), &[5, 2, 4]);
        assert!(g.values().data().iter().all(|&x| x == 1.0));
    }
}
