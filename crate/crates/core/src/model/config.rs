use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{LaveSelection, StdPath};
use crate::error::{Error, Result};
use crate::mla::{KeySource, MlaParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "standard")]
    Standard,
    #[serde(rename = "lave")]
    Lave,
    #[serde(rename = "move")]
    Move,
    #[serde(rename = "mla")]
    Mla,
    #[serde(rename = "mla+lave")]
    MlaLave,
    #[serde(rename = "mla+move")]
    MlaMove,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Standard, Variant::Lave, Variant::Move, Variant::Mla, Variant::MlaLave, Variant::MlaMove];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Standard => "standard",
            Variant::Lave => "lave",
            Variant::Move => "move",
            Variant::Mla => "mla",
            Variant::MlaLave => "mla+lave",
            Variant::MlaMove => "mla+move",
        }
    }

    pub fn is_mla(self) -> bool {
        matches!(self, Variant::Mla | Variant::MlaLave | Variant::MlaMove)
    }

    pub fn is_move(self) -> bool {
        matches!(self, Variant::Move | Variant::MlaMove)
    }

    pub fn is_lave(self) -> bool {
        matches!(self, Variant::Lave | Variant::MlaLave)
    }

    /// The same attention family without value memory.
    pub fn memory_free(self) -> Variant {
        if self.is_mla() {
            Variant::Mla
        } else {
            Variant::Standard
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

/// Every architecture hyperparameter of one network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab: usize,
    pub max_len: usize,
    pub variant: Variant,
    /// Memory multiplier: MoVE uses `scale · L/2` slots; LaVE allows 1 or 2.
    #[serde(default = "one")]
    pub scale: usize,
    #[serde(default = "gated")]
    pub std_path: StdPath,
    /// Latent width `d_c`; defaults to `d/32`.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// Latent chunks `H_kv`; defaults to `H`.
    #[serde(default)]
    pub kv_heads: Option<usize>,
    #[serde(default)]
    pub key_source: KeySource,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

fn gated() -> StdPath {
    StdPath::Gated
}

pub const SCALES: [usize; 6] = [1, 2, 4, 8, 16, 32];

impl ModelConfig {
    /// A config with defaults for everything but the core sizes.
    pub fn new(variant: Variant, layers: usize, d_model: usize, heads: usize, vocab: usize, max_len: usize) -> Self {
        ModelConfig {
            layers,
            d_model,
            heads,
            vocab,
            max_len,
            variant,
            scale: 1,
            std_path: StdPath::Gated,
            latent_dim: None,
            kv_heads: None,
            key_source: KeySource::Augmented,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads.max(1)
    }

    /// Bank slots `M` of the shared bank (0 unless a MoVE variant).
    pub fn slots(&self) -> usize {
        if self.variant.is_move() {
            self.scale * self.layers / 2
        } else {
            0
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim.unwrap_or(self.d_model / 32)
    }

    pub fn kv_heads(&self) -> usize {
        self.kv_heads.unwrap_or(self.heads)
    }

    /// Width of one memory slot: `d` for MHA variants, `d_c` for latent ones.
    pub fn memory_width(&self) -> usize {
        if self.variant.is_mla() {
            self.latent_dim()
        } else {
            self.d_model
        }
    }

    /// Heads (or latent chunks) the memory gates address independently.
    pub fn memory_heads(&self) -> usize {
        if self.variant.is_mla() {
            self.kv_heads()
        } else {
            self.heads
        }
    }

    pub fn lave_selection(&self) -> Result<Option<LaveSelection>> {
        if self.variant.is_lave() {
            LaveSelection::for_scale(self.layers, self.scale).map(Some)
        } else {
            Ok(None)
        }
    }

    /// Copy of this config with the memory removed.
    pub fn memory_free(&self) -> Self {
        ModelConfig { variant: self.variant.memory_free(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.layers == 0 || self.d_model == 0 || self.vocab == 0 || self.max_len == 0 {
            return bad("layers, width, vocabulary and context length must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("width {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if !self.variant.is_mla() && !self.head_dim().is_multiple_of(2) {
            return bad(format!("rotary positions need an even head width, got {}", self.head_dim()));
        }
        if !SCALES.contains(&self.scale) {
            return bad(format!("scale x{} is not one of {SCALES:?}", self.scale));
        }
        if self.variant.is_move() && self.slots() == 0 {
            return bad(format!("x{} on {} layers gives no memory slots", self.scale, self.layers));
        }
        if self.variant.is_move() && !(self.scale * self.layers).is_multiple_of(2) {
            return bad(format!("x{} on {} layers does not give a whole slot count", self.scale, self.layers));
        }
        self.lave_selection()?;
        if self.variant.is_mla() {
            MlaParams::<f64>::check_dims(self.d_model, self.heads, self.latent_dim(), self.kv_heads())?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| Error::Format(format!("model config: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_counts_follow_depth() {
        let mut c = ModelConfig::new(Variant::Move, 12, 96, 4, 64, 16);
        let want = [(1, 6), (2, 12), (4, 24), (8, 48)];
        for (scale, m) in want {
            c.scale = scale;
            assert_eq!(c.slots(), m);
            c.validate().unwrap();
        }
        c.variant = Variant::Standard;
        assert_eq!(c.slots(), 0);
    }

    #[test]
    fn lave_scale_is_bounded_by_depth() {
        let mut c = ModelConfig::new(Variant::Lave, 4, 32, 4, 64, 16);
        assert_eq!(c.lave_selection().unwrap().unwrap().layers(), &[3, 1]);
        c.scale = 4;
        assert!(matches!(c.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(ModelConfig::new(Variant::Standard, 2, 30, 4, 64, 16).validate().is_err());
        let mut c = ModelConfig::new(Variant::MlaMove, 2, 32, 4, 64, 16);
        assert!(c.validate().is_err(), "d/32 = 1 cannot split into 4 chunks");
        c.latent_dim = Some(8);
        c.validate().unwrap();
        let mut c = ModelConfig::new(Variant::Move, 3, 32, 4, 64, 16);
        assert!(c.validate().is_err());
        c.scale = 2;
        c.validate().unwrap();
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.name().parse::<Variant>().unwrap(), v);
        }
        let c = ModelConfig::new(Variant::MlaLave, 2, 64, 2, 10, 8);
        assert_eq!(ModelConfig::from_json(&c.to_json()).unwrap(), c);
    }
}
