//! Decoder-only transformer assembly, loss, metrics and generation.

mod config;
mod decode;
mod eval;
mod forward;
mod params;

use std::path::Path;

pub use config::{ModelConfig, Variant, SCALES};
pub use decode::{generate, Decoder, Sampling};
pub use eval::{ar_loss, bits_per_byte, EvalReport, LossReport};
pub use forward::{forward_tape, sequence_loss, ForwardOutput, LayerGates, NORM_EPS};
pub use params::{
    tensor_rng, AuditEntry, Block, BlockAttention, BoundAttention, BoundBlock, BoundModel, ModelParams, ParamAudit,
    ParamKind,
};

use crate::checkpoint::{Checkpoint, StorageDtype};
use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

impl<S: Scalar> ModelParams<S> {
    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ck = Checkpoint::default();
        ck.meta.insert("config".into(), self.config.to_json());
        ck.tensors = self.named_tensors().into_iter().map(|(n, _, t)| (n, t.clone())).collect();
        ck
    }

    /// Rebuilds a model from a checkpoint, checking every tensor's name and
    /// shape against the stored config before accepting any of them.
    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let config = ModelConfig::from_json(ck.meta("config")?)?;
        let mut params = ModelParams::init(&config)?;
        let mut incoming: Vec<Tensor<S>> = Vec::new();
        for (name, _, t) in params.named_tensors() {
            let stored = ck.get(&name).ok_or_else(|| Error::Format(format!("checkpoint lacks tensor {name}")))?;
            if stored.shape() != t.shape() {
                return Err(Error::Format(format!(
                    "tensor {name} has shape {:?}, config needs {:?}",
                    stored.shape(),
                    t.shape()
                )));
            }
            incoming.push(stored.clone());
        }
        for (dst, src) in params.tensors_mut().into_iter().zip(incoming) {
            *dst = src;
        }
        Ok(params)
    }

    pub fn save(&self, path: impl AsRef<Path>, dtype: StorageDtype) -> Result<()> {
        self.to_checkpoint().save(path, dtype)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}
