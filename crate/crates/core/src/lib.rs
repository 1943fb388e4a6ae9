//! Decoder-only transformers with token-indexed value memory: a shared
//! bank mixed into every layer's attention values through learned gates,
//! per-layer banks, and latent-attention variants, plus the training,
//! cost-model and routing-trace tooling around them.
//!
//! Numeric code is generic over [`numerics::Scalar`]; the aliases below fix
//! it to `f64`, which every check and experiment uses.

pub mod attention;
pub mod checkpoint;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod mla;
pub mod model;
pub mod numerics;
pub mod routelab;
pub mod trainer;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type Tape64 = numerics::Tape<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type Trainer64 = trainer::Trainer<f64>;
pub type KvCache64 = attention::KvCache<f64>;
pub type MlaParams64 = mla::MlaParams<f64>;
