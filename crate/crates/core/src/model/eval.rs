use std::f64::consts::LN_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{row_nll, Scalar, Tensor};

/// Next-token negative log-likelihood, in nats.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total_nats: f64,
    pub per_token: Vec<f64>,
}

impl LossReport {
    pub fn mean(&self) -> f64 {
        self.total_nats / self.per_token.len().max(1) as f64
    }
}

/// `−Σ log softmax(logits[t])[targets[t]]`.
pub fn ar_loss<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<LossReport> {
    if logits.rank() != 2 || logits.rows() != targets.len() {
        return Err(Error::ShapeMismatch { op: "ar_loss", lhs: logits.shape().to_vec(), rhs: vec![targets.len()] });
    }
    let vocab = logits.last_dim();
    let mut per_token = Vec::with_capacity(targets.len());
    for (position, &t) in targets.iter().enumerate() {
        if t >= vocab {
            return Err(Error::TokenOutOfRange { position, token: t, vocab });
        }
        per_token.push(row_nll(logits.row(position), t).as_f64());
    }
    Ok(LossReport { total_nats: per_token.iter().sum(), per_token })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub label: String,
    pub total_loss_nats: f64,
    pub token_count: usize,
    pub byte_count: usize,
    pub bpb: f64,
}

impl EvalReport {
    pub fn nats_per_token(&self) -> f64 {
        self.total_loss_nats / self.token_count.max(1) as f64
    }
}

/// `BPB = L_total / (ln 2 · N_bytes)`, normalizing by raw UTF-8 bytes.
pub fn bits_per_byte(label: &str, total_loss_nats: f64, token_count: usize, byte_count: usize) -> Result<EvalReport> {
    if byte_count == 0 {
        return Err(Error::InvalidConfig("bits per byte needs at least one byte".into()));
    }
    Ok(EvalReport {
        label: label.to_string(),
        total_loss_nats,
        token_count,
        byte_count,
        bpb: total_loss_nats / (LN_2 * byte_count as f64),
    })
}
