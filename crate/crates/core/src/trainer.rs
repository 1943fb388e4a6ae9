//! AdamW training loop, evaluation, resumable checkpoints and matched
//! comparison runs.

use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::attention::{SeqShape, StdPath};
use crate::checkpoint::{Checkpoint, StorageDtype};
use crate::data::{Batch, FactCorpus, ShardStream};
use crate::error::{Error, Result};
use crate::model::{bits_per_byte, sequence_loss, ModelConfig, ModelParams, ParamAudit};
use crate::numerics::{Scalar, Tape, Tensor};

/// Optimization hyperparameters shared by every run of a comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Sequences per step; a step sees `batch_size * seq_len` tokens.
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    /// Cosine floor as a fraction of `lr`.
    pub min_lr_frac: f64,
    pub warmup_frac: f64,
    pub weight_decay: f64,
    /// Global gradient-norm threshold; `inf` disables clipping.
    pub clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps between evaluations; the final step is always evaluated.
    pub eval_interval: usize,
    /// Seeds the data order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 4,
            seq_len: 32,
            lr: 3e-3,
            min_lr_frac: 0.1,
            warmup_frac: 0.02,
            weight_decay: 0.0,
            clip: 1.0,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            eval_interval: 250,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    pub fn warmup_steps(&self) -> usize {
        (self.warmup_frac * self.steps as f64).ceil() as usize
    }

    /// Linear warmup, then cosine decay to `min_lr_frac * lr` at the last step.
    pub fn lr_at(&self, step: usize) -> f64 {
        let warm = self.warmup_steps();
        if step < warm {
            return self.lr * (step + 1) as f64 / warm as f64;
        }
        let span = self.steps.saturating_sub(warm).saturating_sub(1).max(1);
        let progress = ((step - warm) as f64 / span as f64).min(1.0);
        let floor = self.lr * self.min_lr_frac;
        floor + 0.5 * (self.lr - floor) * (1.0 + (PI * progress).cos())
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.steps == 0 || self.batch_size == 0 || self.seq_len == 0 || self.eval_interval == 0 {
            return bad("steps, batch_size, seq_len and eval_interval must be positive");
        }
        // Negated comparisons so NaN fails every check.
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(0.0..=1.0).contains(&self.min_lr_frac) {
            return bad("lr must be finite and non-negative, min_lr_frac in [0, 1]");
        }
        if !(0.0..1.0).contains(&self.warmup_frac) || self.weight_decay < 0.0 || !(self.clip > 0.0) {
            return bad("warmup_frac in [0, 1), weight_decay >= 0 and clip > 0 required");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas in [0, 1) and eps > 0 required");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam moments for an ordered list of tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<S> {
    /// Updates applied so far.
    pub t: u64,
    pub m: Vec<Tensor<S>>,
    pub v: Vec<Tensor<S>>,
}

impl<S: Scalar> AdamW<S> {
    pub fn new(shapes: &[&[usize]]) -> Self {
        let zeros = || shapes.iter().map(|s| Tensor::zeros(s.to_vec())).collect();
        AdamW { t: 0, m: zeros(), v: zeros() }
    }

    /// One update: `p ← p - lr·(m̂ / (√v̂ + eps) + wd·p)`, with `wd` applied
    /// only where `decay[i]` holds.
    pub fn step(
        &mut self,
        params: &mut [&mut Tensor<S>],
        grads: &[Tensor<S>],
        decay: &[bool],
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() || decay.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                op: "adamw",
                lhs: vec![self.m.len()],
                rhs: vec![params.len(), grads.len(), decay.len()],
            });
        }
        self.t += 1;
        let (b1, b2) = (S::lit(cfg.beta1), S::lit(cfg.beta2));
        let bc1 = S::lit(1.0 - cfg.beta1.powi(self.t as i32));
        let bc2 = S::lit(1.0 - cfg.beta2.powi(self.t as i32));
        let (lr_s, eps) = (S::lit(lr), S::lit(cfg.eps));
        let one = S::one();
        for i in 0..params.len() {
            if params[i].shape() != grads[i].shape() || grads[i].shape() != self.m[i].shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw",
                    lhs: params[i].shape().to_vec(),
                    rhs: grads[i].shape().to_vec(),
                });
            }
            let wd = if decay[i] { S::lit(cfg.weight_decay) } else { S::zero() };
            let p = params[i].data_mut();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m).zip(v).zip(grads[i].data()) {
                *m = b1 * *m + (one - b1) * g;
                *v = b2 * *v + (one - b2) * g * g;
                let update = (*m / bc1) / ((*v / bc2).sqrt() + eps) + wd * *p;
                *p -= lr_s * update;
            }
        }
        Ok(())
    }
}

/// Global L2 norm over all gradients.
pub fn global_norm<S: Scalar>(grads: &[Tensor<S>]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x.as_f64() * x.as_f64()).sum::<f64>().sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_grad_norm<S: Scalar>(grads: &mut [Tensor<S>], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = S::lit(max_norm / norm);
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= c));
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepOutcome {
    /// Mean loss per counted target, in nats.
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Mean-loss gradients for one batch, in canonical tensor order.
pub fn loss_and_grads<S: Scalar>(params: &ModelParams<S>, batch: &Batch) -> Result<(f64, Vec<Tensor<S>>)> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let weights: Option<Vec<S>> = batch.weights.as_ref().map(|w| w.iter().map(|&x| S::lit(x)).collect());
    let count = batch.weights.as_ref().map_or(batch.targets.len() as f64, |w| w.iter().sum());
    if count <= 0.0 {
        return Err(Error::InvalidConfig("batch has no counted targets".into()));
    }
    let total = sequence_loss(&mut tape, params, &bound, &batch.inputs, &batch.targets, weights.as_deref(), batch.seq)?;
    let loss = tape.scale(total, S::lit(1.0 / count));
    let value = tape.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("training loss {value}")));
    }
    let mut grads = tape.backward(loss)?;
    Ok((value, bound.leaves.iter().map(|&v| grads.take(v)).collect()))
}

/// Forward, backward, clip and one AdamW update at schedule position `step`.
pub fn train_step<S: Scalar>(
    params: &mut ModelParams<S>,
    opt: &mut AdamW<S>,
    batch: &Batch,
    step: usize,
    cfg: &TrainConfig,
) -> Result<StepOutcome> {
    let (loss, mut grads) = loss_and_grads(params, batch)?;
    let grad_norm = clip_grad_norm(&mut grads, cfg.clip);
    if !grad_norm.is_finite() {
        return Err(Error::NonFinite(format!("gradient norm {grad_norm} at step {step}")));
    }
    let decay: Vec<bool> = params.named_tensors().iter().map(|(_, k, _)| k.decays()).collect();
    let lr = cfg.lr_at(step);
    opt.step(&mut params.tensors_mut(), &grads, &decay, lr, cfg)?;
    Ok(StepOutcome { loss, grad_norm, lr })
}

/// Summed loss over evaluation batches: `(nats, counted targets)`.
pub fn evaluate<S: Scalar>(params: &ModelParams<S>, batches: &[Batch]) -> Result<(f64, f64)> {
    let (mut nats, mut count) = (0.0, 0.0);
    for b in batches {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let weights: Option<Vec<S>> = b.weights.as_ref().map(|w| w.iter().map(|&x| S::lit(x)).collect());
        let loss = sequence_loss(&mut tape, params, &bound, &b.inputs, &b.targets, weights.as_deref(), b.seq)?;
        nats += tape.value(loss).item().as_f64();
        count += b.weights.as_ref().map_or(b.targets.len() as f64, |w| w.iter().sum());
    }
    Ok((nats, count))
}

/// Training stream plus fixed evaluation batches.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub vocab: usize,
    pub train: ShardStream,
    pub eval: Vec<Batch>,
    /// Bytes behind the counted eval targets, for byte-level corpora.
    pub eval_bytes: Option<usize>,
}

impl TrainData {
    /// Fact recall: trains on every token, evaluates on definition tokens.
    pub fn facts(corpus: &FactCorpus, cfg: &TrainConfig) -> Result<Self> {
        let train = ShardStream::new(corpus.train.clone(), cfg.seq_len, cfg.batch_size, cfg.seed)?;
        let eval = ShardStream::new(corpus.eval.clone(), cfg.seq_len, cfg.batch_size, 0)?
            .with_weights(corpus.eval_weights.clone())?
            .in_order();
        Ok(TrainData { vocab: corpus.spec.vocab(), train, eval, eval_bytes: None })
    }

    /// Byte-level text; one token per byte, so eval bytes equal eval targets.
    pub fn bytes(train: Vec<usize>, eval: Vec<usize>, cfg: &TrainConfig) -> Result<Self> {
        let train = ShardStream::new(train, cfg.seq_len, cfg.batch_size, cfg.seed)?;
        let eval = ShardStream::new(eval, cfg.seq_len, cfg.batch_size, 0)?.in_order();
        let bytes = eval.iter().map(|b| b.targets.len()).sum();
        Ok(TrainData { vocab: crate::data::BYTE_VOCAB, train, eval, eval_bytes: Some(bytes) })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedgerRecord {
    pub step: usize,
    /// Mean training loss over the steps since the previous record.
    pub train_loss: f64,
    pub eval_loss: f64,
    pub bpb: Option<f64>,
    /// Excluded from serialized ledgers, which must be reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunLedger {
    pub label: String,
    pub config: ModelConfig,
    pub train: TrainConfig,
    pub records: Vec<LedgerRecord>,
    pub audit: ParamAudit,
}

impl RunLedger {
    pub fn final_eval(&self) -> Option<f64> {
        self.records.last().map(|r| r.eval_loss)
    }

    /// One JSON record per evaluation point.
    pub fn to_jsonl(&self) -> String {
        self.records.iter().map(|r| serde_json::to_string(r).expect("records serialize") + "\n").collect()
    }

    /// Deterministic fields only (no wall time).
    pub fn same_metrics(&self, other: &RunLedger) -> bool {
        self.to_jsonl() == other.to_jsonl() && self.audit == other.audit && self.label == other.label
    }
}

/// Model, optimizer and position in the run; everything resume needs.
#[derive(Clone, Debug)]
pub struct Trainer<S> {
    pub params: ModelParams<S>,
    pub opt: AdamW<S>,
    pub cfg: TrainConfig,
    pub step: usize,
    pub records: Vec<LedgerRecord>,
    pending_loss: f64,
    pending_steps: usize,
    elapsed: f64,
}

impl<S: Scalar> Trainer<S> {
    pub fn new(config: &ModelConfig, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Self::from_params(ModelParams::init(config)?, cfg)
    }

    pub fn from_params(params: ModelParams<S>, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.seq_len > params.config.max_len {
            return Err(Error::InvalidConfig(format!(
                "seq_len {} exceeds the model context {}",
                cfg.seq_len, params.config.max_len
            )));
        }
        let opt = {
            let named = params.named_tensors();
            let shapes: Vec<&[usize]> = named.iter().map(|(_, _, t)| t.shape()).collect();
            AdamW::new(&shapes)
        };
        Ok(Trainer {
            params,
            opt,
            cfg: cfg.clone(),
            step: 0,
            records: Vec::new(),
            pending_loss: 0.0,
            pending_steps: 0,
            elapsed: 0.0,
        })
    }

    pub fn done(&self) -> bool {
        self.step >= self.cfg.steps
    }

    /// Trains up to (not past) step `until`, evaluating on schedule.
    pub fn run_until(&mut self, data: &mut TrainData, until: usize) -> Result<()> {
        if data.vocab != self.params.config.vocab {
            return Err(Error::InvalidConfig(format!(
                "data vocabulary {} differs from model vocabulary {}",
                data.vocab, self.params.config.vocab
            )));
        }
        let until = until.min(self.cfg.steps);
        while self.step < until {
            let started = Instant::now();
            let batch = data.train.batch_at(self.step);
            let out = train_step(&mut self.params, &mut self.opt, &batch, self.step, &self.cfg)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("{m} (step {})", self.step)),
                    e => e,
                })?;
            self.pending_loss += out.loss;
            self.pending_steps += 1;
            self.step += 1;
            if self.step.is_multiple_of(self.cfg.eval_interval) || self.step == self.cfg.steps {
                let (nats, count) = evaluate(&self.params, &data.eval)?;
                let bpb = data.eval_bytes.map(|b| bits_per_byte("eval", nats, count as usize, b)).transpose()?;
                self.elapsed += started.elapsed().as_secs_f64();
                self.records.push(LedgerRecord {
                    step: self.step,
                    train_loss: self.pending_loss / self.pending_steps as f64,
                    eval_loss: nats / count,
                    bpb: bpb.map(|r| r.bpb),
                    wall_seconds: self.elapsed,
                });
                self.pending_loss = 0.0;
                self.pending_steps = 0;
            } else {
                self.elapsed += started.elapsed().as_secs_f64();
            }
        }
        Ok(())
    }

    pub fn ledger(&self, label: &str) -> RunLedger {
        RunLedger {
            label: label.to_string(),
            config: self.params.config.clone(),
            train: self.cfg.clone(),
            records: self.records.clone(),
            audit: self.params.audit(),
        }
    }

    /// Model tensors plus `adam.m.*`/`adam.v.*` moments and loop state.
    pub fn to_checkpoint(&self) -> Checkpoint<S> {
        let mut ck = self.params.to_checkpoint();
        let names: Vec<String> = self.params.named_tensors().into_iter().map(|(n, _, _)| n).collect();
        for (n, m) in names.iter().zip(&self.opt.m) {
            ck.tensors.push((format!("adam.m.{n}"), m.clone()));
        }
        for (n, v) in names.iter().zip(&self.opt.v) {
            ck.tensors.push((format!("adam.v.{n}"), v.clone()));
        }
        let records: Vec<serde_json::Value> = self
            .records
            .iter()
            .map(|r| {
                serde_json::json!([
                    r.step,
                    r.train_loss.to_bits(),
                    r.eval_loss.to_bits(),
                    r.bpb.map(f64::to_bits),
                    r.wall_seconds
                ])
            })
            .collect();
        let state = serde_json::json!({
            "step": self.step,
            "adam_t": self.opt.t,
            "pending_loss": self.pending_loss.to_bits(),
            "pending_steps": self.pending_steps,
            "elapsed": self.elapsed,
            "records": records,
        });
        ck.meta.insert("train".into(), serde_json::to_string(&self.cfg).expect("config serializes"));
        ck.meta.insert("state".into(), state.to_string());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint<S>) -> Result<Self> {
        let params = ModelParams::from_checkpoint(ck)?;
        let cfg: TrainConfig =
            serde_json::from_str(ck.meta("train")?).map_err(|e| Error::Format(format!("train config: {e}")))?;
        let mut tr = Trainer::from_params(params, &cfg)?;
        let names: Vec<(String, Vec<usize>)> =
            tr.params.named_tensors().into_iter().map(|(n, _, t)| (n, t.shape().to_vec())).collect();
        for (i, (n, shape)) in names.iter().enumerate() {
            for (kind, dst) in [("m", &mut tr.opt.m[i]), ("v", &mut tr.opt.v[i])] {
                let t = ck.get(&format!("adam.{kind}.{n}")).ok_or_else(|| Error::Format(format!("missing adam.{kind}.{n}")))?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::Format(format!("adam.{kind}.{n} has shape {:?}", t.shape())));
                }
                *dst = t.clone();
            }
        }
        let state: serde_json::Value =
            serde_json::from_str(ck.meta("state")?).map_err(|e| Error::Format(format!("trainer state: {e}")))?;
        let bad = || Error::Format("malformed trainer state".into());
        let u = |k: &str| state[k].as_u64().ok_or_else(bad);
        tr.step = u("step")? as usize;
        tr.opt.t = u("adam_t")?;
        tr.pending_loss = f64::from_bits(u("pending_loss")?);
        tr.pending_steps = u("pending_steps")? as usize;
        tr.elapsed = state["elapsed"].as_f64().ok_or_else(bad)?;
        for r in state["records"].as_array().ok_or_else(bad)? {
            let bits = |i: usize| r[i].as_u64().ok_or_else(bad);
            tr.records.push(LedgerRecord {
                step: bits(0)? as usize,
                train_loss: f64::from_bits(bits(1)?),
                eval_loss: f64::from_bits(bits(2)?),
                bpb: if r[3].is_null() { None } else { Some(f64::from_bits(bits(3)?)) },
                wall_seconds: r[4].as_f64().ok_or_else(bad)?,
            });
        }
        Ok(tr)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path, StorageDtype::F64)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Ledgers of a matched comparison; `gains[i]` is the first (baseline)
/// run's final eval loss minus run `i`'s.
#[derive(Clone, Debug, Serialize)]
pub struct Experiment {
    pub ledgers: Vec<RunLedger>,
    pub gains: Vec<f64>,
}

impl Experiment {
    /// Plain-text table of final metrics.
    pub fn summary_table(&self) -> String {
        let mut s = format!("{:<24} {:>12} {:>12} {:>12} {:>10}\n", "run", "params", "eval_loss", "gain", "bpb");
        for (l, g) in self.ledgers.iter().zip(&self.gains) {
            let last = l.records.last();
            let bpb = last.and_then(|r| r.bpb).map_or("-".to_string(), |b| format!("{b:.4}"));
            s += &format!(
                "{:<24} {:>12} {:>12.6} {:>12.6} {:>10}\n",
                l.label,
                l.audit.total,
                last.map_or(f64::NAN, |r| r.eval_loss),
                g,
                bpb
            );
        }
        s
    }
}

/// Checks that configs differ only in memory architecture.
pub fn check_comparison_set(configs: &[ModelConfig]) -> Result<()> {
    let Some(first) = configs.first() else {
        return Err(Error::InvalidConfig("comparison set is empty".into()));
    };
    for c in configs {
        c.validate()?;
        let key = |c: &ModelConfig| (c.layers, c.d_model, c.heads, c.vocab, c.max_len, c.seed);
        if key(c) != key(first) {
            return Err(Error::InvalidConfig(format!(
                "mismatched comparison set: {} differs from {} in layers, width, heads, vocab, context or seed",
                c.variant, first.variant
            )));
        }
    }
    Ok(())
}

/// Short name for a run: `standard`, `lave-x1`, `move-x4`, `move-x1-ungated`.
pub fn run_label(c: &ModelConfig) -> String {
    let mut s = c.variant.to_string();
    if c.variant.is_move() || c.variant.is_lave() {
        s += &format!("-x{}", c.scale);
    }
    if c.variant.is_move() && c.std_path == StdPath::Ungated {
        s += "-ungated";
    }
    s
}

/// Trains every config on the identical token stream and step schedule.
pub fn run_experiment<S: Scalar>(configs: &[ModelConfig], cfg: &TrainConfig, data: &TrainData) -> Result<Experiment> {
    Ok(run_experiment_models::<S>(configs, cfg, data)?.0)
}

/// [`run_experiment`] that also hands back the trained models.
pub fn run_experiment_models<S: Scalar>(
    configs: &[ModelConfig],
    cfg: &TrainConfig,
    data: &TrainData,
) -> Result<(Experiment, Vec<ModelParams<S>>)> {
    check_comparison_set(configs)?;
    let mut ledgers = Vec::with_capacity(configs.len());
    let mut models = Vec::with_capacity(configs.len());
    for c in configs {
        let mut tr = Trainer::<S>::new(c, cfg)?;
        tr.run_until(&mut data.clone(), cfg.steps)?;
        ledgers.push(tr.ledger(&run_label(c)));
        models.push(tr.params);
    }
    let base = ledgers[0].final_eval().unwrap_or(f64::NAN);
    let gains = ledgers.iter().map(|l| base - l.final_eval().unwrap_or(f64::NAN)).collect();
    Ok((Experiment { ledgers, gains }, models))
}

/// Fixed single-sequence evaluation helper for text.
pub fn eval_tokens<S: Scalar>(params: &ModelParams<S>, tokens: &[usize], window: usize) -> Result<(f64, usize)> {
    if tokens.len() < 2 {
        return Err(Error::InvalidConfig("need at least two tokens to evaluate".into()));
    }
    let window = window.min(params.config.max_len);
    let mut nats = 0.0;
    let mut count = 0;
    for chunk_start in (0..tokens.len() - 1).step_by(window) {
        let end = (chunk_start + window).min(tokens.len() - 1);
        let batch = Batch {
            inputs: tokens[chunk_start..end].to_vec(),
            targets: tokens[chunk_start + 1..end + 1].to_vec(),
            weights: None,
            seq: SeqShape::single(end - chunk_start),
        };
        nats += evaluate(params, std::slice::from_ref(&batch))?.0;
        count += end - chunk_start;
    }
    Ok((nats, count))
}
