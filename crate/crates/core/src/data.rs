//! Byte tokenization, the synthetic fact-recall task, and windowed batching.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::SeqShape;
use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub tokens: Vec<usize>,
    /// Raw UTF-8 length of the source text.
    pub byte_length: usize,
}

/// One token per byte of valid UTF-8.
pub fn tokenize_bytes(bytes: &[u8]) -> Result<TokenSequence> {
    std::str::from_utf8(bytes)?;
    Ok(TokenSequence { tokens: bytes.iter().map(|&b| usize::from(b)).collect(), byte_length: bytes.len() })
}

pub fn tokenize_str(text: &str) -> TokenSequence {
    TokenSequence { tokens: text.bytes().map(usize::from).collect(), byte_length: text.len() }
}

pub fn detokenize(tokens: &[usize]) -> Result<String> {
    let bytes = tokens
        .iter()
        .enumerate()
        .map(|(position, &t)| {
            u8::try_from(t).map_err(|_| Error::TokenOutOfRange { position, token: t, vocab: BYTE_VOCAB })
        })
        .collect::<Result<Vec<u8>>>()?;
    Ok(std::str::from_utf8(&bytes)?.to_string())
}

/// Splits off the final `fraction` of a stream as held-out data.
pub fn split_holdout(tokens: &[usize], fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let n_eval = ((tokens.len() as f64) * fraction).round() as usize;
    let cut = tokens.len() - n_eval.min(tokens.len());
    (tokens[..cut].to_vec(), tokens[cut..].to_vec())
}

pub const SEP: usize = 0;
pub const EOS: usize = 1;

/// Fact-recall task: each record is `<key tokens> SEP <definition> EOS`.
///
/// Keys are `key_len` tokens drawn from `key_vocab` symbols, so the task
/// can hold up to `key_vocab^key_len` facts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FactTaskSpec {
    pub key_vocab: usize,
    #[serde(default = "two")]
    pub key_len: usize,
    pub def_vocab: usize,
    pub def_len: usize,
    pub facts: usize,
    /// Shuffled passes over the fact table in the training stream.
    pub epochs: usize,
    pub seed: u64,
}

fn two() -> usize {
    2
}

impl FactTaskSpec {
    pub fn vocab(&self) -> usize {
        2 + self.key_vocab + self.def_vocab
    }

    pub fn record_len(&self) -> usize {
        self.key_len + self.def_len + 2
    }

    pub fn key_token(&self, symbol: usize) -> usize {
        2 + symbol
    }

    pub fn def_token(&self, symbol: usize) -> usize {
        2 + self.key_vocab + symbol
    }

    pub fn is_def_token(&self, token: usize) -> bool {
        token >= 2 + self.key_vocab && token < self.vocab()
    }

    fn validate(&self) -> Result<()> {
        if self.key_vocab == 0 || self.key_len == 0 || self.def_vocab == 0 || self.def_len == 0 || self.facts == 0 {
            return Err(Error::InvalidConfig("fact task sizes must be positive".into()));
        }
        let capacity = (self.key_vocab as f64).powi(self.key_len as i32);
        if self.facts as f64 > capacity {
            return Err(Error::InvalidConfig(format!(
                "{} facts oversubscribe {} keys of {} symbols",
                self.facts, self.key_vocab, self.key_len
            )));
        }
        Ok(())
    }

    fn header(&self) -> String {
        format!(
            "# movelab-facts key_vocab={} key_len={} def_vocab={} def_len={} facts={} epochs={} seed={}",
            self.key_vocab, self.key_len, self.def_vocab, self.def_len, self.facts, self.epochs, self.seed
        )
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Fact {
    pub key: Vec<usize>,
    pub definition: Vec<usize>,
}

/// Generated fact table with its train and eval streams.
#[derive(Clone, Debug, PartialEq)]
pub struct FactCorpus {
    pub spec: FactTaskSpec,
    pub facts: Vec<Fact>,
    pub train: Vec<usize>,
    /// One pass over every fact in an order not used for training, plus a
    /// trailing `SEP`.
    pub eval: Vec<usize>,
    /// 1 where the eval target (the next token) is a definition token.
    pub eval_weights: Vec<f64>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

fn emit(spec: &FactTaskSpec, facts: &[Fact], order: &[usize], out: &mut Vec<usize>) {
    for &i in order {
        out.extend(&facts[i].key);
        out.push(SEP);
        out.extend(&facts[i].definition);
        out.push(EOS);
    }
    debug_assert_eq!(out.len() % spec.record_len(), 0);
}

pub fn gen_fact_corpus(spec: &FactTaskSpec) -> Result<FactCorpus> {
    spec.validate()?;
    let mut rng = stream_rng(spec.seed, 0);
    let mut seen = HashSet::with_capacity(spec.facts);
    let mut facts = Vec::with_capacity(spec.facts);
    while facts.len() < spec.facts {
        let key: Vec<usize> = (0..spec.key_len).map(|_| spec.key_token(rng.gen_range(0..spec.key_vocab))).collect();
        if !seen.insert(key.clone()) {
            continue;
        }
        let definition = (0..spec.def_len).map(|_| spec.def_token(rng.gen_range(0..spec.def_vocab))).collect();
        facts.push(Fact { key, definition });
    }
    let mut train = Vec::with_capacity(spec.epochs * spec.facts * spec.record_len());
    let mut orders = HashSet::new();
    let mut order: Vec<usize> = (0..spec.facts).collect();
    let mut shuffler = stream_rng(spec.seed, 1);
    for _ in 0..spec.epochs {
        order.shuffle(&mut shuffler);
        orders.insert(order.clone());
        emit(spec, &facts, &order, &mut train);
    }
    let mut eval_rng = stream_rng(spec.seed, 2);
    loop {
        order.shuffle(&mut eval_rng);
        if spec.facts < 3 || !orders.contains(&order) {
            break;
        }
    }
    let mut eval = Vec::with_capacity(spec.facts * spec.record_len() + 1);
    emit(spec, &facts, &order, &mut eval);
    // Trailing pad so record-aligned windows reach the final EOS.
    eval.push(SEP);
    let eval_weights = (0..eval.len())
        .map(|i| if eval.get(i + 1).is_some_and(|&t| spec.is_def_token(t)) { 1.0 } else { 0.0 })
        .collect();
    Ok(FactCorpus { spec: spec.clone(), facts, train, eval, eval_weights })
}

impl FactCorpus {
    /// Line-oriented fact table: a header, then `key tokens<TAB>definition tokens`.
    pub fn table_text(&self) -> String {
        let mut s = self.spec.header();
        s.push('\n');
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        for f in &self.facts {
            let _ = writeln!(s, "{}\t{}", join(&f.key), join(&f.definition));
        }
        s
    }

    /// Parses [`table_text`](Self::table_text) output back into `(spec, facts)`.
    pub fn parse_table(text: &str) -> Result<(FactTaskSpec, Vec<Fact>)> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::Format("empty fact table".into()))?;
        let fields: HashMap<&str, usize> = header
            .strip_prefix("# movelab-facts ")
            .ok_or_else(|| Error::Format("missing fact table header".into()))?
            .split(' ')
            .filter_map(|kv| kv.split_once('='))
            .map(|(k, v)| v.parse().map(|v| (k, v)).map_err(|_| Error::Format(format!("bad header field {kv:?}", kv = k))))
            .collect::<Result<_>>()?;
        let get = |k: &str| fields.get(k).copied().ok_or_else(|| Error::Format(format!("header lacks {k}")));
        let spec = FactTaskSpec {
            key_vocab: get("key_vocab")?,
            key_len: get("key_len")?,
            def_vocab: get("def_vocab")?,
            def_len: get("def_len")?,
            facts: get("facts")?,
            epochs: get("epochs")?,
            seed: get("seed")? as u64,
        };
        let parse = |s: &str| -> Result<Vec<usize>> {
            s.split(' ').map(|t| t.parse().map_err(|_| Error::Format(format!("bad token {t:?}")))).collect()
        };
        let facts = lines
            .map(|l| {
                let (k, d) = l.split_once('\t').ok_or_else(|| Error::Format(format!("bad fact line {l:?}")))?;
                Ok(Fact { key: parse(k)?, definition: parse(d)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok((spec, facts))
    }
}

/// A batch of next-token windows.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    /// Per-target weights when the stream carries a mask.
    pub weights: Option<Vec<f64>>,
    pub seq: SeqShape,
}

/// Non-overlapping windows of `len + 1` tokens (stride `len`), visited in a
/// fresh seeded order every epoch. The final partial window is dropped.
#[derive(Clone, Debug)]
pub struct ShardStream {
    tokens: Vec<usize>,
    weights: Option<Vec<f64>>,
    len: usize,
    batch: usize,
    seed: u64,
    windows: usize,
    order: Option<(usize, Vec<usize>)>,
}

impl ShardStream {
    pub fn new(tokens: Vec<usize>, len: usize, batch: usize, seed: u64) -> Result<Self> {
        if len == 0 || batch == 0 {
            return Err(Error::InvalidConfig("window length and batch size must be positive".into()));
        }
        if tokens.len() < len + 1 {
            return Err(Error::InvalidConfig(format!(
                "stream of {} tokens is shorter than one window of {}",
                tokens.len(),
                len + 1
            )));
        }
        let windows = (tokens.len() - 1) / len;
        Ok(ShardStream { tokens, weights: None, len, batch, seed, windows, order: None })
    }

    /// Attaches per-position target weights (`weights[i]` weighs predicting `tokens[i+1]`).
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.tokens.len() {
            return Err(Error::ShapeMismatch { op: "stream weights", lhs: vec![self.tokens.len()], rhs: vec![weights.len()] });
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn windows(&self) -> usize {
        self.windows
    }

    fn epoch_order(&mut self, epoch: usize) -> &[usize] {
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.windows).collect();
            order.shuffle(&mut stream_rng(self.seed, epoch as u64));
            self.order = Some((epoch, order));
        }
        &self.order.as_ref().expect("order just set").1
    }

    fn window(&self, w: usize, batch: &mut Batch) {
        let start = w * self.len;
        batch.inputs.extend(&self.tokens[start..start + self.len]);
        batch.targets.extend(&self.tokens[start + 1..start + self.len + 1]);
        if let (Some(out), Some(ws)) = (batch.weights.as_mut(), &self.weights) {
            out.extend(&ws[start..start + self.len]);
        }
    }

    fn empty_batch(&self, rows: usize) -> Batch {
        Batch {
            inputs: Vec::with_capacity(rows * self.len),
            targets: Vec::with_capacity(rows * self.len),
            weights: self.weights.as_ref().map(|_| Vec::with_capacity(rows * self.len)),
            seq: SeqShape { batch: rows, len: self.len, offset: 0 },
        }
    }

    /// The batch consumed at optimizer step `step`, independent of history.
    pub fn batch_at(&mut self, step: usize) -> Batch {
        let mut batch = self.empty_batch(self.batch);
        for b in 0..self.batch {
            let idx = step * self.batch + b;
            let n = self.windows;
            let w = self.epoch_order(idx / n)[idx % n];
            self.window(w, &mut batch);
        }
        batch
    }

    /// Every window once, in stream order, grouped into batches.
    pub fn in_order(&self) -> Vec<Batch> {
        (0..self.windows)
            .collect::<Vec<_>>()
            .chunks(self.batch)
            .map(|ws| {
                let mut batch = self.empty_batch(ws.len());
                ws.iter().for_each(|&w| self.window(w, &mut batch));
                batch
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(facts: usize, seed: u64) -> FactTaskSpec {
        FactTaskSpec { key_vocab: 40, key_len: 2, def_vocab: 8, def_len: 3, facts, epochs: 3, seed }
    }

    #[test]
    fn byte_tokens() {
        let t = tokenize_bytes(b"AB").unwrap();
        assert_eq!((t.tokens, t.byte_length), (vec![65, 66], 2));
        assert_eq!(tokenize_bytes(b"").unwrap().byte_length, 0);
        assert!(matches!(tokenize_bytes(&[0xff, 0xfe]), Err(Error::InvalidUtf8(_))));
        assert!(detokenize(&[300]).is_err());
    }

    proptest! {
        #[test]
        fn detokenize_inverts_tokenize(s in ".*") {
            let t = tokenize_str(&s);
            prop_assert_eq!(t.tokens.len(), t.byte_length);
            prop_assert_eq!(detokenize(&t.tokens).unwrap(), s);
        }
    }

    #[test]
    fn fact_tables_are_functional_and_seeded() {
        let a = gen_fact_corpus(&spec(200, 1)).unwrap();
        let mut seen = HashMap::new();
        for f in &a.facts {
            assert!(seen.insert(f.key.clone(), f.definition.clone()).is_none());
        }
        let b = gen_fact_corpus(&spec(200, 2)).unwrap();
        assert_ne!(a.facts, b.facts);
        assert_eq!(a, gen_fact_corpus(&spec(200, 1)).unwrap());
        assert_eq!(a.train.len(), 3 * 200 * 7);
        assert_eq!(a.eval_weights.iter().sum::<f64>(), (200 * 3) as f64);
        let (s, facts) = FactCorpus::parse_table(&a.table_text()).unwrap();
        assert_eq!((s, facts), (a.spec.clone(), a.facts.clone()));
    }

    #[test]
    fn eval_order_is_new_but_facts_are_seen() {
        let c = gen_fact_corpus(&spec(50, 3)).unwrap();
        let rec = c.spec.record_len();
        let train_epochs: Vec<&[usize]> = c.train.chunks(50 * rec).collect();
        assert!(train_epochs.iter().all(|e| *e != &c.eval[..50 * rec]));
        let train_records: HashSet<&[usize]> = c.train.chunks(rec).collect();
        assert!(c.eval[..50 * rec].chunks(rec).all(|r| train_records.contains(r)));
    }

    #[test]
    fn oversubscribed_keys_are_rejected() {
        let s = FactTaskSpec { key_vocab: 4, key_len: 1, facts: 5, ..spec(5, 0) };
        assert!(matches!(gen_fact_corpus(&s), Err(Error::InvalidConfig(_))));
        gen_fact_corpus(&FactTaskSpec { facts: 4, ..s }).unwrap();
    }

    #[test]
    fn windows_shift_targets_and_repeat_per_seed() {
        let tokens: Vec<usize> = (0..9).collect();
        let mut s = ShardStream::new(tokens.clone(), 8, 1, 0).unwrap();
        assert_eq!(s.windows(), 1);
        let b = s.batch_at(5);
        assert_eq!(b.inputs, &tokens[..8]);
        assert_eq!(b.targets, &tokens[1..]);
        assert!(ShardStream::new(tokens[..8].to_vec(), 8, 1, 0).is_err());

        let long: Vec<usize> = (0..1000).collect();
        let mut a = ShardStream::new(long.clone(), 10, 4, 9).unwrap();
        let mut b = ShardStream::new(long, 10, 4, 9).unwrap();
        let run_a: Vec<Batch> = (0..60).map(|i| a.batch_at(i)).collect();
        let run_b: Vec<Batch> = (0..60).rev().map(|i| b.batch_at(i)).rev().collect();
        assert_eq!(run_a, run_b);
        for batch in &run_a {
            for (i, t) in batch.inputs.iter().zip(&batch.targets) {
                assert_eq!(i + 1, *t);
            }
        }
        // An epoch visits each window exactly once.
        let firsts: HashSet<usize> = run_a[..24].iter().flat_map(|b| b.inputs.chunks(10).map(|w| w[0])).collect();
        assert_eq!(firsts.len(), 96);
    }

    #[test]
    fn holdout_is_the_tail() {
        let tokens: Vec<usize> = (0..100).collect();
        let (train, eval) = split_holdout(&tokens, 0.05);
        assert_eq!((train.len(), eval[0]), (95, 95));
    }
}
