//! Declarative run files and their resolution into concrete configs.
//!
//! ```toml
//! [model]            # any ModelConfig field; vocab defaults to the data's
//! variant = "move"
//! layers = 4
//! d_model = 128
//! heads = 4
//! max_len = 32
//!
//! [train]            # any TrainConfig field
//! steps = 10000
//!
//! [data.facts]       # or [data.text] with `path` and `holdout`
//! key_vocab = 512
//! def_vocab = 64
//! def_len = 4
//! facts = 2000
//! epochs = 10
//! seed = 0
//!
//! [sweep]            # only for `sweep`
//! seeds = [0, 1, 2]
//! runs = [{ variant = "standard" }, { variant = "move", scale = 4 }]
//! ```
//!
//! A `[manifest]` table is accepted and ignored, so a written manifest can
//! be fed back as a config.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use movelab::data::{
    gen_fact_corpus, split_holdout, tokenize_bytes, FactCorpus, FactTaskSpec, BYTE_VOCAB,
};
use movelab::model::ModelConfig;
use movelab::trainer::{TrainConfig, TrainData};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataConfig {
    Facts(FactTaskSpec),
    Text(TextData),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextData {
    pub path: PathBuf,
    /// Trailing fraction held out for evaluation.
    #[serde(default = "default_holdout")]
    pub holdout: f64,
}

fn default_holdout() -> f64 {
    0.05
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Per-run overrides of the `[model]` table; the first is the baseline.
    pub runs: Vec<toml::Table>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<toml::Table>,
    #[serde(default)]
    pub model: toml::Table,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: RunConfig = toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        // Relative data paths are taken from the config's directory.
        if let Some(DataConfig::Text(t)) = &mut cfg.data {
            if t.path.is_relative() {
                if let Some(dir) = path.parent() {
                    t.path = dir.join(&t.path);
                }
            }
        }
        Ok(cfg)
    }

    /// Applies `--seed`: model init, data order and sweep seeds.
    pub fn override_seed(&mut self, seed: u64) {
        self.model.insert("seed".into(), toml::Value::Integer(seed as i64));
        self.train.seed = seed;
        if let Some(s) = &mut self.sweep {
            s.seeds = vec![seed];
        }
    }

    pub fn data(&self) -> Result<&DataConfig> {
        self.data.as_ref().context("config has no [data] section")
    }

    /// The `[model]` table with `overrides` applied and the vocabulary filled in.
    pub fn model_config(&self, overrides: Option<&toml::Table>, vocab: usize) -> Result<ModelConfig> {
        let mut t = self.model.clone();
        if let Some(o) = overrides {
            t.extend(o.clone());
        }
        t.entry("vocab").or_insert(toml::Value::Integer(vocab as i64));
        let c: ModelConfig = t.try_into().context("invalid [model] section")?;
        c.validate()?;
        if c.vocab != vocab {
            bail!("model vocabulary {} differs from the data vocabulary {vocab}", c.vocab);
        }
        Ok(c)
    }

    /// Rewrites the config with every model field resolved.
    pub fn resolved(&self, subcommand: &str, model: Option<&ModelConfig>) -> Result<RunConfig> {
        let mut out = self.clone();
        let mut info = toml::Table::new();
        info.insert("tool".into(), "movelab".into());
        info.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        info.insert("subcommand".into(), subcommand.into());
        out.manifest = Some(info);
        if let Some(m) = model {
            out.model = toml::Table::try_from(m).context("model config as TOML")?;
        }
        Ok(out)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).context("serializing manifest")
    }
}

/// Materialized data for one config.
pub struct LoadedData {
    pub data: TrainData,
    pub corpus: Option<FactCorpus>,
}

pub fn load_data(data: &DataConfig, train: &TrainConfig) -> Result<LoadedData> {
    match data {
        DataConfig::Facts(spec) => {
            let corpus = gen_fact_corpus(spec)?;
            Ok(LoadedData { data: TrainData::facts(&corpus, train)?, corpus: Some(corpus) })
        }
        DataConfig::Text(t) => {
            let bytes = fs::read(&t.path).with_context(|| format!("cannot read text {}", t.path.display()))?;
            let seq = tokenize_bytes(&bytes).with_context(|| format!("text {}", t.path.display()))?;
            let (train_tokens, eval_tokens) = split_holdout(&seq.tokens, t.holdout);
            Ok(LoadedData { data: TrainData::bytes(train_tokens, eval_tokens, train)?, corpus: None })
        }
    }
}

pub fn data_vocab(data: &DataConfig) -> usize {
    match data {
        DataConfig::Facts(spec) => spec.vocab(),
        DataConfig::Text(_) => BYTE_VOCAB,
    }
}
