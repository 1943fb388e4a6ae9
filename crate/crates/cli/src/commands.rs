//! Subcommand implementations. Each writes a `manifest.toml` into its
//! output directory when one is given.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;

use movelab::costmodel::FlopReport;
use movelab::data::{detokenize, tokenize_bytes, BYTE_VOCAB};
use movelab::model::{bits_per_byte, generate, EvalReport, ModelParams, Sampling};
use movelab::routelab::{
    analysis_rows, capture_trace, diff_traces, encode_sentence, parse_sentence_file, per_head_csv, rows_to_csv,
    rows_to_jsonl, ContextLength, GateTrace, SentenceEncoding, SentenceRole, TraceDiff, TraceSet,
};
use movelab::trainer::{eval_tokens, evaluate, run_experiment_models, run_label, RunLedger, Trainer};

use crate::config::{data_vocab, load_data, RunConfig};
use crate::{runtime, usage, CliResult};

/// Where a command writes, plus how chatty it is on stderr.
#[derive(Clone, Debug)]
pub struct Output {
    pub dir: Option<PathBuf>,
    pub verbosity: u8,
}

impl Output {
    pub fn to(dir: impl Into<PathBuf>) -> Self {
        Output { dir: Some(dir.into()), verbosity: 0 }
    }

    fn info(&self, msg: impl AsRef<str>) {
        if self.verbosity > 0 {
            eprintln!("{}", msg.as_ref());
        }
    }

    fn prepare(&self) -> CliResult<()> {
        if let Some(d) = &self.dir {
            fs::create_dir_all(d).with_context(|| format!("cannot create {}", d.display())).map_err(usage)?;
        }
        Ok(())
    }

    fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<()> {
        if let Some(d) = &self.dir {
            let path = d.join(name);
            fs::write(&path, contents).with_context(|| format!("cannot write {}", path.display())).map_err(runtime)?;
        }
        Ok(())
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(name))
    }

    fn manifest(&self, cfg: &RunConfig) -> CliResult<()> {
        self.write("manifest.toml", cfg.to_toml().map_err(usage)?)
    }
}

fn load_model(path: &Path) -> CliResult<ModelParams<f64>> {
    ModelParams::load(path).with_context(|| format!("cannot load checkpoint {}", path.display())).map_err(usage)
}

fn timing_jsonl(ledger: &RunLedger) -> String {
    ledger.records.iter().map(|r| format!("{{\"step\":{},\"wall_seconds\":{}}}\n", r.step, r.wall_seconds)).collect()
}

/// Trains one model; writes `ledger.jsonl`, `timing.jsonl`, `trainer.ckpt`
/// (at every evaluation) and `model.ckpt`.
pub fn cmd_train(cfg: &RunConfig, resume: Option<&Path>, out: &Output) -> CliResult<RunLedger> {
    let data_cfg = cfg.data().map_err(usage)?;
    let model = cfg.model_config(None, data_vocab(data_cfg)).map_err(usage)?;
    cfg.train.validate().map_err(|e| usage(e.into()))?;
    let mut loaded = load_data(data_cfg, &cfg.train).map_err(usage)?;
    out.prepare()?;
    out.manifest(&cfg.resolved("train", Some(&model)).map_err(usage)?)?;
    let mut tr = match resume {
        Some(path) => {
            let tr = Trainer::<f64>::load(path)
                .with_context(|| format!("cannot resume from {}", path.display()))
                .map_err(usage)?;
            if tr.params.config != model || tr.cfg != cfg.train {
                return Err(usage(anyhow::anyhow!("checkpoint {} was written by a different config", path.display())));
            }
            tr
        }
        None => Trainer::new(&model, &cfg.train).map_err(|e| usage(e.into()))?,
    };
    let label = run_label(&model);
    while !tr.done() {
        let next = (tr.step / cfg.train.eval_interval + 1) * cfg.train.eval_interval;
        tr.run_until(&mut loaded.data, next).map_err(|e| runtime(e.into()))?;
        if let Some(r) = tr.records.last() {
            out.info(format!("{label} step {} train {:.4} eval {:.4}", r.step, r.train_loss, r.eval_loss));
        }
        if let Some(p) = out.path("trainer.ckpt") {
            tr.save(&p).map_err(|e| runtime(e.into()))?;
        }
    }
    let ledger = tr.ledger(&label);
    out.write("ledger.jsonl", ledger.to_jsonl())?;
    out.write("timing.jsonl", timing_jsonl(&ledger))?;
    if let Some(p) = out.path("model.ckpt") {
        tr.params.save(&p, Default::default()).map_err(|e| runtime(e.into()))?;
    }
    Ok(ledger)
}

/// Held-out loss of a checkpoint on the config's data, or BPB on a text file.
pub fn cmd_eval(checkpoint: &Path, cfg: Option<&RunConfig>, text: Option<&Path>, out: &Output) -> CliResult<EvalReport> {
    let params = load_model(checkpoint)?;
    out.prepare()?;
    let report = if let Some(path) = text {
        if params.config.vocab != BYTE_VOCAB {
            return Err(usage(anyhow::anyhow!("text evaluation needs a byte-level model (vocab {BYTE_VOCAB})")));
        }
        let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display())).map_err(usage)?;
        let seq = tokenize_bytes(&bytes).with_context(|| path.display().to_string()).map_err(usage)?;
        let (nats, count) = eval_tokens(&params, &seq.tokens, params.config.max_len).map_err(|e| runtime(e.into()))?;
        bits_per_byte(&path.display().to_string(), nats, count, count).map_err(|e| runtime(e.into()))?
    } else {
        let cfg = cfg.ok_or_else(|| usage(anyhow::anyhow!("eval needs --config with [data] or --text")))?;
        let mut train = cfg.train.clone();
        train.seq_len = train.seq_len.min(params.config.max_len);
        let loaded = load_data(cfg.data().map_err(usage)?, &train).map_err(usage)?;
        if loaded.data.vocab != params.config.vocab {
            return Err(usage(anyhow::anyhow!("checkpoint vocabulary differs from the data")));
        }
        let (nats, count) = evaluate(&params, &loaded.data.eval).map_err(|e| runtime(e.into()))?;
        let bytes = loaded.data.eval_bytes.unwrap_or(0);
        EvalReport {
            label: run_label(&params.config),
            total_loss_nats: nats,
            token_count: count as usize,
            byte_count: bytes,
            bpb: if bytes > 0 { nats / std::f64::consts::LN_2 / bytes as f64 } else { f64::NAN },
        }
    };
    if let Some(c) = cfg {
        out.manifest(&c.resolved("eval", Some(&params.config)).map_err(usage)?)?;
    }
    out.write("eval.json", serde_json::to_string_pretty(&report).map_err(|e| runtime(e.into()))?)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GenerateSpec {
    pub prompt: String,
    /// Prompt given as whitespace-separated token ids.
    pub ids: bool,
    pub steps: usize,
    /// Zero means greedy.
    pub temperature: f64,
    pub seed: u64,
}

/// Continues a prompt; returns text for byte models, ids otherwise.
pub fn cmd_generate(checkpoint: &Path, spec: &GenerateSpec, out: &Output) -> CliResult<String> {
    let params = load_model(checkpoint)?;
    let prompt: Vec<usize> = if spec.ids {
        spec.prompt
            .split_whitespace()
            .map(|t| t.parse().with_context(|| format!("bad token id {t:?}")))
            .collect::<anyhow::Result<_>>()
            .map_err(usage)?
    } else {
        spec.prompt.bytes().map(usize::from).collect()
    };
    let sampling = if spec.temperature > 0.0 {
        Sampling::Temperature { temperature: spec.temperature, seed: spec.seed }
    } else {
        Sampling::Greedy
    };
    let tokens = generate(&params, &prompt, spec.steps, sampling).map_err(|e| usage(e.into()))?;
    let text = if spec.ids || params.config.vocab != BYTE_VOCAB {
        tokens.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
    } else {
        detokenize(&tokens).unwrap_or_else(|_| String::from_utf8_lossy(&tokens.iter().map(|&t| t as u8).collect::<Vec<_>>()).into_owned())
    };
    if out.dir.is_some() {
        out.prepare()?;
        let mut manifest = toml::Table::new();
        manifest.insert("tool".into(), "movelab".into());
        manifest.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        manifest.insert("subcommand".into(), "generate".into());
        manifest.insert("checkpoint".into(), checkpoint.display().to_string().into());
        let spec_table = toml::Table::try_from(spec).map_err(|e| runtime(e.into()))?;
        let mut doc = toml::Table::new();
        doc.insert("manifest".into(), manifest.into());
        doc.insert("generate".into(), spec_table.into());
        out.write("manifest.toml", toml::to_string(&doc).map_err(|e| runtime(e.into()))?)?;
        out.write("generated.txt", format!("{text}\n"))?;
    }
    Ok(text)
}

/// Closed-form cost report; `machine` selects `key=value` lines.
pub fn cmd_flops(d: u64, heads: u64, slots: u64, context: u64, machine: bool, out: &Output) -> CliResult<String> {
    if d == 0 || heads == 0 {
        return Err(usage(anyhow::anyhow!("d and heads must be positive")));
    }
    let r = FlopReport::new(d, heads, slots, context);
    let text = if machine { r.to_key_values() } else { r.to_text() };
    if out.dir.is_some() {
        out.prepare()?;
        let mut m = toml::Table::new();
        m.insert("tool".into(), "movelab".into());
        m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
        m.insert("subcommand".into(), "flops".into());
        let mut args = toml::Table::new();
        for (k, v) in [("d", d), ("heads", heads), ("slots", slots), ("context", context)] {
            args.insert(k.into(), toml::Value::Integer(v as i64));
        }
        let mut doc = toml::Table::new();
        doc.insert("manifest".into(), m.into());
        doc.insert("flops".into(), args.into());
        out.write("manifest.toml", toml::to_string(&doc).map_err(|e| runtime(e.into()))?)?;
        out.write("flops.txt", &text)?;
    }
    Ok(text)
}

pub struct TraceOutput {
    pub sets: Vec<TraceSet>,
    pub diffs: Vec<TraceDiff>,
    pub summary: String,
}

/// Gate traces for every sentence of a sentence file, plus the control and
/// semantic differences. Writes `trace.csv`, `trace.jsonl`,
/// `trace_per_head.csv` and `trace_summary.txt`.
pub fn cmd_trace(
    checkpoint: &Path,
    sentences: &Path,
    encoding: Option<SentenceEncoding>,
    out: &Output,
) -> CliResult<TraceOutput> {
    let params = load_model(checkpoint)?;
    if !params.config.variant.is_move() {
        return Err(usage(anyhow::anyhow!("{} is a {} model; traces need a move variant", checkpoint.display(), params.config.variant)));
    }
    let text = fs::read_to_string(sentences)
        .with_context(|| format!("cannot read sentence file {}", sentences.display()))
        .map_err(usage)?;
    let parsed = parse_sentence_file(&text).with_context(|| sentences.display().to_string()).map_err(usage)?;
    let encoding = encoding.unwrap_or(if params.config.vocab == BYTE_VOCAB {
        SentenceEncoding::Bytes
    } else {
        SentenceEncoding::Ids
    });
    out.prepare()?;
    let mut traces: BTreeMap<(ContextLength, SentenceRole), GateTrace> = BTreeMap::new();
    for ((context, role), s) in &parsed {
        let (tokens, positions) = encode_sentence(&s.text, encoding)
            .with_context(|| format!("{context} {role}"))
            .map_err(usage)?;
        let t = capture_trace(&params, &tokens, &positions, *context, *role)
            .with_context(|| format!("{context} {role}"))
            .map_err(usage)?;
        traces.insert((*context, *role), t);
    }
    let sets: Vec<TraceSet> = ContextLength::ALL
        .into_iter()
        .map(|c| TraceSet {
            context: c,
            a1: traces[&(c, SentenceRole::A1)].clone(),
            a2: traces[&(c, SentenceRole::A2)].clone(),
            b1: traces[&(c, SentenceRole::B1)].clone(),
        })
        .collect();
    let diffs = diff_traces(&sets).map_err(|e| usage(e.into()))?;
    let rows = analysis_rows(&sets, &diffs);
    out.write("trace.csv", rows_to_csv(&rows).map_err(|e| runtime(e.into()))?)?;
    out.write("trace.jsonl", rows_to_jsonl(&rows))?;
    let all: Vec<&GateTrace> = sets.iter().flat_map(|s| [&s.a1, &s.a2, &s.b1]).collect();
    out.write("trace_per_head.csv", per_head_csv(&all))?;
    let mut summary = format!("global max difference: {:?}\n", diffs.first().map_or(0.0, |d| d.global_max));
    for d in &diffs {
        match d.summary() {
            Some((c, s)) => summary += &format!("{}: control {c:.4} semantic {s:.4}\n", d.context),
            None => summary += &format!("{}: degenerate (all traces identical)\n", d.context),
        }
    }
    out.write("trace_summary.txt", &summary)?;
    let mut m = toml::Table::new();
    m.insert("tool".into(), "movelab".into());
    m.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    m.insert("subcommand".into(), "trace".into());
    m.insert("checkpoint".into(), checkpoint.display().to_string().into());
    m.insert("sentences".into(), sentences.display().to_string().into());
    m.insert("encoding".into(), serde_json::to_value(encoding).ok().and_then(|v| v.as_str().map(String::from)).unwrap_or_default().into());
    let mut doc = toml::Table::new();
    doc.insert("manifest".into(), m.into());
    out.write("manifest.toml", toml::to_string(&doc).map_err(|e| runtime(e.into()))?)?;
    Ok(TraceOutput { sets, diffs, summary })
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRun {
    pub seed: u64,
    pub label: String,
    pub final_eval: f64,
    pub gain: f64,
    pub params: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepResult {
    pub runs: Vec<SweepRun>,
    /// Label → median final eval loss over seeds.
    pub medians: BTreeMap<String, f64>,
    /// Labels in config order.
    pub labels: Vec<String>,
}

impl SweepResult {
    pub fn table(&self) -> String {
        let mut s = String::from("run                        median_eval   per-seed\n");
        for l in &self.labels {
            let per: Vec<String> = self
                .runs
                .iter()
                .filter(|r| &r.label == l)
                .map(|r| format!("{}:{:.6}", r.seed, r.final_eval))
                .collect();
            s += &format!("{l:<26} {:>12.6}   {}\n", self.medians[l], per.join(" "));
        }
        s
    }
}

pub fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// Matched comparison over `[sweep].runs` for every seed. Writes
/// `seed-<s>/<label>.jsonl`, `seed-<s>/<label>.ckpt`, `sweep.json` and
/// `summary.txt`.
pub fn cmd_sweep(cfg: &RunConfig, out: &Output) -> CliResult<SweepResult> {
    let sweep = cfg.sweep.as_ref().ok_or_else(|| usage(anyhow::anyhow!("config has no [sweep] section")))?;
    let data_cfg = cfg.data().map_err(usage)?;
    let vocab = data_vocab(data_cfg);
    if sweep.runs.is_empty() {
        return Err(usage(anyhow::anyhow!("[sweep] lists no runs")));
    }
    let seeds = if sweep.seeds.is_empty() { vec![cfg.train.seed] } else { sweep.seeds.clone() };
    let base: Vec<_> =
        sweep.runs.iter().map(|r| cfg.model_config(Some(r), vocab)).collect::<anyhow::Result<_>>().map_err(usage)?;
    let labels: Vec<String> = base.iter().map(run_label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(usage(anyhow::anyhow!("[sweep] lists run {l} twice")));
        }
    }
    cfg.train.validate().map_err(|e| usage(e.into()))?;
    out.prepare()?;
    out.manifest(&cfg.resolved("sweep", None).map_err(usage)?)?;
    let mut runs = Vec::new();
    for &seed in &seeds {
        let mut train = cfg.train.clone();
        train.seed = seed;
        let configs: Vec<_> = base.iter().cloned().map(|mut c| {
            c.seed = seed;
            c
        }).collect();
        let loaded = load_data(data_cfg, &train).map_err(usage)?;
        out.info(format!("seed {seed}: {} runs of {} steps", configs.len(), train.steps));
        let (exp, models) =
            run_experiment_models::<f64>(&configs, &train, &loaded.data).map_err(|e| runtime(e.into()))?;
        let sub = format!("seed-{seed}");
        if let Some(d) = out.path(&sub) {
            fs::create_dir_all(&d).with_context(|| d.display().to_string()).map_err(runtime)?;
        }
        for ((ledger, gain), params) in exp.ledgers.iter().zip(&exp.gains).zip(&models) {
            out.write(&format!("{sub}/{}.jsonl", ledger.label), ledger.to_jsonl())?;
            if let Some(p) = out.path(&format!("{sub}/{}.ckpt", ledger.label)) {
                params.save(&p, Default::default()).map_err(|e| runtime(e.into()))?;
            }
            let final_eval = ledger.final_eval().unwrap_or(f64::NAN);
            out.info(format!("seed {seed} {} final eval {final_eval:.6}", ledger.label));
            runs.push(SweepRun { seed, label: ledger.label.clone(), final_eval, gain: *gain, params: ledger.audit.total });
        }
        out.write(&format!("{sub}/summary.txt"), exp.summary_table())?;
    }
    let medians = labels
        .iter()
        .map(|l| {
            let mut v: Vec<f64> = runs.iter().filter(|r| &r.label == l).map(|r| r.final_eval).collect();
            (l.clone(), median(&mut v))
        })
        .collect();
    let result = SweepResult { runs, medians, labels };
    out.write("sweep.json", serde_json::to_string_pretty(&result).map_err(|e| runtime(e.into()))?)?;
    out.write("summary.txt", result.table())?;
    Ok(result)
}

/// Writes to stdout, ignoring a closed pipe.
pub fn emit(text: &str) {
    let mut stdout = std::io::stdout().lock();
    let _ = stdout.write_all(text.as_bytes());
    if !text.ends_with('\n') {
        let _ = stdout.write_all(b"\n");
    }
}
