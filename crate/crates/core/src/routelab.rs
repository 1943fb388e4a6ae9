//! Gate-trace capture and differential routing analysis.
//!
//! A trace is the `L × M` table of mean memory-slot gates at a target word.
//! Three sentences per context length are compared: `A1` and `A2` share the
//! word's meaning, `B1` uses it in a different sense.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextLength {
    Short,
    Medium,
    Long,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum SentenceRole {
    A1,
    A2,
    B1,
}

impl ContextLength {
    pub const ALL: [ContextLength; 3] = [ContextLength::Short, ContextLength::Medium, ContextLength::Long];

    pub fn name(self) -> &'static str {
        match self {
            ContextLength::Short => "short",
            ContextLength::Medium => "medium",
            ContextLength::Long => "long",
        }
    }
}

impl SentenceRole {
    pub const ALL: [SentenceRole; 3] = [SentenceRole::A1, SentenceRole::A2, SentenceRole::B1];

    pub fn name(self) -> &'static str {
        match self {
            SentenceRole::A1 => "A1",
            SentenceRole::A2 => "A2",
            SentenceRole::B1 => "B1",
        }
    }
}

impl fmt::Display for ContextLength {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl fmt::Display for SentenceRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ContextLength {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ContextLength::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown context {s:?} (expected short, medium or long)")))
    }
}

impl FromStr for SentenceRole {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SentenceRole::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Format(format!("unknown role {s:?} (expected A1, A2 or B1)")))
    }
}

/// Mean memory-slot gates at one target word.
#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    /// `[L, M]`, averaged over heads and target positions; the
    /// standard-path gate is left out.
    pub values: Tensor<f64>,
    /// `[L, H, M]`, averaged over target positions only.
    pub per_head: Tensor<f64>,
    pub context: ContextLength,
    pub role: SentenceRole,
    pub target_tokens: Vec<usize>,
    pub positions: Vec<usize>,
}

impl GateTrace {
    pub fn layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn slots(&self) -> usize {
        self.values.shape()[1]
    }
}

/// Runs `tokens` with gate capture and averages the gates at `positions`.
pub fn capture_trace<S: Scalar>(
    params: &ModelParams<S>,
    tokens: &[usize],
    positions: &[usize],
    context: ContextLength,
    role: SentenceRole,
) -> Result<GateTrace> {
    let c = &params.config;
    if !c.variant.is_move() {
        return Err(Error::InvalidConfig(format!("gate traces need a move variant, got {}", c.variant)));
    }
    if positions.is_empty() || positions.iter().any(|&p| p >= tokens.len()) {
        return Err(Error::InvalidConfig(format!(
            "target positions {positions:?} do not occur in a sequence of {} tokens",
            tokens.len()
        )));
    }
    let (_, gates) = params.forward_with_gates(tokens)?;
    let (layers, heads, slots) = (c.layers, c.memory_heads(), c.slots());
    let mut per_head = vec![0.0; layers * heads * slots];
    let mut values = vec![0.0; layers * slots];
    let n = positions.len() as f64;
    for (l, g) in gates.iter().enumerate() {
        let g = g.as_ref().ok_or_else(|| Error::InvalidConfig(format!("layer {l} captured no gates")))?;
        for h in 0..heads {
            for m in 0..slots {
                let mean = positions.iter().map(|&p| g.get(p, h, m + 1).as_f64()).sum::<f64>() / n;
                per_head[(l * heads + h) * slots + m] = mean;
            }
        }
        for m in 0..slots {
            values[l * slots + m] = (0..heads).map(|h| per_head[(l * heads + h) * slots + m]).sum::<f64>() / heads as f64;
        }
    }
    Ok(GateTrace {
        values: Tensor::new(vec![layers, slots], values)?,
        per_head: Tensor::new(vec![layers, heads, slots], per_head)?,
        context,
        role,
        target_tokens: positions.iter().map(|&p| tokens[p]).collect(),
        positions: positions.to_vec(),
    })
}

/// The three traces of one context length.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceSet {
    pub context: ContextLength,
    pub a1: GateTrace,
    pub a2: GateTrace,
    pub b1: GateTrace,
}

/// Control `|A1 − A2|` and semantic `|A1 − B1|` differences for one context.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceDiff {
    pub context: ContextLength,
    pub control: Tensor<f64>,
    pub semantic: Tensor<f64>,
    /// Largest difference over the word's whole context set.
    pub global_max: f64,
    /// `None` when `global_max` is zero.
    pub normalized: Option<(Tensor<f64>, Tensor<f64>)>,
}

impl TraceDiff {
    pub fn degenerate(&self) -> bool {
        self.normalized.is_none()
    }

    /// Mean of the normalized `(control, semantic)` arrays.
    pub fn summary(&self) -> Option<(f64, f64)> {
        self.normalized.as_ref().map(|(c, s)| (c.sum() / c.numel() as f64, s.sum() / s.numel() as f64))
    }
}

fn abs_diff(a: &GateTrace, b: &GateTrace) -> Result<Tensor<f64>> {
    a.values.zip_with(&b.values, "trace diff", |x, y| (x - y).abs())
}

/// Differences for every context, normalized by one shared global maximum.
pub fn diff_traces(sets: &[TraceSet]) -> Result<Vec<TraceDiff>> {
    let Some(first) = sets.first() else {
        return Err(Error::InvalidConfig("no trace sets to compare".into()));
    };
    let word = &first.a1.target_tokens;
    for s in sets {
        for t in [&s.a1, &s.a2, &s.b1] {
            if t.values.shape() != first.a1.values.shape() {
                return Err(Error::ShapeMismatch {
                    op: "diff_traces",
                    lhs: first.a1.values.shape().to_vec(),
                    rhs: t.values.shape().to_vec(),
                });
            }
            if &t.target_tokens != word {
                return Err(Error::InvalidConfig(format!(
                    "trace {} {} targets {:?}, expected {word:?}",
                    s.context, t.role, t.target_tokens
                )));
            }
        }
    }
    let raw: Vec<(ContextLength, Tensor<f64>, Tensor<f64>)> = sets
        .iter()
        .map(|s| Ok((s.context, abs_diff(&s.a1, &s.a2)?, abs_diff(&s.a1, &s.b1)?)))
        .collect::<Result<_>>()?;
    let global_max = raw.iter().map(|(_, c, s)| c.max_abs().max(s.max_abs())).fold(0.0, f64::max);
    Ok(raw
        .into_iter()
        .map(|(context, control, semantic)| {
            let normalized =
                (global_max > 0.0).then(|| (control.map(|x| x / global_max), semantic.map(|x| x / global_max)));
            TraceDiff { context, control, semantic, global_max, normalized }
        })
        .collect())
}

/// One cell of an exported table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub layer: usize,
    /// Memory slot index, 0-based, standard path excluded.
    pub slot: usize,
    pub value: f64,
    pub context: ContextLength,
    /// `A1`, `A2`, `B1`, or `A1-A2` / `A1-B1` for differences.
    pub sentence: String,
    /// `raw`, `control` or `semantic`.
    pub kind: String,
    pub normalized: bool,
}

pub const CSV_HEADER: &str = "layer,slot,value,context,sentence,kind,normalized";

fn push_rows(out: &mut Vec<TraceRow>, t: &Tensor<f64>, context: ContextLength, sentence: &str, kind: &str, normalized: bool) {
    let slots = t.shape()[1];
    for (i, &value) in t.data().iter().enumerate() {
        out.push(TraceRow {
            layer: i / slots,
            slot: i % slots,
            value,
            context,
            sentence: sentence.into(),
            kind: kind.into(),
            normalized,
        });
    }
}

pub fn trace_rows(t: &GateTrace) -> Vec<TraceRow> {
    let mut out = Vec::with_capacity(t.values.numel());
    push_rows(&mut out, &t.values, t.context, t.role.name(), "raw", false);
    out
}

/// Difference rows: normalized values, or raw differences when degenerate.
pub fn diff_rows(d: &TraceDiff) -> Vec<TraceRow> {
    let mut out = Vec::with_capacity(2 * d.control.numel());
    match &d.normalized {
        Some((c, s)) => {
            push_rows(&mut out, c, d.context, "A1-A2", "control", true);
            push_rows(&mut out, s, d.context, "A1-B1", "semantic", true);
        }
        None => {
            push_rows(&mut out, &d.control, d.context, "A1-A2", "control", false);
            push_rows(&mut out, &d.semantic, d.context, "A1-B1", "semantic", false);
        }
    }
    out
}

/// Every raw and difference row for a full context set.
pub fn analysis_rows(sets: &[TraceSet], diffs: &[TraceDiff]) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (s, d) in sets.iter().zip(diffs) {
        for t in [&s.a1, &s.a2, &s.b1] {
            rows.extend(trace_rows(t));
        }
        rows.extend(diff_rows(d));
    }
    rows
}

/// Comma-separated table with a header row; values are written in their
/// shortest exactly round-tripping form.
pub fn rows_to_csv(rows: &[TraceRow]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
    if rows.is_empty() {
        w.write_record(CSV_HEADER.split(','))?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Format(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// One JSON object per row.
pub fn rows_to_jsonl(rows: &[TraceRow]) -> String {
    rows.iter().map(|r| serde_json::to_string(r).expect("rows serialize") + "\n").collect()
}

pub fn rows_from_csv(text: &str) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    if r.headers()?.iter().collect::<Vec<_>>().join(",") != CSV_HEADER {
        return Err(Error::Format(format!("trace table must start with {CSV_HEADER:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn rows_from_jsonl(text: &str) -> Result<Vec<TraceRow>> {
    text.lines()
        .filter(|l| !l.is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| Error::Format(format!("bad trace record: {e}"))))
        .collect()
}

/// Rebuilds the `[L, M]` array for one `(context, sentence, kind)` group.
pub fn rows_to_array(rows: &[TraceRow], context: ContextLength, sentence: &str, kind: &str) -> Result<Tensor<f64>> {
    let cells: Vec<&TraceRow> =
        rows.iter().filter(|r| r.context == context && r.sentence == sentence && r.kind == kind).collect();
    let layers = cells.iter().map(|r| r.layer + 1).max().unwrap_or(0);
    let slots = cells.iter().map(|r| r.slot + 1).max().unwrap_or(0);
    if cells.is_empty() || cells.len() != layers * slots {
        return Err(Error::Format(format!("incomplete table for {context} {sentence} {kind}")));
    }
    let mut data = vec![f64::NAN; layers * slots];
    for r in cells {
        data[r.layer * slots + r.slot] = r.value;
    }
    Tensor::new(vec![layers, slots], data)
}

/// `layer,head,slot,value,context,sentence` rows of the unaveraged trace.
pub fn per_head_csv(traces: &[&GateTrace]) -> String {
    let mut s = String::from("layer,head,slot,value,context,sentence\n");
    for t in traces {
        let [_, heads, slots] = t.per_head.shape()[..] else { continue };
        for (i, v) in t.per_head.data().iter().enumerate() {
            let (l, h, m) = (i / (heads * slots), (i / slots) % heads, i % slots);
            let _ = writeln!(s, "{l},{h},{m},{v:?},{},{}", t.context, t.role);
        }
    }
    s
}

/// One line of a sentence file: `context<TAB>role<TAB>text`, the target
/// word wrapped in `[brackets]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sentence {
    pub context: ContextLength,
    pub role: SentenceRole,
    pub text: String,
}

/// Parses a sentence file and checks that every context has every role.
/// Blank lines and `#` comments are skipped.
pub fn parse_sentence_file(text: &str) -> Result<BTreeMap<(ContextLength, SentenceRole), Sentence>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut f = line.splitn(3, '\t');
        let (Some(c), Some(r), Some(t)) = (f.next(), f.next(), f.next()) else {
            return Err(Error::Format(format!("line {}: expected context<TAB>role<TAB>text", n + 1)));
        };
        let (context, role) = (c.trim().parse()?, r.trim().parse()?);
        let s = Sentence { context, role, text: t.to_string() };
        if out.insert((context, role), s).is_some() {
            return Err(Error::Format(format!("line {}: duplicate {context} {role}", n + 1)));
        }
    }
    let mut missing = Vec::new();
    for c in ContextLength::ALL {
        let roles: Vec<&str> =
            SentenceRole::ALL.into_iter().filter(|&r| !out.contains_key(&(c, r))).map(SentenceRole::name).collect();
        if !roles.is_empty() {
            missing.push(format!("{c}: {}", roles.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Format(format!("sentence file is missing roles ({})", missing.join("; "))));
    }
    Ok(out)
}

/// How sentence text maps to model tokens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SentenceEncoding {
    /// One token per UTF-8 byte.
    Bytes,
    /// Whitespace-separated integer token ids.
    Ids,
}

/// Tokens of a bracket-marked sentence and the positions of the target.
pub fn encode_sentence(text: &str, encoding: SentenceEncoding) -> Result<(Vec<usize>, Vec<usize>)> {
    let open = text.find('[').ok_or_else(|| Error::Format(format!("no [target] in {text:?}")))?;
    let close = text[open..].find(']').map(|i| i + open).ok_or_else(|| Error::Format(format!("unclosed [ in {text:?}")))?;
    let (before, target, after) = (&text[..open], &text[open + 1..close], &text[close + 1..]);
    if target.trim().is_empty() || after.contains('[') {
        return Err(Error::Format(format!("expected exactly one nonempty [target] in {text:?}")));
    }
    let enc = |s: &str| -> Result<Vec<usize>> {
        match encoding {
            SentenceEncoding::Bytes => Ok(s.bytes().map(usize::from).collect()),
            SentenceEncoding::Ids => s
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| Error::Format(format!("bad token id {t:?}"))))
                .collect(),
        }
    };
    let (mut tokens, mid, tail) = (enc(before)?, enc(target)?, enc(after)?);
    let start = tokens.len();
    let positions = (start..start + mid.len()).collect();
    tokens.extend(mid);
    tokens.extend(tail);
    Ok((tokens, positions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, Variant};

    fn model(variant: Variant) -> ModelParams<f64> {
        let mut c = ModelConfig::new(variant, 4, 16, 2, 20, 16);
        c.latent_dim = Some(8);
        c.kv_heads = Some(2);
        ModelParams::init(&c).unwrap()
    }

    fn trace(values: Vec<f64>, role: SentenceRole, context: ContextLength) -> GateTrace {
        GateTrace {
            values: Tensor::new(vec![2, 2], values).unwrap(),
            per_head: Tensor::zeros(vec![2, 1, 2]),
            context,
            role,
            target_tokens: vec![5],
            positions: vec![0],
        }
    }

    #[test]
    fn zero_init_traces_are_all_ones() {
        for v in [Variant::Move, Variant::MlaMove] {
            let t = capture_trace(&model(v), &[1, 2, 3, 2], &[1, 3], ContextLength::Short, SentenceRole::A1).unwrap();
            assert_eq!(t.values.shape(), &[4, 2]);
            assert!(t.values.data().iter().all(|&x| x == 1.0));
        }
        assert!(capture_trace(&model(Variant::Lave), &[1], &[0], ContextLength::Short, SentenceRole::A1).is_err());
        assert!(capture_trace(&model(Variant::Move), &[1], &[1], ContextLength::Short, SentenceRole::A1).is_err());
    }

    #[test]
    fn means_match_recomputation_from_gates() {
        let mut p = model(Variant::Move);
        p.randomize_memory(1.0, 2);
        let tokens = [4, 9, 4, 7, 4, 1];
        let positions = [0, 2, 4];
        let t = capture_trace(&p, &tokens, &positions, ContextLength::Long, SentenceRole::B1).unwrap();
        let (_, gates) = p.forward_with_gates(&tokens).unwrap();
        for (l, g) in gates.iter().enumerate() {
            let g = g.as_ref().unwrap();
            for m in 0..2 {
                let mut want = 0.0;
                for &pos in &positions {
                    for h in 0..2 {
                        want += g.get(pos, h, m + 1);
                    }
                }
                want /= 6.0;
                assert!((t.values.data()[l * 2 + m] - want).abs() <= 1e-12);
                assert!((0.0..=2.0).contains(&t.values.data()[l * 2 + m]));
            }
        }
        let single = capture_trace(&p, &tokens, &[3], ContextLength::Long, SentenceRole::B1).unwrap();
        assert_eq!(single.per_head.data()[1], gates[0].as_ref().unwrap().get(3, 0, 2));
    }

    fn sets(a: [Vec<f64>; 3]) -> Vec<TraceSet> {
        ContextLength::ALL
            .into_iter()
            .map(|c| TraceSet {
                context: c,
                a1: trace(a[0].clone(), SentenceRole::A1, c),
                a2: trace(a[1].clone(), SentenceRole::A2, c),
                b1: trace(a[2].clone(), SentenceRole::B1, c),
            })
            .collect()
    }

    #[test]
    fn hand_built_diffs() {
        let mut s = sets([vec![1.0, 1.5, 0.5, 1.0], vec![1.0, 1.25, 0.5, 1.0], vec![0.0, 1.5, 1.5, 2.0]]);
        s[2].b1.values.data_mut()[0] = 1.0;
        let d = diff_traces(&s).unwrap();
        assert_eq!(d[0].control.data(), [0.0, 0.25, 0.0, 0.0]);
        assert_eq!(d[0].semantic.data(), [1.0, 0.0, 1.0, 1.0]);
        assert_eq!(d[0].global_max, 1.0);
        let (c, sem) = d[0].normalized.as_ref().unwrap();
        assert_eq!((c.data()[1], sem.data()[0]), (0.25, 1.0));
        assert_eq!(d[2].normalized.as_ref().unwrap().1.data(), [0.0, 0.0, 1.0, 1.0]);
        assert_eq!(d[0].summary(), Some((0.0625, 0.75)));

        let flat = diff_traces(&sets([vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]])).unwrap();
        assert!(flat.iter().all(|d| d.degenerate() && d.global_max == 0.0));
        assert!(flat[0].control.data().iter().all(|&x| x == 0.0));

        let mut bad = sets([vec![1.0; 4], vec![1.0; 4], vec![1.0; 4]]);
        bad[1].a2.values = Tensor::ones(vec![4, 1]);
        assert!(matches!(diff_traces(&bad), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn exports_round_trip() {
        let s = sets([vec![0.1, 1.0 / 3.0, 2.0, 0.0], vec![1.0; 4], vec![1e-17, 1.0, 1.0, 1.0]]);
        let d = diff_traces(&s).unwrap();
        let rows = analysis_rows(&s, &d);
        assert_eq!(rows.len(), 3 * 5 * 4);
        let csv = rows_to_csv(&rows).unwrap();
        assert_eq!(csv.lines().count(), 61);
        assert_eq!(rows_from_csv(&csv).unwrap(), rows);
        assert_eq!(rows_from_jsonl(&rows_to_jsonl(&rows)).unwrap(), rows);
        let back = rows_to_array(&rows, ContextLength::Short, "A1", "raw").unwrap();
        assert_eq!(back, s[0].a1.values);
        let kinds: std::collections::BTreeSet<(String, String)> =
            rows.iter().map(|r| (r.context.to_string(), r.sentence.clone())).collect();
        assert_eq!(kinds.len(), 15);
        assert_eq!(per_head_csv(&[&s[0].a1]).lines().count(), 5);
    }

    #[test]
    fn sentence_files() {
        let mut text = String::new();
        for c in ["short", "medium", "long"] {
            for r in ["A1", "A2", "B1"] {
                text += &format!("{c}\t{r}\tthe [bank] of it\n");
            }
        }
        assert_eq!(parse_sentence_file(&text).unwrap().len(), 9);
        let err = parse_sentence_file("short\tA1\tx [y]\n").unwrap_err().to_string();
        assert!(err.contains("short: A2, B1"), "{err}");
        assert!(parse_sentence_file("tiny\tA1\t[x]\n").is_err());

        let (t, p) = encode_sentence("ab [cd] e", SentenceEncoding::Bytes).unwrap();
        assert_eq!((t.len(), p), (7, vec![3, 4]));
        assert_eq!(t[3], usize::from(b'c'));
        let (t, p) = encode_sentence("3 4 [9 9] 2", SentenceEncoding::Ids).unwrap();
        assert_eq!((t, p), (vec![3, 4, 9, 9, 2], vec![2, 3]));
        assert!(encode_sentence("no target", SentenceEncoding::Bytes).is_err());
        assert!(encode_sentence("[a] [b]", SentenceEncoding::Bytes).is_err());
    }
}
