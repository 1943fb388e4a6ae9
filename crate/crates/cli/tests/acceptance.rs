//! End-to-end acceptance checks. Runs as a plain binary (`harness = false`)
//! so each criterion prints one PASS/FAIL line, in order, with its timing.
//!
//! The training sweep is the long pole (about an hour on one core); its
//! artifacts are kept under the cargo target tmpdir for inspection.

use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use num_rational::Ratio;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use movelab::attention::{SeqShape, StdPath};
use movelab::costmodel::{bank_params, overhead_ratio};
use movelab::data::{gen_fact_corpus, Fact, EOS, SEP};
use movelab::mla::{absorbed_output, compress_latent, fuse_output, latent_attention_weights, materialized_output, MlaParams};
use movelab::model::{sequence_loss, Decoder, ModelConfig, ModelParams, ParamKind, Variant};
use movelab::numerics::{grad_check, GradCheckOptions, Tape, Tensor};
use movelab::routelab::{encode_sentence, parse_sentence_file, rows_from_csv, SentenceEncoding};
use movelab_cli::commands::{cmd_sweep, cmd_trace, Output, SweepResult};
use movelab_cli::config::{DataConfig, RunConfig};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn sweep_config_path() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fact_sweep.toml")
}

fn c1() -> Outcome {
    let r = overhead_ratio(2048, 16, 32, 2048);
    ensure(r == Ratio::new(528, 28672), format!("ratio {r}"))?;
    // Reduced form of 528/28672.
    ensure(*r.numer() == 33 && *r.denom() == 1792, format!("reduced {r}"))?;
    let pct = 100.0 * *r.numer() as f64 / *r.denom() as f64;
    ensure(format!("{pct:.2}") == "1.84", format!("percent {pct}"))?;
    Ok(format!("528/28672 = {pct:.4}%"))
}

fn c2() -> Outcome {
    let (a, b) = (bank_params(65536, 6, 768), bank_params(65536, 12, 768));
    ensure(a == 301_989_888, format!("x1: {a}"))?;
    ensure(b == 603_979_776, format!("x2: {b}"))?;
    Ok(format!("{a} and {b}"))
}

fn c3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens: Vec<usize> = (0..16).map(|_| rng.gen_range(0..64)).collect();
    let mut checked = Vec::new();
    for v in [Variant::Move, Variant::Lave, Variant::MlaMove, Variant::MlaLave] {
        for std_path in [StdPath::Gated, StdPath::Ungated] {
            let mut c = ModelConfig::new(v, 2, 32, 4, 64, 16);
            c.latent_dim = Some(8);
            c.std_path = std_path;
            c.seed = 11;
            let p = ModelParams::<f64>::init(&c).map_err(err)?;
            let memory_zero = p
                .named_tensors()
                .iter()
                .filter(|(_, k, _)| matches!(k, ParamKind::Bank | ParamKind::Router))
                .all(|(_, _, t)| t.data().iter().all(|&x| x == 0.0));
            ensure(memory_zero, format!("{v}: banks and routers are not zero at init"))?;
            let with = p.forward_logits(&tokens).map_err(err)?;
            let without = ModelParams::<f64>::init(&c.memory_free()).map_err(err)?.forward_logits(&tokens).map_err(err)?;
            ensure(with == without, format!("{v} {std_path:?}: max diff {:e}", with.max_abs_diff(&without)))?;
        }
        checked.push(v.name());
    }
    Ok(format!("bit-identical logits for {} (gated and ungated)", checked.join(", ")))
}

fn c4() -> Outcome {
    let mut worst = 0.0f64;
    let mut leaves_checked = 0;
    let mut cases = Vec::new();
    for v in Variant::ALL {
        let paths: &[StdPath] = if v.is_move() { &[StdPath::Gated, StdPath::Ungated] } else { &[StdPath::Gated] };
        for &std_path in paths {
            let mut c = ModelConfig::new(v, 2, 8, 2, 7, 6);
            c.latent_dim = Some(4);
            c.std_path = std_path;
            c.seed = 5;
            let mut p = ModelParams::<f64>::init(&c).map_err(err)?;
            p.randomize_memory(0.5, 9);
            let named = p.named_tensors();
            let leaves: Vec<Tensor<f64>> = named.iter().map(|(_, _, t)| (*t).clone()).collect();
            let (inputs, targets) = ([1, 5, 2, 6, 0], [5, 2, 6, 0, 3]);
            let report = grad_check(
                |tape: &mut Tape<f64>, vars| {
                    let bound = p.bind_existing(tape, vars)?;
                    sequence_loss(tape, &p, &bound, &inputs, &targets, None, SeqShape::single(5))
                },
                &leaves,
                &GradCheckOptions::default(),
            )
            .map_err(err)?;
            for ((name, _, _), e) in named.iter().zip(&report.per_leaf) {
                ensure(*e <= 1e-4, format!("{v} {std_path:?} {name}: relative error {e:e}"))?;
            }
            ensure(report.passes(1e-4), format!("{v} {std_path:?}: {report:?}"))?;
            worst = worst.max(report.max_rel_error);
            leaves_checked += named.len();
            cases.push(format!("{v}/{std_path:?}"));
        }
    }
    Ok(format!("{} models, {leaves_checked} tensors, every element; max rel error {worst:.2e}", cases.len()))
}

fn argmax(xs: &[f64]) -> usize {
    xs.iter().enumerate().fold(0, |b, (i, &x)| if x > xs[b] { i } else { b })
}

fn c5() -> Outcome {
    let mut worst = 0.0f64;
    for v in [Variant::Move, Variant::MlaMove] {
        let mut c = ModelConfig::new(v, 2, 32, 4, 64, 80);
        c.latent_dim = Some(8);
        c.seed = 2;
        let mut p = ModelParams::<f64>::init(&c).map_err(err)?;
        p.randomize_memory(0.5, 4);
        let mut dec = Decoder::new(&p).map_err(err)?;
        let mut seq = vec![7usize];
        for step in 0..64 {
            let (cached, _) = dec.step(*seq.last().unwrap()).map_err(err)?;
            let full = p.forward_logits(&seq).map_err(err)?;
            let row = full.row(seq.len() - 1);
            let dev = cached.iter().zip(row).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            ensure(dev <= 1e-10, format!("{v} step {step}: deviation {dev:e}"))?;
            let (a, b) = (argmax(&cached), full.argmax_rows()[seq.len() - 1]);
            ensure(a == b, format!("{v} step {step}: cached argmax {a}, full argmax {b}"))?;
            worst = worst.max(dev);
            seq.push(b);
        }
    }
    Ok(format!("64 greedy steps each for move and mla+move; max deviation {worst:.2e}"))
}

fn c6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let heads: usize = [1, 2, 4, 8][rng.gen_range(0..4)];
        let d = heads * rng.gen_range(1..=8);
        let kv = [1, 2, 4, 8].into_iter().filter(|k| heads.is_multiple_of(*k)).nth(rng.gen_range(0..=heads.trailing_zeros() as usize)).unwrap();
        let dc = kv * rng.gen_range(1..=(d / kv).max(1));
        let t = rng.gen_range(1..=24);
        let p = MlaParams::<f64>::random(d, heads, dc, kv, 1.0, &mut rng).map_err(err)?;
        let x = Tensor::randn(vec![t, d], 1.0, &mut rng);
        let c = compress_latent(&x, &p.w_dkv).map_err(err)?;
        let a = latent_attention_weights(&x, &c, &p).map_err(err)?;
        let fused = fuse_output(&p).map_err(err)?;
        let absorbed = absorbed_output(&c, &a, &p, &fused).map_err(err)?;
        let materialized = materialized_output(&c, &a, &p).map_err(err)?;
        let dev = absorbed.max_abs_diff(&materialized);
        ensure(dev <= 1e-10, format!("d={d} H={heads} d_c={dc} T={t}: deviation {dev:e}"))?;
        worst = worst.max(dev);
    }
    Ok(format!("100 random instances; max deviation {worst:.2e}"))
}

struct Sweep {
    result: SweepResult,
    dir: PathBuf,
    cfg: RunConfig,
}

fn run_sweep() -> Result<Sweep, String> {
    let cfg = RunConfig::load(&sweep_config_path()).map_err(err)?;
    let dir = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-sweep");
    let _ = fs::remove_dir_all(&dir);
    let result = cmd_sweep(&cfg, &Output { dir: Some(dir.clone()), verbosity: 0 }).map_err(err)?;
    Ok(Sweep { result, dir, cfg })
}

fn per_seed(s: &SweepResult, label: &str) -> String {
    s.runs.iter().filter(|r| r.label == label).map(|r| format!("{}:{:.4}", r.seed, r.final_eval)).collect::<Vec<_>>().join(" ")
}

fn c7(s: &Sweep) -> Outcome {
    let m = |l: &str| s.result.medians.get(l).copied().ok_or(format!("no run {l}"));
    let (std, lave, m1, m4) = (m("standard")?, m("lave-x1")?, m("move-x1")?, m("move-x4")?);
    let detail = format!(
        "medians standard {std:.4}, lave-x1 {lave:.4}, move-x1 {m1:.4}, move-x4 {m4:.4}; per seed: standard [{}] lave-x1 [{}] move-x1 [{}] move-x4 [{}]",
        per_seed(&s.result, "standard"),
        per_seed(&s.result, "lave-x1"),
        per_seed(&s.result, "move-x1"),
        per_seed(&s.result, "move-x4"),
    );
    ensure(m4 < m1 && m1 < std, format!("ordering violated: {detail}"))?;
    ensure(m1 <= 1.05 * lave, format!("move-x1 above 1.05 x lave-x1: {detail}"))?;
    Ok(detail)
}

fn c8(s: &Sweep) -> Outcome {
    let gated = s.result.medians["move-x1"];
    let ungated = s.result.medians["move-x1-ungated"];
    let detail = format!(
        "gated {gated:.4} [{}] vs ungated {ungated:.4} [{}]",
        per_seed(&s.result, "move-x1"),
        per_seed(&s.result, "move-x1-ungated")
    );
    ensure(gated <= ungated, format!("gated above ungated: {detail}"))?;
    Ok(detail)
}

fn record(f: &Fact) -> Vec<usize> {
    let mut r = f.key.clone();
    r.push(SEP);
    r.extend(&f.definition);
    r.push(EOS);
    r
}

fn ids(tokens: &[usize]) -> String {
    tokens.iter().map(|t| t.to_string()).collect::<Vec<_>>().join(" ")
}

/// `A1` and `A2` query the same fact after different preceding facts; `B1`
/// queries a different fact sharing the traced second key token, after the
/// same facts as `A1`. Contexts hold 1, 2 and 3 preceding records.
fn sentence_file(facts: &[Fact]) -> Result<String, String> {
    let (a, b) = facts
        .iter()
        .enumerate()
        .find_map(|(i, fa)| {
            facts[i + 1..].iter().find(|fb| fb.key[1] == fa.key[1] && fb.key[0] != fa.key[0]).map(|fb| (fa, fb))
        })
        .ok_or("no two facts share a second key token")?;
    let others: Vec<&Fact> = facts.iter().filter(|f| f.key != a.key && f.key != b.key).take(6).collect();
    let query = |f: &Fact| {
        let r = record(f);
        format!("{} [{}] {}", r[0], r[1], ids(&r[2..]))
    };
    let mut out = String::from("# context\trole\tsentence\n");
    for (name, n) in [("short", 1), ("medium", 2), ("long", 3)] {
        let prefix = |fs: &[&Fact]| ids(&fs.iter().flat_map(|f| record(f)).collect::<Vec<_>>());
        let (p1, p2) = (prefix(&others[..n]), prefix(&others[3..3 + n]));
        out += &format!("{name}\tA1\t{p1} {}\n", query(a));
        out += &format!("{name}\tA2\t{p2} {}\n", query(a));
        out += &format!("{name}\tB1\t{p1} {}\n", query(b));
    }
    Ok(out)
}

fn c9(s: &Sweep) -> Outcome {
    let Some(DataConfig::Facts(spec)) = &s.cfg.data else {
        return Err("sweep config is not the fact task".into());
    };
    let corpus = gen_fact_corpus(spec).map_err(err)?;
    let ckpt = s.dir.join("seed-0").join("move-x1.ckpt");
    let work = s.dir.join("trace");
    fs::create_dir_all(&work).map_err(err)?;
    let sentences = work.join("sentences.tsv");
    fs::write(&sentences, sentence_file(&corpus.facts)?).map_err(err)?;

    let t0 = Instant::now();
    let out = cmd_trace(&ckpt, &sentences, None, &Output { dir: Some(work.clone()), verbosity: 0 }).map_err(err)?;
    let rows = rows_from_csv(&fs::read_to_string(work.join("trace.csv")).map_err(err)?).map_err(err)?;
    let raw: Vec<f64> = rows.iter().filter(|r| r.kind == "raw").map(|r| r.value).collect();
    let norm: Vec<f64> = rows.iter().filter(|r| r.kind != "raw").map(|r| r.value).collect();
    ensure(!raw.is_empty() && raw.iter().all(|v| (0.0..=2.0).contains(v)), "raw value outside [0, 2]")?;
    ensure(rows.iter().filter(|r| r.kind != "raw").all(|r| r.normalized), "diff rows are not normalized")?;
    ensure(norm.iter().all(|v| (0.0..=1.0).contains(v)), "normalized value outside [0, 1]")?;
    let top = norm.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ensure(top == 1.0, format!("normalized global max is {top}"))?;

    let params = ModelParams::<f64>::load(&ckpt).map_err(err)?;
    let parsed = parse_sentence_file(&fs::read_to_string(&sentences).map_err(err)?).map_err(err)?;
    ensure(parsed.len() == 9, "expected 3 contexts x 3 roles")?;
    for s in parsed.values() {
        let (tokens, _) = encode_sentence(&s.text, SentenceEncoding::Ids).map_err(err)?;
        let plain = params.forward_logits(&tokens).map_err(err)?;
        let (captured, _) = params.forward_with_gates(&tokens).map_err(err)?;
        {
            ensure(plain.data().iter().zip(captured.data()).all(|(a, b)| a.to_bits() == b.to_bits()), "capture changed logits")?;
        }
    }
    let elapsed = t0.elapsed();
    ensure(elapsed < Duration::from_secs(60), format!("trace took {elapsed:?}"))?;
    let summary = out.summary.lines().skip(1).collect::<Vec<_>>().join("; ");
    Ok(format!("{} rows, raw in [{:.3}, {:.3}], normalized max 1; {summary}", rows.len(),
        raw.iter().copied().fold(f64::INFINITY, f64::min), raw.iter().copied().fold(0.0, f64::max)))
}

fn c10() -> Outcome {
    let mut worst = 0.0f64;
    for v in [Variant::Move, Variant::MlaMove] {
        let mut c = ModelConfig::new(v, 4, 16, 2, 23, 12);
        c.latent_dim = Some(4);
        c.seed = 8;
        let mut p = ModelParams::<f64>::init(&c).map_err(err)?;
        p.randomize_memory(0.5, 10);
        let inputs = [3, 9, 1, 14, 22, 3, 9, 7];
        let targets = [9, 1, 14, 22, 3, 9, 7, 0];
        let bank_grad = |layers: Option<&[usize]>| -> Result<Tensor<f64>, String> {
            let mut tape = Tape::new();
            let bound = match layers {
                Some(ls) => p.bind_bank_layers(&mut tape, ls).map_err(err)?,
                None => p.bind(&mut tape, true),
            };
            let loss = sequence_loss(&mut tape, &p, &bound, &inputs, &targets, None, SeqShape::single(8)).map_err(err)?;
            let g = tape.backward(loss).map_err(err)?;
            g.get(bound.bank.ok_or("no bank")?).cloned().ok_or("bank has no gradient".into())
        };
        let full = bank_grad(None)?;
        let mut sum = Tensor::zeros(full.shape().to_vec());
        for l in 0..c.layers {
            let g = bank_grad(Some(&[l]))?;
            ensure(g.max_abs() > 0.0, format!("{v}: layer {l} sends no gradient to the bank"))?;
            sum.add_assign(&g).map_err(err)?;
        }
        let dev = full.max_abs_diff(&sum);
        ensure(dev <= 1e-10, format!("{v}: deviation {dev:e}"))?;
        worst = worst.max(dev);
    }
    Ok(format!("4-layer move and mla+move; max deviation {worst:.2e}"))
}

struct Report {
    failed: usize,
}

impl Report {
    fn run(&mut self, n: u32, limit: Duration, f: impl FnOnce() -> Outcome) {
        let t0 = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or(p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or("panic".into()))
        });
        let elapsed = t0.elapsed();
        let outcome = outcome.and_then(|d| {
            if elapsed <= limit {
                Ok(d)
            } else {
                Err(format!("{d}; over the {limit:?} budget"))
            }
        });
        match outcome {
            Ok(d) => println!("criterion {n}: PASS ({:.1}s) {d}", elapsed.as_secs_f64()),
            Err(e) => {
                self.failed += 1;
                println!("criterion {n}: FAIL ({:.1}s) {e}", elapsed.as_secs_f64());
            }
        }
    }
}

fn main() {
    let mut r = Report { failed: 0 };
    let secs = Duration::from_secs;
    r.run(1, secs(1), c1);
    r.run(2, secs(1), c2);
    r.run(3, secs(10), c3);
    r.run(4, secs(300), c4);
    r.run(5, secs(60), c5);
    r.run(6, secs(30), c6);
    r.run(10, secs(60), c10);

    let t0 = Instant::now();
    let sweep = run_sweep();
    let sweep_time = t0.elapsed();
    println!("fact-task sweep: 3 seeds x 5 runs in {:.0}s", sweep_time.as_secs_f64());
    match &sweep {
        Ok(s) => {
            // Criterion 7's budget covers the sweep itself.
            r.run(7, secs(7200).saturating_sub(sweep_time), || c7(s));
            r.run(8, secs(7200), || c8(s));
            r.run(9, secs(60), || c9(s));
        }
        Err(e) => {
            for n in [7, 8, 9] {
                r.failed += 1;
                println!("criterion {n}: FAIL sweep did not complete: {e}");
            }
        }
    }
    println!("acceptance: {} of 10 criteria passed", 10 - r.failed);
    if r.failed > 0 {
        std::process::exit(1);
    }
}
