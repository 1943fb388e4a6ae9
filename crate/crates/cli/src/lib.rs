//! Command-line driver: `train`, `eval`, `generate`, `flops`, `trace`, `sweep`.
//!
//! Exit codes: 0 on success, 1 for usage or configuration errors, 2 for
//! failures while running. Results go to stdout, diagnostics to stderr.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use commands::{cmd_eval, cmd_flops, cmd_generate, cmd_sweep, cmd_trace, cmd_train, emit, GenerateSpec, Output};
use config::RunConfig;
use movelab::routelab::SentenceEncoding;

/// A failure and the exit code class it belongs to.
#[derive(Debug)]
pub enum CliError {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn usage(e: anyhow::Error) -> CliError {
    CliError::Usage(e)
}

pub fn runtime(e: anyhow::Error) -> CliError {
    CliError::Runtime(e)
}

#[derive(Debug, Parser)]
#[command(name = "movelab", version, about = "Train, evaluate and inspect value-memory transformers")]
pub struct Cli {
    /// More progress on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum EncodingArg {
    Bytes,
    Ids,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a `trainer.ckpt` written by the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Held-out loss of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Bits per byte on a UTF-8 text file instead of the config's data.
        #[arg(long)]
        text: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Continue a prompt.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        prompt: String,
        /// Read the prompt as whitespace-separated token ids.
        #[arg(long)]
        ids: bool,
        #[arg(long, default_value_t = 32)]
        steps: usize,
        /// 0 selects greedy decoding.
        #[arg(long, default_value_t = 0.0)]
        temperature: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Per-token FLOPs of a standard block and the router overhead.
    Flops {
        #[arg(long)]
        d: u64,
        #[arg(long)]
        heads: u64,
        #[arg(long, default_value_t = 0)]
        slots: u64,
        #[arg(long)]
        context: u64,
        /// Emit key=value lines.
        #[arg(long)]
        machine: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Gate traces and routing differences for a sentence file.
    Trace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sentences: PathBuf,
        /// Defaults to bytes for 256-token models, ids otherwise.
        #[arg(long, value_enum)]
        encoding: Option<EncodingArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Matched comparison of several model configs over several seeds.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_config(path: &Path, seed: Option<u64>) -> CliResult<RunConfig> {
    let mut cfg = RunConfig::load(path).map_err(usage)?;
    if let Some(s) = seed {
        cfg.override_seed(s);
    }
    Ok(cfg)
}

pub fn execute(cli: Cli) -> CliResult<()> {
    let v = cli.verbose;
    let out = |dir: Option<PathBuf>| Output { dir, verbosity: v };
    match cli.command {
        Command::Train { config, out: dir, seed, resume } => {
            let cfg = load_config(&config, seed)?;
            let ledger = cmd_train(&cfg, resume.as_deref(), &out(Some(dir)))?;
            emit(&ledger.to_jsonl());
        }
        Command::Eval { checkpoint, config, text, out: dir } => {
            let cfg = config.as_ref().map(|c| load_config(c, None)).transpose()?;
            let report = cmd_eval(&checkpoint, cfg.as_ref(), text.as_deref(), &out(dir))?;
            emit(&serde_json::to_string(&report).map_err(|e| runtime(e.into()))?);
        }
        Command::Generate { checkpoint, prompt, ids, steps, temperature, seed, out: dir } => {
            let spec = GenerateSpec { prompt, ids, steps, temperature, seed };
            emit(&cmd_generate(&checkpoint, &spec, &out(dir))?);
        }
        Command::Flops { d, heads, slots, context, machine, out: dir } => {
            emit(&cmd_flops(d, heads, slots, context, machine, &out(dir))?);
        }
        Command::Trace { checkpoint, sentences, encoding, out: dir } => {
            let encoding = encoding.map(|e| match e {
                EncodingArg::Bytes => SentenceEncoding::Bytes,
                EncodingArg::Ids => SentenceEncoding::Ids,
            });
            emit(&cmd_trace(&checkpoint, &sentences, encoding, &out(Some(dir)))?.summary);
        }
        Command::Sweep { config, out: dir, seed } => {
            let cfg = load_config(&config, seed)?;
            emit(&cmd_sweep(&cfg, &out(Some(dir)))?.table());
        }
    }
    Ok(())
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
