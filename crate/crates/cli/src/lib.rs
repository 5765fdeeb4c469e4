//! Command-line front end: argument parsing, run directories and the seven
//! commands.

pub mod commands;
pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use toml::Value;
use tsfm_peft::Error;

use config::{parse_override, RunConfig};

#[derive(Parser, Debug)]
#[command(name = "tsfm-peft", version, about = "Parameter-efficient fine-tuning of time-series forecasters")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Run directory for all artifacts.
    #[arg(long, global = true)]
    pub out_dir: Option<PathBuf>,
    /// Extra `section.key=value` override; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write a synthetic vitals cohort (vitals.csv, anchors.csv).
    Generate(GenerateArgs),
    /// Resample, window, smooth, split and scale into dataset.bin.
    Preprocess(PathArgs),
    /// Train a base model on a source-domain dataset.
    Pretrain(PathArgs),
    /// Fine-tune a base model with one adaptation method.
    Finetune(MethodArgs),
    /// Evaluate a base model, optionally with an adapter.
    Evaluate(EvalArgs),
    /// Fine-tune across a VeRA rank or FourierFT coefficient axis.
    Sweep(SweepArgs),
    /// Print the trainable-parameter budget of a method on a preset.
    CountParams(MethodArgs),
}

#[derive(Args, Debug, Default)]
pub struct GenerateArgs {
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long)]
    pub patients: Option<usize>,
    #[arg(long)]
    pub episodes: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct PathArgs {
    #[arg(long)]
    pub records: Option<PathBuf>,
    #[arg(long)]
    pub anchors: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long)]
    pub base: Option<PathBuf>,
    #[arg(long)]
    pub adapter: Option<PathBuf>,
    #[arg(long)]
    pub preset: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Forecast samples per window at evaluation.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Independent evaluation runs.
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct MethodArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// FourierFT spectral coefficients.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
}

#[derive(Args, Debug, Default)]
pub struct EvalArgs {
    #[command(flatten)]
    pub paths: PathArgs,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub max_windows: Option<usize>,
}

#[derive(Args, Debug, Default)]
pub struct SweepArgs {
    #[command(flatten)]
    pub method: MethodArgs,
    #[arg(long)]
    pub axis: Option<String>,
    /// Comma-separated axis values.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<usize>>,
    #[arg(long)]
    pub dry_run: bool,
}

fn s(v: &str) -> Value {
    Value::String(v.to_string())
}

fn path(p: &std::path::Path) -> Value {
    s(&p.to_string_lossy())
}

fn int(n: usize) -> Value {
    Value::Integer(n as i64)
}

impl PathArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) {
        let pairs = [
            ("paths.records", &self.records),
            ("paths.anchors", &self.anchors),
            ("paths.dataset", &self.dataset),
            ("paths.base", &self.base),
            ("paths.adapter", &self.adapter),
        ];
        for (k, v) in pairs {
            if let Some(p) = v {
                out.push((k.into(), path(p)));
            }
        }
        if let Some(p) = &self.preset {
            out.push(("model.preset".into(), s(&p.to_ascii_lowercase())));
        }
        if let Some(n) = self.steps {
            out.push(("train.max_steps".into(), int(n)));
        }
        if let Some(lr) = self.lr {
            out.push(("train.learning_rate".into(), Value::Float(lr)));
            out.push(("train.lr_grid".into(), Value::Array(vec![Value::Float(lr)])));
        }
        if let Some(b) = self.batch_size {
            out.push(("train.batch_size".into(), int(b)));
        }
        if let Some(n) = self.samples {
            out.push(("eval.n_samples".into(), int(n)));
        }
        if let Some(n) = self.runs {
            out.push(("eval.n_runs".into(), int(n)));
        }
    }
}

impl MethodArgs {
    fn overrides(&self, out: &mut Vec<(String, Value)>) -> tsfm_peft::Result<()> {
        self.paths.overrides(out);
        if let Some(m) = &self.method {
            let m: tsfm_peft::adapters::Method = m.parse()?;
            out.push(("adapter.method".into(), s(m.name())));
            // rank defaults depend on the method
            if self.rank.is_none() {
                let r = tsfm_peft::adapters::AdapterConfig::new(m).rank;
                out.push(("adapter.rank".into(), int(r)));
            }
        }
        if let Some(r) = self.rank {
            out.push(("adapter.rank".into(), int(r)));
        }
        if let Some(n) = self.n {
            out.push(("adapter.n_coefficients".into(), int(n)));
        }
        if let Some(a) = self.alpha {
            out.push(("adapter.alpha".into(), Value::Float(a)));
        }
        Ok(())
    }
}

fn collect_overrides(cli: &Cli) -> tsfm_peft::Result<Vec<(String, Value)>> {
    let mut out = Vec::new();
    match &cli.command {
        Command::Generate(g) => {
            if let Some(d) = &g.domain {
                let d: tsfm_peft::pipeline::Domain = d.parse()?;
                out.push(("generate.domain".into(), s(if d == tsfm_peft::pipeline::Domain::Source { "source" } else { "shifted" })));
            }
            if let Some(n) = g.patients {
                out.push(("generate.patients".into(), int(n)));
            }
            if let Some(n) = g.episodes {
                out.push(("generate.episodes".into(), int(n)));
            }
        }
        Command::Preprocess(p) | Command::Pretrain(p) => p.overrides(&mut out),
        Command::Finetune(m) | Command::CountParams(m) => m.overrides(&mut out)?,
        Command::Evaluate(e) => {
            e.paths.overrides(&mut out);
            if let Some(sp) = &e.split {
                out.push(("eval.split".into(), s(&sp.to_ascii_lowercase())));
            }
            if let Some(n) = e.max_windows {
                out.push(("eval.max_windows".into(), int(n)));
            }
        }
        Command::Sweep(w) => {
            w.method.overrides(&mut out)?;
            if let Some(a) = &w.axis {
                let a: tsfm_peft::trainer::SweepAxis = a.parse()?;
                let name = match a {
                    tsfm_peft::trainer::SweepAxis::None => "none",
                    tsfm_peft::trainer::SweepAxis::VeraRank => "vera_rank",
                    tsfm_peft::trainer::SweepAxis::FourierN => "fourier_n",
                };
                out.push(("sweep.axis".into(), s(name)));
            }
            if let Some(v) = &w.values {
                out.push(("sweep.values".into(), Value::Array(v.iter().map(|&x| int(x)).collect())));
            }
            if w.dry_run {
                out.push(("sweep.dry_run".into(), Value::Boolean(true)));
            }
        }
    }
    for kv in &cli.set {
        out.push(parse_override(kv)?);
    }
    if let Some(seed) = cli.seed {
        out.push(("seed".into(), Value::Integer(seed as i64)));
    }
    if let Some(d) = &cli.out_dir {
        out.push(("out_dir".into(), path(d)));
    }
    Ok(out)
}

/// Exit code for an error: configuration problems are usage errors.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 2,
        _ => 1,
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code. Errors are printed as `error[class]: message`.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let result = collect_overrides(&cli)
        .and_then(|o| RunConfig::resolve(cli.config.as_deref(), &o))
        .and_then(|cfg| commands::dispatch(&cli.command, &cfg));
    match result {
        Ok(summary) => {
            // a closed pipe (e.g. `| head`) is not a failure
            let _ = writeln!(std::io::stdout(), "{summary}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {e}", e.class());
            exit_code(&e)
        }
    }
}
