mod commands;
mod data;
mod problem;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use otml_core::Config;

/// Exit status of a failed command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Usage = 1,
    Runtime = 2,
    Numerical = 3,
}

/// A failure with the exit status it maps to.
#[derive(Debug)]
pub struct Failure {
    pub status: Status,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(e: impl Into<anyhow::Error>) -> Self {
        Self { status: Status::Usage, error: e.into() }
    }

    pub fn runtime(e: impl Into<anyhow::Error>) -> Self {
        Self { status: Status::Runtime, error: e.into() }
    }

    pub fn numerical(e: impl Into<anyhow::Error>) -> Self {
        Self { status: Status::Numerical, error: e.into() }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "otml",
    version,
    about = "Optimal-transport self-supervised pretraining at desk scale",
    after_long_help = config_help(),
    after_help = config_help()
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic phantom dataset as PGM files plus labels.csv.
    GenData(GenData),
    /// Pretrain the encoder and write metrics and a checkpoint.
    #[command(after_help = config_help())]
    Pretrain(Pretrain),
    /// Fit a linear probe on a checkpoint's encoder and print one CSV row.
    #[command(after_help = config_help())]
    Probe(Probe),
    /// Solve one transport problem read from a text file.
    OtSolve(OtSolve),
    /// Check every analytic gradient against central differences.
    Gradcheck(Gradcheck),
}

#[derive(Args, Debug)]
pub struct GenData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Sample depth of the written files (8 or 16).
    #[arg(long, default_value_t = 16)]
    pub bits: u32,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Configuration file (`key = value` lines under `[section]` headers).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.steps=10`. Repeatable; applied after the file.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Args, Debug)]
pub struct Pretrain {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Directory of PGM images (labels.csv, if present, fixes the order).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Metrics CSV path (default: train.metrics, else `<out>.metrics.csv`).
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct Probe {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Labelled training directory (PGM files plus labels.csv).
    #[arg(long)]
    pub data: PathBuf,
    /// Labelled test directory; without it a stratified share of `--data` is held out.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// frozen or finetune (default: probe.protocol).
    #[arg(long)]
    pub protocol: Option<String>,
    /// Labelled share of the training set (default: probe.fraction).
    #[arg(long)]
    pub fraction: Option<f64>,
    /// Also print the CSV header line.
    #[arg(long)]
    pub header: bool,
}

#[derive(Args, Debug)]
pub struct OtSolve {
    /// Problem file: d, then d cost rows, then μ, then ν, then ε.
    #[arg(long)]
    pub input: PathBuf,
    /// Override the file's ε.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Solve exactly with the transportation simplex instead of Sinkhorn.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1_000_000)]
    pub max_iters: usize,
}

#[derive(Args, Debug)]
pub struct Gradcheck {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Corrupt the adjoint of this op (negative control).
    #[arg(long, hide = true)]
    pub fault: Option<String>,
}

fn config_help() -> String {
    format!(
        "Configuration keys (set in a --config file or with --set SECTION.KEY=VALUE):\n{}\nEnvironment: OTML_THREADS caps worker threads.\nExit codes: 0 success, 1 usage, 2 runtime, 3 numerical failure.",
        Config::key_reference()
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Status::Usage as u8) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Pretrain(a) => commands::pretrain(&a),
        Command::Probe(a) => commands::probe(&a),
        Command::OtSolve(a) => commands::ot_solve(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.status as u8)
        }
    }
}
