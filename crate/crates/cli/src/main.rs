//! `lfn`: optical flow estimation, evaluation, toy training and self-checks.
//!
//! Exit codes: 0 success, 1 I/O failure, 2 invalid input or configuration,
//! 3 self-check failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "lfn", version, about = "Cascaded coarse-to-fine optical flow")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Model shape overrides shared by several commands.
#[derive(Args, Debug, Clone, Default)]
pub struct ModelArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Multiplier on every hidden channel width.
    #[arg(long)]
    pub width_scale: Option<f64>,
    /// Seed for weight initialization and sampling.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Estimate the flow from IMG1 to IMG2 and write it as a .flo file.
    Estimate {
        img1: PathBuf,
        img2: PathBuf,
        out: PathBuf,
        /// Trained weights (.lfnw). Without it the freshly initialized model runs.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[command(flatten)]
        model: ModelArgs,
        /// Also write a colorized PNG of the flow.
        #[arg(long)]
        viz: Option<PathBuf>,
        /// Replicate-pad inputs to a multiple of 32 and crop the flow back.
        #[arg(long)]
        pad: bool,
        #[arg(long)]
        json: bool,
    },
    /// Compare an estimated flow against ground truth.
    Eval {
        est: PathBuf,
        gt: PathBuf,
        /// Validity mask image; pixels brighter than half scale count.
        #[arg(long)]
        mask: Option<PathBuf>,
        /// Write a colorized PNG of the estimate.
        #[arg(long)]
        viz: Option<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Train on synthetic translations and write weights plus a loss curve.
    TrainToy {
        /// Output directory.
        #[arg(long, default_value = "toy-run")]
        out: PathBuf,
        #[command(flatten)]
        model: ModelArgs,
        /// Iterations per stage, overriding the configuration.
        #[arg(long)]
        iterations: Option<usize>,
        #[arg(long)]
        json: bool,
    },
    /// Run the gradient and oracle suites.
    Selfcheck {
        /// Per-op gradients and oracles only; skips the composite checks.
        #[arg(long)]
        quick: bool,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        json: bool,
        /// Corrupt the backward rule of the named op.
        #[arg(long, hide = true)]
        inject_fault: Option<String>,
    },
    /// Print per-module and total parameter counts.
    Params {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long)]
        json: bool,
    },
}

/// A failed command and its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn invalid(message: impl Into<String>) -> Self {
        Failure { code: 2, message: message.into() }
    }
}

impl From<lfn_core::Error> for Failure {
    fn from(e: lfn_core::Error) -> Self {
        Failure { code: if e.is_io() { 1 } else { 2 }, message: e.to_string() }
    }
}

fn configure_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("LFN_THREADS") else { return Ok(()) };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::invalid(format!("LFN_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::invalid(format!("cannot size the thread pool: {e}")))
}

fn run(cli: Cli) -> Result<(), Failure> {
    configure_threads()?;
    match cli.command {
        Command::Estimate { img1, img2, out, weights, model, viz, pad, json } => {
            commands::estimate(&img1, &img2, &out, weights.as_deref(), &model, viz.as_deref(), pad, json)
        }
        Command::Eval { est, gt, mask, viz, json } => commands::eval(&est, &gt, mask.as_deref(), viz.as_deref(), json),
        Command::TrainToy { out, model, iterations, json } => commands::train_toy(&out, &model, iterations, json),
        Command::Selfcheck { quick, seeds, json, inject_fault } => commands::selfcheck(quick, seeds, json, inject_fault),
        Command::Params { model, json } => commands::params(&model, json),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
