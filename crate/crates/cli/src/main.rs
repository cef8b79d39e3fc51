//! `patlab`: synthesize data, train, infer, evaluate and run the causal
//! algebra check.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] patlab_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("check failed: {0}")]
    Check(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(patlab_core::Error::NonFinite { .. }) => 2,
            CliError::Check(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "patlab", version, about = "Counterfactual patching experiments on synthetic scenes")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Run seed; every random stream is derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// key=value file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Set any config key, e.g. `--set data.noise_sd=0.1`.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE", value_parser = config::parse_assignment)]
    pub set: Vec<(String, String)>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate train and test datasets.
    Synth(SynthArgs),
    /// Train a det, int or pat-t model.
    Train(TrainArgs),
    /// Write predictions for a dataset.
    Infer(InferArgs),
    /// Score a prediction file.
    Eval(EvalArgs),
    /// Check the effect decomposition on random and constructed models.
    CausalCheck(CausalArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n_train: Option<usize>,
    #[arg(long)]
    pub n_test: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory holding train.dsb (and optionally test.dsb).
    #[arg(long)]
    pub data: PathBuf,
    /// det, int or pat-t.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    /// bce or asl.
    #[arg(long)]
    pub loss: Option<String>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// EMA decay, or `off`.
    #[arg(long)]
    pub ema: Option<String>,
    /// Continue from a checkpoint of the same mode.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Skip the per-epoch test evaluation.
    #[arg(long)]
    pub no_eval: bool,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint file, or a directory with model.ckpt or int member files.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset file (.dsb).
    #[arg(long)]
    pub data: PathBuf,
    /// plain or pat-i.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    /// auto, shared, psi or theta.
    #[arg(long)]
    pub weight_source: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub predictions: PathBuf,
    /// Dataset file (.dsb) with the ground truth.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    #[arg(long)]
    pub co_threshold: Option<f64>,
    /// Second prediction file to compare per class against the first.
    #[arg(long)]
    pub compare: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CausalArgs {
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub constructed: Option<usize>,
    #[arg(long)]
    pub mediators: Option<usize>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
