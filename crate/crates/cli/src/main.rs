mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use adtarget::dataset::InputFormat;
use adtarget::polytomous::{Policy, SetCredit};
use adtarget::scoring::Backend;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use tracing_subscriber::EnvFilter;

use crate::config::ConfigError;

/// Per-campaign click models: training, evaluation, scoring and throughput benchmarks.
#[derive(Debug, Parser)]
#[command(name = "adtarget", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one model per campaign from click logs.
    Train(TrainArgs),
    /// Score a click log against a model directory and report precision and recall.
    Evaluate(EvaluateArgs),
    /// Write per-impression accept decisions for an impression log.
    Score(ScoreArgs),
    /// Measure ensemble scoring throughput.
    Bench(BenchArgs),
    /// Write ROC curves of trained models on a click log.
    RocExport(RocExportArgs),
}

fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Replaces the configured inputs.
    #[arg(long = "input")]
    pub inputs: Vec<PathBuf>,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    #[arg(long)]
    pub workers: Option<usize>,
    /// Replaces the seed of a random split.
    #[arg(long)]
    pub split_seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EnsembleArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long, value_parser = serde_value::<Policy>)]
    pub policy: Option<Policy>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = serde_value::<SetCredit>)]
    pub set_credit: Option<SetCredit>,
    #[arg(long, value_parser = serde_value::<InputFormat>)]
    pub format: Option<InputFormat>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long)]
    pub clicks: PathBuf,
    /// Impression log for coverage; defaults to the clicks.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Output directory, default `<output_dir>/evaluation`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[command(flatten)]
    pub ensemble: EnsembleArgs,
    #[arg(long)]
    pub input: PathBuf,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub batch: PathBuf,
    /// Repeat for a scaling table, e.g. `--threads 1 --threads 2`.
    #[arg(long)]
    pub threads: Vec<usize>,
    #[arg(long)]
    pub reps: Option<usize>,
    #[arg(long, value_parser = serde_value::<Backend>)]
    pub backend: Option<Backend>,
    #[arg(long, value_parser = serde_value::<InputFormat>)]
    pub format: Option<InputFormat>,
    /// JSON destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RocExportArgs {
    #[arg(long)]
    pub models: PathBuf,
    #[arg(long)]
    pub clicks: PathBuf,
    /// Only this campaign; all models otherwise.
    #[arg(long)]
    pub campaign: Option<String>,
    #[arg(long, value_parser = serde_value::<InputFormat>)]
    pub format: Option<InputFormat>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let filter = EnvFilter::try_from_env("ADTARGET_LOG").unwrap_or_else(|_| EnvFilter::new("info"));
    tracing_subscriber::fmt()
        .json()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .with_current_span(false)
        .init();

    let result = match cli.command {
        Command::Train(args) => commands::train(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Score(args) => commands::score(args),
        Command::Bench(args) => commands::bench(args),
        Command::RocExport(args) => commands::roc_export(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = format!("{e:#}"), "command failed");
            eprintln!("error: {e:#}");
            if e.downcast_ref::<ConfigError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
