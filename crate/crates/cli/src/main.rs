//! `lnlab`: ingest, featurize, train, analyse and clean noisy image datasets.

mod commands;
mod config;
mod experiment;
mod lock;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

#[derive(Parser, Debug)]
#[command(name = "lnlab", version, about = "Noisy-label learning lab", propagate_version = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// JSON configuration file; command-line flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Global seed; module seeds are derived from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for data-parallel stages (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Validate a manifest and print a dataset summary.
    Ingest(commands::IngestArgs),
    /// Generate a class-prototype image dataset.
    Synth(commands::SynthArgs),
    /// Compute random convolutional features for a dataset.
    Featurize(commands::FeaturizeArgs),
    /// Run full-batch gradient descent on a feature file.
    Train(commands::TrainArgs),
    /// Compare the spectral residual prediction with measured training loss.
    Dynamics(commands::DynamicsArgs),
    /// Inject label noise or mix clean and noisy sets.
    #[command(subcommand)]
    Noise(commands::NoiseCommand),
    /// Near-duplicate search, review and removal.
    #[command(subcommand)]
    Dedup(commands::DedupCommand),
    /// Per-class accuracy of saved weights on a test set.
    Evaluate(commands::EvaluateArgs),
    /// Run a complete clean/noisy mixing sweep from a configuration file.
    Experiment(experiment::ExperimentArgs),
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
    let kind = err
        .chain()
        .find_map(|c| c.downcast_ref::<lnlab_core::Error>())
        .map(core_error_kind)
        .unwrap_or("runtime");
    json!({ "error": err.to_string(), "kind": kind, "causes": causes })
}

fn core_error_kind(e: &lnlab_core::Error) -> &'static str {
    use lnlab_core::Error::*;
    match e {
        Io { .. } => "io",
        Manifest { .. } => "manifest",
        InvalidArgument(_) => "invalid_argument",
        DimensionMismatch { .. } => "dimension_mismatch",
        Divergence { .. } => "divergence",
        Format { .. } => "format",
        UnknownPair(_) => "unknown_pair",
        Json(_) => "json",
        Csv(_) => "csv",
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let body = json!({ "error": e.render().to_string().trim(), "kind": "usage" });
            eprintln!("{body}");
            return ExitCode::from(2);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::FAILURE
        }
    }
}
