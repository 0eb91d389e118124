//! The `timemoe` command line: generate planted sequences, estimate
//! temporal RUS trajectories, train the router-aware MoE and turn run
//! directories into plot-ready tables.

mod error;
mod manifest;
mod report;
mod rus;
mod train;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use timemoe_core::{generate, sequence_csv, PlantSpec};
use timemoe_moe::Ablation;

pub use error::{Error, Result};
pub use manifest::{blob_hash, sidecar, InputFile, RunManifest};
pub use report::{ablation_csv, ablation_rows, collect_summaries, routing_csv, rus_csv, AblationRow};
pub use rus::{estimate_pairs, EstimateMode};
pub use train::{run_training, variant_name, RunSummary, TrainRun, TrainSettings};

#[derive(Debug, Parser)]
#[command(name = "timemoe", version, about = "Temporal RUS estimation and RUS-aware mixture-of-experts training")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a sequence bundle from a planted-interaction spec.
    Generate(GenerateArgs),
    /// Estimate per-lag RUS trajectories of modality pairs.
    Rus(RusArgs),
    /// Train the mixture-of-experts classifier.
    Train(TrainArgs),
    /// Emit plot-ready tables from run outputs.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Plant spec (JSON).
    #[arg(long)]
    pub spec: PathBuf,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RusArgs {
    /// Sequence CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Modality pair `a,b`; every pair when omitted.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub pair: Option<Vec<String>>,
    #[arg(long)]
    pub max_lag: usize,
    #[arg(long, value_enum, default_value_t = EstimateMode::Exact)]
    pub mode: EstimateMode,
    /// Target-history length conditioned on (exact mode).
    #[arg(long, default_value_t = 1)]
    pub markov_order: usize,
    /// Estimator config (JSON, neural mode).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Estimator seed (neural mode).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output JSON (array of trajectories).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Sequence CSV.
    #[arg(long)]
    pub data: PathBuf,
    /// Trajectory JSON files; exact RUS of the training split when omitted.
    #[arg(long, num_args = 1..)]
    pub rus: Vec<PathBuf>,
    /// Model config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of the sequence (its tail) held out for testing.
    #[arg(long, default_value_t = 0.2)]
    pub holdout: f64,
    /// Lags of the RUS computed when `--rus` is omitted.
    #[arg(long, default_value_t = 2)]
    pub max_lag: usize,
    #[arg(long, default_value_t = 1)]
    pub markov_order: usize,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub rus_repeat: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Independent runs, one subdirectory `seed-<s>` each.
    #[arg(long, value_delimiter = ',', num_args = 1)]
    pub seeds: Option<Vec<u64>>,
    /// Auxiliary terms to disable, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1, value_parser = parse_ablation)]
    pub ablate: Vec<Ablation>,
    /// Disable every auxiliary term.
    #[arg(long, conflicts_with = "ablate")]
    pub baseline: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    /// Expert x modality utilization CSV from a run directory.
    Routing,
    /// Long-format trajectory CSV from a trajectory JSON or run directory.
    Rus,
    /// Per-variant accuracy deltas against the full model, over all runs below a directory.
    Ablation,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory (or trajectory JSON for `rus`).
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_enum)]
    pub kind: ReportKind,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_ablation(s: &str) -> std::result::Result<Ablation, String> {
    s.parse().map_err(|e: timemoe_moe::Error| e.to_string())
}

/// Parses JSON, reporting the path of the offending field.
pub(crate) fn parse_json<T: DeserializeOwned>(path: &Path, bytes: &[u8]) -> Result<T> {
    let mut de = serde_json::Deserializer::from_slice(bytes);
    serde_path_to_error::deserialize(&mut de).map_err(|e| {
        let at = e.path().to_string();
        if at == "." {
            Error::Usage(format!("{}: {}", path.display(), e.inner()))
        } else {
            Error::Usage(format!("{}: at {at}: {}", path.display(), e.inner()))
        }
    })
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate(a) => cmd_generate(&a),
        Command::Rus(a) => rus::cmd_rus(&a),
        Command::Train(a) => train::cmd_train(&a),
        Command::Report(a) => report::cmd_report(&a),
    }
}

fn cmd_generate(a: &GenerateArgs) -> Result<()> {
    let started = manifest::now();
    let bytes = error::read(&a.spec)?;
    let mut spec: PlantSpec = parse_json(&a.spec, &bytes)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let bundle = generate(&spec)?;
    sequence_csv::write_bundle_file(&bundle, &a.out)?;
    log::info!("wrote {} steps to {}", bundle.len(), a.out.display());
    let mut m = RunManifest::new("generate", serde_json::to_value(&spec)?, Some(spec.seed), started);
    m.add_input(&a.spec, &bytes);
    m.add_output(&a.out);
    m.finish(&sidecar(&a.out))
}
