//! `sinuscl`: corpus generation, training, cross-validation and reporting.

mod commands;
mod config;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgAction, Args, Parser, Subcommand};
use sinuscl::data::DEFAULT_NORMAL_RATIO;
use sinuscl::trainer::Regime;
use thiserror::Error;

use config::TrainFlags;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

macro_rules! run_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Run(e.to_string())
            }
        }
    )*};
}

run_error!(
    sinuscl::data::DataError,
    sinuscl::sampling::SamplingError,
    sinuscl::metrics::MetricsError,
    sinuscl::nn::NnError,
    sinuscl::nn::CheckpointError
);

impl From<sinuscl::trainer::TrainError> for CliError {
    fn from(e: sinuscl::trainer::TrainError) -> Self {
        match e {
            sinuscl::trainer::TrainError::Config(m) => CliError::Usage(m),
            e => CliError::Run(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "sinuscl", version, about = "Contrastive anomaly classification of sinus volumes")]
struct Cli {
    /// More log output (-v info, -vv debug). RUST_LOG takes precedence.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus of preprocessed sinus samples.
    GenData(GenDataArgs),
    /// Crop, resample and normalize raw heads listed in a manifest.
    Preprocess(PreprocessArgs),
    /// Train one model on a manifest.
    Train(TrainArgs),
    /// Nested stratified k-fold cross-validation.
    Kfold(KfoldArgs),
    /// AUPRC against the fraction of training data used.
    LabelEfficiency(LabelEfficiencyArgs),
    /// Export contrastive embeddings of a trained run.
    Embed(EmbedArgs),
    /// Render a run's PR curve and print its metrics.
    Report(ReportArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 200)]
    patients: usize,
    #[arg(long, default_value_t = DEFAULT_NORMAL_RATIO)]
    normal_ratio: f64,
    /// Sides dropped from the corpus (199 patients minus none gives 398 rows).
    #[arg(long, default_value_t = 0)]
    exclude: usize,
    #[arg(long, env = "SINUSCL_SEED", default_value_t = 0)]
    seed: u64,
    /// Write raw 128^3 heads instead of preprocessed samples.
    #[arg(long)]
    raw: bool,
}

#[derive(Args)]
struct PreprocessArgs {
    /// Manifest of raw heads, as written by `gen-data --raw`.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// JSON crop boxes; the default boxes match the generated heads.
    #[arg(long)]
    crops: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Held-out samples scored after training.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    regime: Option<Regime>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct KfoldArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    regime: Option<Regime>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 5)]
    inner_folds: usize,
    /// Keep both sides of a patient in the same fold.
    #[arg(long)]
    group_by_patient: bool,
    /// Also train one model per inner split and report its validation metrics.
    #[arg(long)]
    inner_validation: bool,
    /// Outer folds trained concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LabelEfficiencyArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "ce,ce_aug,simclr,supcon,combined")]
    regimes: Vec<Regime>,
    #[arg(long, value_delimiter = ',', default_value = "0.6,0.8,1.0")]
    fractions: Vec<f64>,
    #[command(flatten)]
    flags: TrainFlags,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EmbedArgs {
    /// Run directory holding `run.json` and `checkpoint.sclm`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    run: PathBuf,
    /// Where to write the PR curve; defaults to `pr_curve.svg` in the run.
    #[arg(long)]
    svg: Option<PathBuf>,
    /// Second run to compare against with a paired permutation test.
    #[arg(long)]
    compare: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    permutations: usize,
    #[arg(long, env = "SINUSCL_SEED", default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Train(a) => commands::train(a),
        Command::Kfold(a) => commands::kfold(a),
        Command::LabelEfficiency(a) => commands::label_efficiency(a),
        Command::Embed(a) => commands::embed(a),
        Command::Report(a) => commands::report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
