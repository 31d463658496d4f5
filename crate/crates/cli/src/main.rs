//! `granule`: generate synthetic data, train the three phases, evaluate and
//! rate samples.

mod artifacts;
mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable naming the default dataset directory.
pub const DATASET_ENV: &str = "GRANULE_DATASET";

#[derive(Parser, Debug)]
#[command(name = "granule", version, about = "Waste copper granule purity rating")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Options shared by every command that reads the run configuration.
#[derive(Args, Debug, Clone)]
pub struct ConfigArgs {
    /// TOML file with `[generator]`, `[train]` and `[eval]` tables.
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    /// Override one setting, e.g. `--set train.phase1.epochs=10`; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Seed for every section (same as `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl ConfigArgs {
    pub fn load(&self) -> anyhow::Result<config::RunConfig> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        config::RunConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic dataset.
    GenData(GenDataArgs),
    /// Run training phases and assemble the model bundle.
    Train(TrainArgs),
    /// Evaluate a model bundle (or the ground-truth oracle) on a split.
    Eval(EvalArgs),
    /// Rate one sample from a directory of images.
    Rate(RateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory.
    #[arg(long, env = DATASET_ENV)]
    pub out: PathBuf,
    /// Number of samples.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Images (stirs) per sample.
    #[arg(long)]
    pub n: Option<usize>,
    /// Replace an existing dataset.
    #[arg(long)]
    pub overwrite: bool,
    /// Check an existing dataset against its digests instead of generating.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, env = DATASET_ENV)]
    pub dataset: PathBuf,
    /// Checkpoint directory; the bundle goes to `<ckpt>/bundle`.
    #[arg(long, default_value = "ckpt")]
    pub ckpt: PathBuf,
    /// Comma-separated phases to run, in order.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
    pub phases: Vec<usize>,
    /// Disable cut-paste augmentation in phase 1.
    #[arg(long)]
    pub no_cutpaste: bool,
    /// Continue each phase from its latest epoch checkpoint.
    #[arg(long)]
    pub resume: bool,
    /// Retrain phases that already finished.
    #[arg(long)]
    pub overwrite: bool,
    /// Check the checkpoint directory against its digests instead of training.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long, env = DATASET_ENV)]
    pub dataset: PathBuf,
    /// Model bundle directory (not needed with `--oracle`).
    #[arg(long, required_unless_present = "oracle")]
    pub bundle: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: SplitArg,
    /// Pass ground truth through instead of running a model.
    #[arg(long)]
    pub oracle: bool,
    /// Level counts for the error sweep (default 2..=10).
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<usize>>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub overwrite: bool,
    /// Check an existing output directory against its digests.
    #[arg(long)]
    pub verify: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Baseline {
    Threshold,
}

#[derive(Args, Debug)]
pub struct RateArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    /// Directory of PNG images, or a sample directory with `images/`.
    #[arg(long)]
    pub images: PathBuf,
    /// Comma-separated thresholds; defaults to the bundle's ladder.
    #[arg(long, value_delimiter = ',')]
    pub ladder: Option<Vec<f64>>,
    /// Use a baseline instead of the purity network.
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Report path (printed to stdout when absent).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Rate(a) => commands::rate(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
