//! `rrelu`: train, prune and account for rotated-ReLU networks.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{DatasetKind, InitKind};
use rrelu::data::Augment;
use rrelu::model::ActivationKind;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] rrelu::Error),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

#[derive(Parser, Debug)]
#[command(name = "rrelu", version, about = "Rotated-ReLU training, pruning and accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoint, log and echoed config to `--out`.
    Train(TrainArgs),
    /// Pick the pruning threshold on the even half of the test split.
    SelectGamma(SelectGammaArgs),
    /// Zero, compact and verify; writes the smaller checkpoint.
    Prune(PruneArgs),
    /// Parameter and FLOP report for a checkpoint, optionally against its pruned form.
    Report(ReportArgs),
    /// Slope histogram or filter-path length distribution.
    Analyze(AnalyzeArgs),
    /// Slope histogram as CSV.
    ExportHist(ExportHistArgs),
}

/// Dataset selection; any flag overrides the run config.
#[derive(Args, Debug, Default, Clone)]
pub struct DataArgs {
    /// Run config JSON; defaults to `config.json` beside the checkpoint when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub dataset: Option<DatasetKind>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub train_limit: Option<usize>,
    #[arg(long)]
    pub test_limit: Option<usize>,
    /// Sample shape of synthetic blobs, e.g. `1,8,8`.
    #[arg(long, value_delimiter = ',')]
    pub blob_shape: Option<Vec<usize>>,
    #[arg(long)]
    pub blob_classes: Option<usize>,
    #[arg(long)]
    pub blob_separation: Option<f32>,
    #[arg(long)]
    pub blob_train: Option<usize>,
    #[arg(long)]
    pub blob_test: Option<usize>,
    #[arg(long)]
    pub blob_seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ActivationArg {
    Relu,
    Rrelu,
}

impl From<ActivationArg> for ActivationKind {
    fn from(a: ActivationArg) -> Self {
        match a {
            ActivationArg::Relu => ActivationKind::Relu,
            ActivationArg::Rrelu => ActivationKind::Rrelu,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum AugmentArg {
    None,
    Crop4Flip,
}

impl From<AugmentArg> for Augment {
    fn from(a: AugmentArg) -> Self {
        match a {
            AugmentArg::None => Augment::None,
            AugmentArg::Crop4Flip => Augment::Crop4Flip,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ScheduleKind {
    Constant,
    Multistep,
    Cosine,
}

#[derive(Args, Debug, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// `fcnn-784-500-10`, `resnet-20`, `wrn-16-4` or `rescnn-<units>-<width>`.
    #[arg(long)]
    pub model: Option<String>,
    #[arg(long, value_enum)]
    pub activation: Option<ActivationArg>,
    #[arg(long, value_enum)]
    pub init: Option<InitKind>,
    /// ReLU checkpoint for `--init type2`.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    /// Train the slopes alone.
    #[arg(long)]
    pub slopes_only: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerKind>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    #[arg(long, value_enum)]
    pub schedule: Option<ScheduleKind>,
    #[arg(long, value_delimiter = ',')]
    pub milestones: Option<Vec<usize>>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub lr_min: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub augment: Option<AugmentArg>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct SelectGammaArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
    /// Allowed accuracy drop in percentage points.
    #[arg(long, default_value_t = 0.2)]
    pub tolerance_pp: f64,
    /// Output JSON; defaults to `gamma.json` beside the checkpoint.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct PruneArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, conflicts_with = "gamma_file", required_unless_present = "gamma_file")]
    pub gamma: Option<f32>,
    /// JSON written by `select-gamma`.
    #[arg(long)]
    pub gamma_file: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Also report test accuracy before and after.
    #[arg(long)]
    pub with_accuracy: bool,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 100)]
    pub samples: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub pruned: Option<PathBuf>,
    /// Threshold shown in the report.
    #[arg(long, default_value_t = 0.0)]
    pub gamma: f32,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Path length distribution over the residual units.
    #[arg(long, conflicts_with = "hist", required_unless_present = "hist")]
    pub filter_path: bool,
    /// Slope histogram with this many bins.
    #[arg(long)]
    pub hist: Option<usize>,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportHistArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::SelectGamma(a) => commands::select_gamma(a),
        Command::Prune(a) => commands::prune(a),
        Command::Report(a) => commands::report(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::ExportHist(a) => commands::export_hist(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Core(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
