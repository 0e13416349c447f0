//! `cle`: command-line front end for the ConvLSTM engine.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cle_core::models::Architecture;
use cle_core::Precision;

use config::CONFIG_REFERENCE;

/// Failure with the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    /// Exit 1: a check or evaluation did not pass.
    pub fn failed(message: impl Into<String>) -> Self {
        CliError {
            code: 1,
            message: message.into(),
        }
    }

    /// Exit 2: bad flags or configuration.
    pub fn usage(message: impl Into<String>) -> Self {
        CliError {
            code: 2,
            message: message.into(),
        }
    }

    /// Exit 3: unreadable or malformed data.
    pub fn data(message: impl Into<String>) -> Self {
        CliError {
            code: 3,
            message: message.into(),
        }
    }
}

impl From<cle_core::Error> for CliError {
    fn from(e: cle_core::Error) -> Self {
        use cle_core::Error as E;
        let message = e.to_string();
        match e {
            E::InvalidArgument(_)
            | E::ShapeMismatch { .. }
            | E::DegenerateOutput { .. }
            | E::InvalidAxis { .. }
            | E::EmptySchedule
            | E::OutsideSchedule { .. } => CliError::usage(message),
            E::Io(_)
            | E::Path { .. }
            | E::Csv(_)
            | E::Format { .. }
            | E::VersionMismatch { .. }
            | E::ArchitectureMismatch { .. }
            | E::EmptyVideo
            | E::EmptyManifest
            | E::EmptySplit(_)
            | E::LabelOutOfRange { .. } => CliError::data(message),
            _ => CliError::failed(message),
        }
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "cle",
    version,
    about = "ConvLSTM video classifiers for depth action recognition"
)]
struct Cli {
    /// Cap on worker threads (1 gives bitwise-reproducible runs).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic depth-video dataset with a manifest.
    Synth(SynthArgs),
    /// Per-class video-length histogram over the bin edges (CSV).
    Stats(StatsArgs),
    /// Train a model described by a config file.
    #[command(after_help = CONFIG_REFERENCE)]
    Train(TrainArgs),
    /// Learning-rate range test on the training split (CSV).
    #[command(name = "lr-range", after_help = CONFIG_REFERENCE)]
    LrRange(RangeArgs),
    /// Evaluate a checkpoint: accuracy, per-class accuracy, confusion matrix.
    #[command(after_help = CONFIG_REFERENCE)]
    Eval(EvalArgs),
    /// Per-video inference latency.
    Bench(BenchArgs),
    /// Finite-difference check of every differentiable op and the ConvLSTM cell.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub per_class: usize,
    #[arg(long, default_value_t = 40)]
    pub len_min: usize,
    #[arg(long, default_value_t = 80)]
    pub len_max: usize,
    /// Make the class visible only in the second half of each video.
    #[arg(long)]
    pub late_cue: bool,
    /// Frame side in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long, env = "CLE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Replace a previous dataset in a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Comma-separated bin edges [default: 32,40,...,176,208].
    #[arg(long)]
    pub edges: Option<String>,
    #[arg(long, default_value_t = cle_core::data::CLIP_LEN)]
    pub clip_len: usize,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `model` from the config.
    #[arg(long)]
    pub model: Option<Architecture>,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from `<out_dir>/last.clck`.
    #[arg(long)]
    pub resume: bool,
    /// Start over even if `out_dir` already holds a run.
    #[arg(long)]
    pub force: bool,
    /// No per-epoch progress lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Args, Debug)]
pub struct RangeArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long, default_value_t = 1e-7)]
    pub start: f64,
    #[arg(long, default_value_t = 1e-1)]
    pub end: f64,
    #[arg(long, default_value_t = 100)]
    pub iters: usize,
    /// Output CSV [default: <out_dir>/lr_range.csv].
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitName {
    Train,
    Validation,
    Test,
    All,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Run config [default: config.toml beside the checkpoint, else defaults].
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `data.manifest`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    /// Output directory [default: eval-<split> beside the checkpoint].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Exit with status 1 when accuracy falls below this.
    #[arg(long)]
    pub min_accuracy: Option<f64>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoints to time (repeatable).
    #[arg(long)]
    pub checkpoint: Vec<PathBuf>,
    /// Freshly initialized full-size models to time (repeatable).
    #[arg(long)]
    pub model: Vec<Architecture>,
    /// Classes of the fresh models.
    #[arg(long, default_value_t = 60)]
    pub classes: usize,
    /// Manifest whose videos are timed; synthetic videos otherwise.
    #[arg(long)]
    pub videos: Option<PathBuf>,
    /// Number of synthetic videos.
    #[arg(long, default_value_t = 4)]
    pub synthetic: usize,
    /// Length of the synthetic videos.
    #[arg(long, default_value_t = 100)]
    pub frames: usize,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long, default_value_t = cle_core::train::BENCH_WARMUP)]
    pub warmup: usize,
    #[arg(long, default_value = "single")]
    pub precision: Precision,
    #[arg(long, env = "CLE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    /// First seed.
    #[arg(long, env = "CLE_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Number of consecutive seeds.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Only double precision is supported.
    #[arg(long, default_value = "double")]
    pub precision: Precision,
    #[arg(long, default_value_t = cle_core::gradcheck::GRADCHECK_TOLERANCE)]
    pub tolerance: f64,
    /// Smallest denominator of the relative error; gradients below it are
    /// compared in absolute terms.
    #[arg(long, default_value_t = cle_core::gradcheck::GRADCHECK_FLOOR)]
    pub floor: f64,
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::usage(e.to_string()))?;
    }
    match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Stats(a) => commands::stats(a),
        Command::Train(a) => commands::train(a),
        Command::LrRange(a) => commands::lr_range(a),
        Command::Eval(a) => commands::eval(a),
        Command::Bench(a) => commands::bench(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
