//! `chowder` command-line interface.

mod commands;
mod error;
mod util;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::error::CliResult;

#[derive(Debug, Parser)]
#[command(
    name = "chowder",
    version,
    about = "Weakly supervised slide classification and tile localization"
)]
struct Cli {
    /// Worker threads; defaults to the number of available cores.
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Detect tissue, tile slide images and sample tiles per slide.
    Preprocess(PreprocessArgs),
    /// Generate a synthetic bag dataset with planted positive tiles.
    Synth(SynthArgs),
    /// Assign stratified cross-validation folds to a manifest.
    Folds(FoldsArgs),
    /// Train an ensemble on the labeled slides of a manifest.
    Train(TrainArgs),
    /// Score slides with a trained ensemble.
    Predict(PredictArgs),
    /// Export per-tile heatmaps from a trained ensemble.
    Localize(LocalizeArgs),
    /// Slide-level AUC, and FROC when heatmaps and ground truth are given.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
pub struct PreprocessArgs {
    /// Directory of PNG/PPM slide images.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub level: Option<u32>,
    #[arg(long = "tile-size")]
    pub tile_size: Option<u32>,
    #[arg(long = "min-tissue")]
    pub min_tissue: Option<f64>,
    /// Minimum number of tiles sampled per slide.
    #[arg(long)]
    pub mtmin: Option<u64>,
    /// Thumbnail downsampling factor for tissue detection.
    #[arg(long = "mask-downsample")]
    pub mask_downsample: Option<u32>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// JSON run config; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// `localized` or `diffuse`.
    #[arg(long)]
    pub regime: Option<String>,
    #[arg(long)]
    pub slides: Option<usize>,
    /// Feature width.
    #[arg(long)]
    pub p: Option<usize>,
    /// Fraction of tiles planted in positive slides.
    #[arg(long)]
    pub fraction: Option<f64>,
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long = "min-tiles")]
    pub min_tiles: Option<usize>,
    #[arg(long = "max-tiles")]
    pub max_tiles: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FoldsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
    #[arg(long)]
    pub seed: u64,
    /// Output manifest with a `fold` column.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// `chowder`, `weldon`, `maxpool` or `meanpool`.
    #[arg(long)]
    pub arch: Option<String>,
    /// Top and bottom instances kept per kernel.
    #[arg(long = "R")]
    pub r: Option<usize>,
    /// Number of embedding kernels.
    #[arg(long = "J")]
    pub j: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub ensemble: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train on every fold except this one.
    #[arg(long = "holdout-fold")]
    pub holdout_fold: Option<usize>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Score only this fold.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Output CSV `slide_id,score`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct LocalizeArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub fold: Option<usize>,
    /// Tiles scoring above this value are flagged.
    #[arg(long, default_value_t = chowder::metrics::DEFAULT_TAU)]
    pub tau: f64,
    /// Embedding kernel to map.
    #[arg(long, default_value_t = 0)]
    pub kernel: usize,
    /// Heatmap pixels per tile.
    #[arg(long, default_value_t = 8)]
    pub cell: u32,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Score CSV written by `predict`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Manifest providing labels.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write the ROC curve here.
    #[arg(long)]
    pub roc: Option<PathBuf>,
    /// Heatmap directory written by `localize`.
    #[arg(long, requires = "truth")]
    pub maps: Option<PathBuf>,
    /// Directory of per-slide `grid_x,grid_y` tumor tile CSVs.
    #[arg(long, requires = "maps")]
    pub truth: Option<PathBuf>,
    /// Write the FROC curve here.
    #[arg(long, requires = "maps")]
    pub froc: Option<PathBuf>,
}

fn init_logging() {
    let env = env_logger::Env::new().filter_or("CHOWDER_LOG", "warn");
    let _ = env_logger::Builder::from_env(env).try_init();
}

fn set_jobs(jobs: Option<usize>) -> CliResult<()> {
    match jobs {
        Some(0) => error::invalid("--jobs must be at least 1"),
        #[cfg(feature = "parallel")]
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| error::CliError::Invalid(e.to_string())),
        #[cfg(not(feature = "parallel"))]
        Some(n) => {
            if n > 1 {
                log::warn!("built without the parallel feature; --jobs {n} ignored");
            }
            Ok(())
        }
        None => Ok(()),
    }
}

fn run(cli: Cli) -> CliResult<()> {
    set_jobs(cli.jobs)?;
    match cli.command {
        Command::Preprocess(a) => commands::preprocess(a),
        Command::Synth(a) => commands::synth(a),
        Command::Folds(a) => commands::folds(a),
        Command::Train(a) => commands::train(a),
        Command::Predict(a) => commands::predict(a),
        Command::Localize(a) => commands::localize(a),
        Command::Evaluate(a) => commands::evaluate(a),
    }
}

fn main() -> ExitCode {
    init_logging();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
