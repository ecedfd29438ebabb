mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

/// Camera/LiDAR BEV vector map construction on synthetic scenes.
#[derive(Debug, Parser)]
#[command(name = "bevmap", version)]
pub struct Cli {
    /// Run config (TOML); the built-in benchmark config when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the config output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for generation, inference and per-batch gradients.
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a seeded dataset.
    Synth {
        /// Dataset directory; defaults to the config's data path.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Total scene count, one fifth of it test; defaults to the config split sizes.
        #[arg(long)]
        scenes: Option<usize>,
    },
    /// Train on the train split, writing loss.csv and per-epoch checkpoints.
    Train {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Write one prediction file per scene.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Load a checkpoint whose config hash differs.
        #[arg(long)]
        force: bool,
    },
    /// Score prediction files against the dataset ground truth.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Train and evaluate the sgc x pec grid.
    Ablate {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
    },
    /// Draw ground truth and predictions as SVG, grids as PPM.
    Render {
        /// Dataset to read a scene from.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Scene id within the dataset.
        #[arg(long)]
        scene: Option<String>,
        /// Ground-truth map file, instead of a dataset scene.
        #[arg(long)]
        map: Option<PathBuf>,
        /// Prediction map file, or a directory of `<scene id>.json`.
        #[arg(long)]
        pred: Option<PathBuf>,
        /// Feature channel for the grid rasters.
        #[arg(long, default_value_t = 0)]
        channel: usize,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).format_timestamp(None).init();
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
