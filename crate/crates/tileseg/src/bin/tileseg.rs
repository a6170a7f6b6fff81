//! Stage-oriented command line for the tileseg pipeline. All logic lives in
//! the library; this binary only parses arguments, assembles the run
//! configuration, and dispatches.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tileseg::cli::{run_stage, Stage};
use tileseg::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "tileseg",
    about = "Tiled-raster tumor segmentation: synthetic data, preprocessing, two-stage and end-to-end training, prediction, evaluation"
)]
struct Args {
    /// Configuration file (`key = value` lines; defaults apply otherwise).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override the run seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory holding all stage artifacts.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Per-key overrides, e.g. --set train.epochs_e2e=2 (repeatable).
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    sets: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic slide dataset and its manifest.
    Synth,
    /// Tissue masks, patch tiling and labeling for every slide.
    Preprocess,
    /// Train the patch feature extractor on labeled patches.
    TrainClassifier,
    /// Run the frozen extractor over all slides and cache feature rows.
    ExtractFeatures,
    /// Train the segmentation net on cached feature maps.
    TrainSeg,
    /// End-to-end training from the separate-learning warm start.
    TrainE2e,
    /// Whole-slide tumor probability maps for the configured split.
    Predict,
    /// Patch metrics (accuracy, PR-AUC) and patient-level staging.
    Eval,
    /// Render prediction/ground-truth heatmap images.
    RenderHeatmap,
}

impl Command {
    fn stage(&self) -> Stage {
        match self {
            Command::Synth => Stage::Synth,
            Command::Preprocess => Stage::Preprocess,
            Command::TrainClassifier => Stage::TrainClassifier,
            Command::ExtractFeatures => Stage::ExtractFeatures,
            Command::TrainSeg => Stage::TrainSeg,
            Command::TrainE2e => Stage::TrainE2e,
            Command::Predict => Stage::Predict,
            Command::Eval => Stage::Eval,
            Command::RenderHeatmap => Stage::RenderHeatmap,
        }
    }
}

fn build_config(args: &Args) -> Result<RunConfig, String> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| format!("cannot read {}: {e}", path.display()))?;
            RunConfig::parse(&text).map_err(|e| e.to_string())?
        }
        None => RunConfig::default(),
    };
    for kv in &args.sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| format!("--set wants KEY=VALUE, got {kv:?}"))?;
        cfg.set(k.trim(), v.trim()).map_err(|e| e.to_string())?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let cfg = match build_config(&args) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("tileseg: {e}");
            return ExitCode::FAILURE;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&args.out) {
        eprintln!("tileseg: cannot create {}: {e}", args.out.display());
        return ExitCode::FAILURE;
    }
    let stage = args.command.stage();
    match run_stage(stage, &cfg, &args.out) {
        Ok(()) => {
            println!("{} done", stage.name());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tileseg {}: {e}", stage.name());
            ExitCode::FAILURE
        }
    }
}
