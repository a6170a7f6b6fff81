//! The whole pipeline through the same stage functions the CLI uses,
//! against a small dataset in a scratch directory.
//!
//! ```text
//! cargo run --example full_pipeline
//! ```

use tileseg::cli::{run_stage, Stage};
use tileseg::config::RunConfig;

fn main() {
    let mut cfg = RunConfig::default();
    cfg.seed = 0;
    cfg.n_slides = 8;
    cfg.synth.width = 256;
    cfg.synth.height = 256;
    cfg.synth.patch_size = 32;
    cfg.arch.crop_size = 28;
    cfg.arch.conv_channels = vec![4, 8];
    cfg.arch.feature_dim = 8;
    cfg.arch.seg_channels = vec![8];
    cfg.arch.seg_bottleneck = 16;
    cfg.arch.map_size = (8, 8);
    cfg.train.epochs_extractor = 2;
    cfg.train.epochs_segmentation = 6;
    cfg.train.epochs_e2e = 1;
    cfg.train.batch_size = 32;
    cfg.train.lr_extractor = 3e-3;
    cfg.train.lr_segmentation = 3e-3;
    cfg.train.e2e_lr_extractor = 1e-4;
    cfg.train.e2e_lr_segmentation = 1e-3;
    cfg.eval.split = "all".into();

    let out = std::path::Path::new("target/example-out/pipeline");
    std::fs::create_dir_all(out).unwrap();
    for stage in [
        Stage::Synth,
        Stage::Preprocess,
        Stage::TrainClassifier,
        Stage::ExtractFeatures,
        Stage::TrainSeg,
        Stage::TrainE2e,
        Stage::Predict,
        Stage::Eval,
        Stage::RenderHeatmap,
    ] {
        run_stage(stage, &cfg, out).unwrap_or_else(|e| panic!("{} failed: {e}", stage.name()));
        println!("{} done", stage.name());
    }
    println!();
    print!(
        "{}",
        std::fs::read_to_string(out.join("metrics/summary.txt")).unwrap()
    );
    println!("\nartifacts under {}", out.display());
}
