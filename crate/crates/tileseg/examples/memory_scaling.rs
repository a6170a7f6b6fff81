//! Measure how the extractor-phase live-memory peak falls with the
//! micro-batch count r: one slide of N patches costs about N*M/r plus the
//! retained N x D boundary.
//!
//! ```text
//! cargo run --example memory_scaling
//! ```

use tileseg::featuremap::{MapLayout, OverflowPolicy};
use tileseg::models::{init_params, ArchConfig};
use tileseg::preprocess::{tile_slide, tissue_mask, AugConfig};
use tileseg::synth::{generate_slide, SlideGenConfig};
use tileseg::trainer::{e2e_forward_backward, make_slide_batch, SlidePatches, TrainConfig};

fn main() {
    let synth_cfg = SlideGenConfig {
        width: 512,
        height: 512,
        patch_size: 32,
        ..SlideGenConfig::default()
    };
    let arch = ArchConfig {
        crop_size: 28,
        conv_channels: vec![4, 8],
        feature_dim: 8,
        seg_channels: vec![8],
        seg_bottleneck: 16,
        map_size: (16, 16),
        ..ArchConfig::default()
    };
    let (slide, annotation) = generate_slide(1, &synth_cfg).unwrap();
    let mask = tissue_mask(&slide).unwrap();
    let patches = tile_slide(&slide, &annotation, &mask, synth_cfg.patch_size, 0.8);
    let slide = SlidePatches {
        slide_id: slide.id.clone(),
        patch_size: synth_cfg.patch_size,
        patches,
    };
    let (ext, seg) = init_params(0, &arch).unwrap();
    let batch = make_slide_batch(&slide, &AugConfig::disabled(arch.crop_size), 0, 0).unwrap();
    let n = batch.order.len();
    println!("one slide, N = {n} patches, feature dim {}", arch.feature_dim);
    println!("{:>4} {:>14} {:>14} {:>8}", "r", "extractor peak", "recompute peak", "ratio");

    let mut baseline = 0usize;
    for r in [1usize, 2, 4, 8, 16] {
        if r > n {
            break;
        }
        let cfg = TrainConfig {
            micro_batch_count: r,
            ..TrainConfig::default()
        };
        let pass =
            e2e_forward_backward(&ext, &seg, &arch, &batch, &cfg, MapLayout { per_lump: false, overflow: OverflowPolicy::Error })
                .unwrap();
        if r == 1 {
            baseline = pass.report.extractor_phase_peak;
        }
        println!(
            "{:>4} {:>14} {:>14} {:>8.3}",
            r,
            pass.report.extractor_phase_peak,
            pass.report.recompute_phase_peak,
            pass.report.extractor_phase_peak as f64 / baseline as f64
        );
    }
    println!("(peaks in live f64 elements on the tape; the N x D boundary stays retained)");
}
