//! Separate learning on a small in-memory dataset: train the patch
//! extractor, freeze it, cache feature rows, assemble per-lump maps, train
//! the segmentation net.
//!
//! ```text
//! cargo run --example train_separate
//! ```

use tileseg::featuremap::MapLayout;
use tileseg::models::{init_params, ArchConfig};
use tileseg::preprocess::{tile_slide, tissue_mask, AugConfig};
use tileseg::synth::{generate_slide, SlideGenConfig};
use tileseg::trainer::{
    extract_all_features, slide_maps, train_feature_extractor, train_segmentation, SlidePatches,
    TrainConfig,
};

fn mini_arch() -> ArchConfig {
    ArchConfig {
        crop_size: 28,
        conv_channels: vec![4, 8],
        feature_dim: 8,
        seg_channels: vec![8],
        seg_bottleneck: 16,
        map_size: (8, 8),
        ..ArchConfig::default()
    }
}

fn mini_slides(n: usize) -> Vec<SlidePatches> {
    let cfg = SlideGenConfig {
        width: 256,
        height: 256,
        patch_size: 32,
        ..SlideGenConfig::default()
    };
    (0..n as u64)
        .map(|seed| {
            let (slide, annotation) = generate_slide(seed, &cfg).unwrap();
            let mask = tissue_mask(&slide).unwrap();
            let patches = tile_slide(&slide, &annotation, &mask, cfg.patch_size, 0.8);
            SlidePatches {
                slide_id: slide.id,
                patch_size: cfg.patch_size,
                patches,
            }
        })
        .collect()
}

fn main() {
    let arch = mini_arch();
    let slides = mini_slides(6);
    let n_patches: usize = slides.iter().map(|s| s.patches.len()).sum();
    println!("{} slides, {} kept patches", slides.len(), n_patches);

    let cfg = TrainConfig {
        epochs_extractor: 3,
        epochs_segmentation: 10,
        batch_size: 32,
        seg_batch_size: 4,
        lr_extractor: 3e-3,
        lr_segmentation: 3e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let (mut extractor, mut seg) = init_params(cfg.seed, &arch).unwrap();

    // stage 1: patch-level training of the extractor
    let aug = AugConfig::enabled(arch.crop_size);
    let trace = train_feature_extractor(&mut extractor, &arch, &slides, &aug, &cfg).unwrap();
    println!(
        "extractor: {} steps, loss {:.4} -> {:.4}",
        trace.rows.len(),
        trace.rows.first().unwrap().loss,
        trace.rows.last().unwrap().loss
    );

    // stage 2: freeze, cache boundary features, train the segmentation net
    let mut maps = Vec::new();
    for slide in &slides {
        let rb = extract_all_features(&extractor, &arch, slide).unwrap();
        maps.extend(slide_maps(&rb, &arch, MapLayout::default()).unwrap());
    }
    println!("assembled {} per-lump feature maps", maps.len());
    let trace = train_segmentation(&mut seg, &arch, &maps, &cfg).unwrap();
    println!(
        "segmentation: {} steps, loss {:.4} -> {:.4}",
        trace.rows.len(),
        trace.rows.first().unwrap().loss,
        trace.rows.last().unwrap().loss
    );
}
