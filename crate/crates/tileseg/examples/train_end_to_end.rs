//! End-to-end training with the retained boundary gradient, and a check
//! that the staged gradients equal a monolithic single-tape backward.
//!
//! Per slide: the extractor runs forward in r micro-batches keeping only
//! the feature rows x; the segmentation pass yields dL/dx; each micro-batch
//! is recomputed under the surrogate loss L' = dL/dx . x whose gradient
//! equals dL/dw for the extractor weights.
//!
//! ```text
//! cargo run --example train_end_to_end
//! ```

use tileseg::autodiff::max_rel_error;
use tileseg::featuremap::MapLayout;
use tileseg::models::{init_params, ArchConfig};
use tileseg::preprocess::{tile_slide, tissue_mask, AugConfig};
use tileseg::synth::{generate_slide, SlideGenConfig};
use tileseg::trainer::{
    e2e_forward_backward, e2e_train, make_slide_batch, train_feature_extractor, SlidePatches,
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
    let slides = mini_slides(4);
    let cfg = TrainConfig {
        epochs_extractor: 2,
        epochs_e2e: 2,
        batch_size: 32,
        micro_batch_count: 4,
        lr_extractor: 3e-3,
        e2e_lr_extractor: 1e-4,
        e2e_lr_segmentation: 1e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let (mut extractor, mut seg) = init_params(cfg.seed, &arch).unwrap();

    // warm start the extractor, as end-to-end training expects
    train_feature_extractor(
        &mut extractor,
        &arch,
        &slides,
        &AugConfig::enabled(arch.crop_size),
        &cfg,
    )
    .unwrap();

    // sanity: staged gradients for one slide match r = 1 (one micro-batch)
    let batch = make_slide_batch(&slides[0], &AugConfig::disabled(arch.crop_size), 0, 0).unwrap();
    let staged = e2e_forward_backward(
        &extractor, &seg, &arch, &batch, &cfg, MapLayout::default(),
    )
    .unwrap();
    let whole = e2e_forward_backward(
        &extractor,
        &seg,
        &arch,
        &batch,
        &TrainConfig {
            micro_batch_count: 1,
            ..cfg.clone()
        },
        MapLayout::default(),
    )
    .unwrap();
    let mut worst = 0.0f64;
    for ((_, a), (_, b)) in staged.ext_grads.iter().zip(&whole.ext_grads) {
        worst = worst.max(max_rel_error(a, b));
    }
    println!(
        "slide 0: N = {} patches, r = {}: worst extractor-grad deviation vs r=1 is {worst:.2e}",
        batch.order.len(),
        cfg.micro_batch_count
    );

    let outcome = e2e_train(
        &mut extractor,
        &mut seg,
        &arch,
        &slides,
        &AugConfig::enabled(arch.crop_size),
        &cfg,
        MapLayout::default(),
    )
    .unwrap();
    println!(
        "end-to-end: masked loss {:.4} (warm start) -> {:.4} (after {} epochs)",
        outcome.warm_start_loss, outcome.final_loss, cfg.epochs_e2e
    );
    let r = &outcome.reports[0];
    println!(
        "memory (first slide): N={} r={} retained={} extractor-phase peak={} elements",
        r.n_patches, r.micro_batch_count, r.retained_elements, r.extractor_phase_peak
    );
}
