//! Train briefly, predict a held-out slide, and render the prediction map
//! next to the ground truth as a PPM image.
//!
//! ```text
//! cargo run --example predict_and_render
//! ```

use tileseg::featuremap::{assemble_label_map, make_placement, MapLayout, OverflowPolicy};
use tileseg::formats::write_ppm;
use tileseg::heatmap::render_heatmap;
use tileseg::models::{init_params, ArchConfig};
use tileseg::preprocess::{tile_slide, tissue_mask, AugConfig, PatchLabel};
use tileseg::synth::{generate_slide, SlideGenConfig};
use tileseg::trainer::{
    extract_all_features, predict, slide_maps, train_feature_extractor, train_segmentation,
    SlidePatches, TrainConfig,
};

fn main() {
    let synth_cfg = SlideGenConfig {
        width: 256,
        height: 256,
        patch_size: 32,
        ..SlideGenConfig::default()
    };
    let arch = ArchConfig {
        crop_size: 28,
        conv_channels: vec![4, 8],
        feature_dim: 8,
        seg_channels: vec![8],
        seg_bottleneck: 16,
        map_size: (8, 8),
        ..ArchConfig::default()
    };
    let slides: Vec<SlidePatches> = (0..5u64)
        .map(|seed| {
            let (slide, annotation) = generate_slide(seed, &synth_cfg).unwrap();
            let mask = tissue_mask(&slide).unwrap();
            let patches = tile_slide(&slide, &annotation, &mask, synth_cfg.patch_size, 0.8);
            SlidePatches {
                slide_id: format!("slide_{seed}"),
                patch_size: synth_cfg.patch_size,
                patches,
            }
        })
        .collect();

    let cfg = TrainConfig {
        epochs_extractor: 4,
        epochs_segmentation: 12,
        batch_size: 32,
        seg_batch_size: 4,
        lr_extractor: 3e-3,
        lr_segmentation: 3e-3,
        seed: 0,
        ..TrainConfig::default()
    };
    let (mut ext, mut seg) = init_params(0, &arch).unwrap();
    train_feature_extractor(
        &mut ext,
        &arch,
        &slides[..4],
        &AugConfig::enabled(arch.crop_size),
        &cfg,
    )
    .unwrap();
    let mut maps = Vec::new();
    for slide in &slides[..4] {
        let rb = extract_all_features(&ext, &arch, slide).unwrap();
        maps.extend(slide_maps(&rb, &arch, MapLayout::default()).unwrap());
    }
    train_segmentation(&mut seg, &arch, &maps, &cfg).unwrap();

    // held-out slide: whole-slide prediction, nolabel cells included
    let held_out = &slides[4];
    let prediction = predict(&ext, &seg, &arch, held_out, MapLayout::default()).unwrap();
    let tumor_cells = prediction.tumor_cells();
    println!(
        "{}: {} cells predicted, {} called tumor",
        held_out.slide_id,
        prediction.cells.len(),
        tumor_cells.len()
    );

    // render each lump next to its ground truth
    let positions: Vec<(u32, u32)> = held_out.patches.iter().map(|p| p.grid_pos).collect();
    let labels: Vec<((u32, u32), PatchLabel)> = held_out
        .patches
        .iter()
        .map(|p| (p.grid_pos, p.label))
        .collect();
    std::fs::create_dir_all("target/example-out").unwrap();
    for (k, comp) in tileseg::featuremap::tissue_components(&positions).iter().enumerate() {
        let placement = make_placement(comp, arch.map_size, OverflowPolicy::Error).unwrap();
        let comp_labels: Vec<((u32, u32), PatchLabel)> = labels
            .iter()
            .filter(|(pos, _)| comp.contains(pos))
            .copied()
            .collect();
        let lm = assemble_label_map(&comp_labels, &placement).unwrap();
        let (w, h, rgb) = render_heatmap(&placement, &prediction.cells, &lm, 16, true);
        let path = format!("target/example-out/heatmap_lump{k}.ppm");
        write_ppm(std::path::Path::new(&path), w, h, &rgb).unwrap();
        println!("wrote {path} ({w}x{h}; left prediction, right ground truth)");
    }
    println!("colors: tumor red, normal gray, nolabel purple-tinted, background white");
}
