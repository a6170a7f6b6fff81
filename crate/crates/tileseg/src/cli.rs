//! Pipeline stages behind the `tileseg` binary. Every stage reads files
//! written by earlier stages, writes its own outputs plus a run manifest
//! (config echo, seed, input hashes, output list), and nothing else.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{ConfigError, RunConfig};
use crate::eval::{kappa, patch_accuracy, pn_stage, pr_auc, slide_class, EvalError, LesionCalibration, PnStage, SlideClass};
use crate::featuremap::{assemble_label_map, make_placement, tissue_components, CellLabel, FeatureMapError};
use crate::formats::{self, FormatError};
use crate::heatmap::render_heatmap;
use crate::models::{init_params, ExtractorParams, ModelError, SegParams};
use crate::preprocess::{tile_slide, tissue_mask, Patch, PatchLabel, PreprocessError};
use crate::synth::{generate_dataset, AnnotationMask, DatasetManifest, SlideImage, Split, SynthError};
use crate::tensor::{load_checkpoint, save_checkpoint, TensorError};
use crate::trainer::{
    e2e_train, extract_all_features, load_boundary, predict, save_boundary, slide_maps,
    train_feature_extractor, train_segmentation, SlidePatches, TrainError,
};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("{0}")]
    Synth(#[from] SynthError),
    #[error("{0}")]
    Preprocess(#[from] PreprocessError),
    #[error("{0}")]
    Train(#[from] TrainError),
    #[error("{0}")]
    Model(#[from] ModelError),
    #[error("{0}")]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Eval(#[from] EvalError),
    #[error("{0}")]
    FeatureMap(#[from] FeatureMapError),
    #[error("{0}")]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing stage input: {0}")]
    MissingInput(String),
    #[error("end-to-end training needs the separate-learning checkpoints; missing: {0} (set train.allow_cold_start = true to override)")]
    MissingWarmStart(String),
    #[error("{0}")]
    Other(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Preprocess,
    TrainClassifier,
    ExtractFeatures,
    TrainSeg,
    TrainE2e,
    Predict,
    Eval,
    RenderHeatmap,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Preprocess => "preprocess",
            Stage::TrainClassifier => "train-classifier",
            Stage::ExtractFeatures => "extract-features",
            Stage::TrainSeg => "train-seg",
            Stage::TrainE2e => "train-e2e",
            Stage::Predict => "predict",
            Stage::Eval => "eval",
            Stage::RenderHeatmap => "render-heatmap",
        }
    }
}

/// Run one stage against an output directory.
pub fn run_stage(stage: Stage, cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    match stage {
        Stage::Synth => run_synth(cfg, out),
        Stage::Preprocess => run_preprocess(cfg, out),
        Stage::TrainClassifier => run_train_classifier(cfg, out),
        Stage::ExtractFeatures => run_extract_features(cfg, out),
        Stage::TrainSeg => run_train_seg(cfg, out),
        Stage::TrainE2e => run_train_e2e(cfg, out),
        Stage::Predict => run_predict(cfg, out),
        Stage::Eval => run_eval(cfg, out),
        Stage::RenderHeatmap => run_render_heatmap(cfg, out),
    }
}

// ── manifest helpers ──────────────────────────────────────────────────

fn sha256_hex(path: &Path) -> Result<String, CliError> {
    let bytes = std::fs::read(path)?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    let digest = hasher.finalize();
    let mut hex = String::with_capacity(64);
    for b in digest {
        write!(hex, "{b:02x}").expect("write to string");
    }
    Ok(hex)
}

struct StageManifest {
    stage: &'static str,
    config_echo: String,
    inputs: Vec<(String, String)>,
    outputs: Vec<String>,
    extra: Vec<String>,
}

impl StageManifest {
    fn new(stage: Stage, cfg: &RunConfig) -> Self {
        StageManifest {
            stage: stage.name(),
            config_echo: cfg.to_text(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            extra: Vec::new(),
        }
    }

    fn input(&mut self, out_root: &Path, rel: &str) -> Result<(), CliError> {
        self.inputs
            .push((rel.to_string(), sha256_hex(&out_root.join(rel))?));
        Ok(())
    }

    fn output(&mut self, rel: impl Into<String>) {
        self.outputs.push(rel.into());
    }

    /// Manifests double as config files: the config echo is live and all
    /// provenance metadata is commented, so
    /// `tileseg --config manifests/<stage>.manifest <stage>` reproduces the
    /// stage exactly.
    fn write(&self, out_root: &Path) -> Result<(), CliError> {
        let mut text = String::new();
        writeln!(text, "# tileseg stage manifest").unwrap();
        writeln!(text, "# stage = {}", self.stage).unwrap();
        for line in self.config_echo.lines().skip(1) {
            writeln!(text, "{line}").unwrap();
        }
        for (rel, hash) in &self.inputs {
            writeln!(text, "# input {rel} sha256:{hash}").unwrap();
        }
        for rel in &self.outputs {
            writeln!(text, "# output {rel}").unwrap();
        }
        for line in &self.extra {
            writeln!(text, "# {line}").unwrap();
        }
        formats::write_text(
            &out_root.join("manifests").join(format!("{}.manifest", self.stage)),
            &text,
        )?;
        Ok(())
    }
}

// ── stage IO ──────────────────────────────────────────────────────────

fn dataset_manifest(out: &Path) -> Result<DatasetManifest, CliError> {
    let path = out.join("dataset.manifest");
    if !path.exists() {
        return Err(CliError::MissingInput(
            "dataset.manifest (run `synth` first)".into(),
        ));
    }
    DatasetManifest::from_text(&formats::read_text(&path)?).map_err(CliError::Other)
}

fn load_slide(out: &Path, id: &str) -> Result<SlideImage, CliError> {
    let (w, h, rgb) = formats::read_ppm(&out.join("slides").join(format!("{id}.ppm")))?;
    Ok(SlideImage {
        id: id.to_string(),
        width: w,
        height: h,
        rgb,
    })
}

fn load_mask(out: &Path, id: &str) -> Result<AnnotationMask, CliError> {
    let (w, h, codes) = formats::read_pgm(&out.join("masks").join(format!("{id}.pgm")))?;
    Ok(AnnotationMask {
        width: w,
        height: h,
        codes,
    })
}

fn write_patch_store(out: &Path, slide: &SlidePatches, threshold: u8) -> Result<(), CliError> {
    std::fs::create_dir_all(out.join("patches"))?;
    let mut idx = format!("# threshold = {threshold}\n");
    let mut blob = Vec::new();
    for p in &slide.patches {
        idx.push_str(&format!(
            "{} {} {}\n",
            p.grid_pos.0,
            p.grid_pos.1,
            p.label.as_str()
        ));
        blob.extend_from_slice(&p.pixels);
    }
    formats::write_text(
        &out.join("patches").join(format!("{}.idx", slide.slide_id)),
        &idx,
    )?;
    std::fs::write(
        out.join("patches").join(format!("{}.blob", slide.slide_id)),
        &blob,
    )?;
    Ok(())
}

fn load_patch_store(out: &Path, id: &str, patch_size: usize) -> Result<SlidePatches, CliError> {
    let idx_path = out.join("patches").join(format!("{id}.idx"));
    if !idx_path.exists() {
        return Err(CliError::MissingInput(format!(
            "patches/{id}.idx (run `preprocess` first)"
        )));
    }
    let idx = formats::read_text(&idx_path)?;
    let blob = std::fs::read(out.join("patches").join(format!("{id}.blob")))?;
    let px_per_patch = patch_size * patch_size * 3;
    let mut patches = Vec::new();
    let mut offset = 0usize;
    for line in idx.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut parts = line.split_whitespace();
        let parse_err = || CliError::Other(format!("bad patch index line {line:?} in {id}.idx"));
        let r: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let c: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let label = parts
            .next()
            .and_then(PatchLabel::parse)
            .ok_or_else(parse_err)?;
        if blob.len() < offset + px_per_patch {
            return Err(CliError::Other(format!("{id}.blob truncated")));
        }
        patches.push(Patch {
            slide_id: id.to_string(),
            grid_pos: (r, c),
            label,
            pixels: blob[offset..offset + px_per_patch].to_vec(),
        });
        offset += px_per_patch;
    }
    Ok(SlidePatches {
        slide_id: id.to_string(),
        patch_size,
        patches,
    })
}

fn split_ids(manifest: &DatasetManifest, split: &str) -> Vec<String> {
    let mut ids: Vec<String> = manifest
        .slides
        .iter()
        .filter(|s| match split {
            "train" => s.split == Split::Train,
            "val" => s.split == Split::Val,
            "test" => s.split == Split::Test,
            _ => true,
        })
        .map(|s| s.id.clone())
        .collect();
    ids.sort();
    ids
}

fn ckpt_path(out: &Path, name: &str) -> PathBuf {
    out.join("checkpoints").join(format!("{name}.ckpt"))
}

fn save_extractor(out: &Path, cfg: &RunConfig, name: &str, params: &ExtractorParams) -> Result<(), CliError> {
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let mut quantized = params.clone();
    for (_, t) in quantized.tensors_mut() {
        t.quantize_f32();
    }
    save_checkpoint(
        &ckpt_path(out, name),
        &cfg.arch.fingerprint(),
        &quantized.named_tensors(),
    )?;
    Ok(())
}

fn save_seg(out: &Path, cfg: &RunConfig, name: &str, params: &SegParams) -> Result<(), CliError> {
    std::fs::create_dir_all(out.join("checkpoints"))?;
    let mut quantized = params.clone();
    for (_, t) in quantized.tensors_mut() {
        t.quantize_f32();
    }
    save_checkpoint(
        &ckpt_path(out, name),
        &cfg.arch.fingerprint(),
        &quantized.named_tensors(),
    )?;
    Ok(())
}

fn load_extractor(out: &Path, cfg: &RunConfig, name: &str) -> Result<ExtractorParams, CliError> {
    let path = ckpt_path(out, name);
    if !path.exists() {
        return Err(CliError::MissingInput(format!("checkpoints/{name}.ckpt")));
    }
    let loaded = load_checkpoint(&path, &cfg.arch.fingerprint())?;
    let (mut params, _) = init_params(0, &cfg.arch)?;
    params.load_named(loaded)?;
    Ok(params)
}

fn load_seg(out: &Path, cfg: &RunConfig, name: &str) -> Result<SegParams, CliError> {
    let path = ckpt_path(out, name);
    if !path.exists() {
        return Err(CliError::MissingInput(format!("checkpoints/{name}.ckpt")));
    }
    let loaded = load_checkpoint(&path, &cfg.arch.fingerprint())?;
    let (_, mut params) = init_params(0, &cfg.arch)?;
    params.load_named(loaded)?;
    Ok(params)
}

fn write_prediction(out: &Path, pred: &crate::trainer::SlidePrediction) -> Result<(), CliError> {
    let mut text = String::new();
    for &((r, c), p) in &pred.cells {
        text.push_str(&format!("{r} {c} {p}\n"));
    }
    formats::write_text(
        &out.join("predictions").join(format!("{}.pred", pred.slide_id)),
        &text,
    )?;
    Ok(())
}

/// (grid position, tumor probability) rows of one slide's prediction file.
type PredCells = Vec<((u32, u32), f64)>;

fn read_prediction(out: &Path, id: &str) -> Result<PredCells, CliError> {
    let path = out.join("predictions").join(format!("{id}.pred"));
    if !path.exists() {
        return Err(CliError::MissingInput(format!(
            "predictions/{id}.pred (run `predict` first)"
        )));
    }
    let text = formats::read_text(&path)?;
    let mut cells = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let parse_err = || CliError::Other(format!("bad prediction line {line:?} in {id}.pred"));
        let r: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let c: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        let p: f64 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(parse_err)?;
        cells.push(((r, c), p));
    }
    Ok(cells)
}

// ── stages ────────────────────────────────────────────────────────────

fn run_synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = generate_dataset(cfg.seed, cfg.n_slides, &cfg.synth, out)?;
    let mut sm = StageManifest::new(Stage::Synth, cfg);
    sm.output("dataset.manifest");
    for s in &manifest.slides {
        sm.output(format!("slides/{}.ppm", s.id));
        sm.output(format!("masks/{}.pgm", s.id));
    }
    sm.write(out)
}

fn run_preprocess(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let mut sm = StageManifest::new(Stage::Preprocess, cfg);
    sm.input(out, "dataset.manifest")?;
    let ps = cfg.synth.patch_size;
    for entry in &manifest.slides {
        let slide = load_slide(out, &entry.id)?;
        let annotation = load_mask(out, &entry.id)?;
        let mask = tissue_mask(&slide)?;
        let patches = tile_slide(&slide, &annotation, &mask, ps, cfg.tissue_frac);
        let sp = SlidePatches {
            slide_id: entry.id.clone(),
            patch_size: ps,
            patches,
        };
        write_patch_store(out, &sp, mask.threshold_used)?;
        sm.output(format!("patches/{}.idx", entry.id));
        sm.output(format!("patches/{}.blob", entry.id));
    }
    sm.write(out)
}

fn run_train_classifier(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let train_ids = split_ids(&manifest, "train");
    let mut sm = StageManifest::new(Stage::TrainClassifier, cfg);
    sm.input(out, "dataset.manifest")?;
    let mut slides = Vec::new();
    for id in &train_ids {
        sm.input(out, &format!("patches/{id}.idx"))?;
        slides.push(load_patch_store(out, id, cfg.synth.patch_size)?);
    }
    let (mut params, _) = init_params(cfg.seed, &cfg.arch)?;
    let trace = train_feature_extractor(&mut params, &cfg.arch, &slides, &cfg.train_aug(), &cfg.train)?;
    save_extractor(out, cfg, "extractor", &params)?;
    formats::write_text(&out.join("traces").join("extractor.csv"), &trace.to_csv())?;
    sm.output("checkpoints/extractor.ckpt");
    sm.output("traces/extractor.csv");
    sm.write(out)
}

fn run_extract_features(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let params = load_extractor(out, cfg, "extractor")?;
    let mut sm = StageManifest::new(Stage::ExtractFeatures, cfg);
    sm.input(out, "dataset.manifest")?;
    sm.input(out, "checkpoints/extractor.ckpt")?;
    for entry in &manifest.slides {
        let sp = load_patch_store(out, &entry.id, cfg.synth.patch_size)?;
        if sp.patches.is_empty() {
            continue;
        }
        let rb = extract_all_features(&params, &cfg.arch, &sp)?;
        save_boundary(&out.join("features"), &rb)?;
        sm.output(format!("features/{}.tns", entry.id));
        sm.output(format!("features/{}.txt", entry.id));
    }
    sm.write(out)
}

fn run_train_seg(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let train_ids = split_ids(&manifest, "train");
    let mut sm = StageManifest::new(Stage::TrainSeg, cfg);
    sm.input(out, "dataset.manifest")?;
    let mut maps = Vec::new();
    for id in &train_ids {
        let tns = format!("features/{id}.tns");
        if !out.join(&tns).exists() {
            continue; // slide had no kept patches
        }
        sm.input(out, &tns)?;
        let rb = load_boundary(&out.join("features"), id)?;
        maps.extend(slide_maps(&rb, &cfg.arch, cfg.map_layout())?);
    }
    if maps.is_empty() {
        return Err(CliError::MissingInput(
            "features/*.tns (run `extract-features` first)".into(),
        ));
    }
    let (_, mut seg) = init_params(cfg.seed, &cfg.arch)?;
    let trace = train_segmentation(&mut seg, &cfg.arch, &maps, &cfg.train)?;
    save_seg(out, cfg, "seg", &seg)?;
    formats::write_text(&out.join("traces").join("seg.csv"), &trace.to_csv())?;
    sm.output("checkpoints/seg.ckpt");
    sm.output("traces/seg.csv");
    sm.write(out)
}

fn run_train_e2e(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let ext_path = ckpt_path(out, "extractor");
    let seg_path = ckpt_path(out, "seg");
    if !cfg.train.allow_cold_start {
        let mut missing = Vec::new();
        if !ext_path.exists() {
            missing.push("checkpoints/extractor.ckpt");
        }
        if !seg_path.exists() {
            missing.push("checkpoints/seg.ckpt");
        }
        if !missing.is_empty() {
            return Err(CliError::MissingWarmStart(missing.join(", ")));
        }
    }
    let (mut ext, mut seg) = if ext_path.exists() && seg_path.exists() {
        (load_extractor(out, cfg, "extractor")?, load_seg(out, cfg, "seg")?)
    } else {
        init_params(cfg.seed, &cfg.arch)?
    };

    let mut sm = StageManifest::new(Stage::TrainE2e, cfg);
    sm.input(out, "dataset.manifest")?;
    if ext_path.exists() {
        sm.input(out, "checkpoints/extractor.ckpt")?;
    }
    if seg_path.exists() {
        sm.input(out, "checkpoints/seg.ckpt")?;
    }
    let train_ids = split_ids(&manifest, "train");
    let mut slides = Vec::new();
    for id in &train_ids {
        let sp = load_patch_store(out, id, cfg.synth.patch_size)?;
        if !sp.patches.is_empty() {
            slides.push(sp);
        }
    }
    let outcome = e2e_train(
        &mut ext,
        &mut seg,
        &cfg.arch,
        &slides,
        &cfg.train_aug(),
        &cfg.train,
        cfg.map_layout(),
    )?;
    save_extractor(out, cfg, "extractor_e2e", &ext)?;
    save_seg(out, cfg, "seg_e2e", &seg)?;
    formats::write_text(&out.join("traces").join("e2e.csv"), &outcome.trace.to_csv())?;
    sm.output("checkpoints/extractor_e2e.ckpt");
    sm.output("checkpoints/seg_e2e.ckpt");
    sm.output("traces/e2e.csv");
    sm.extra.push(format!("warm_start_loss = {}", outcome.warm_start_loss));
    sm.extra.push(format!("final_loss = {}", outcome.final_loss));
    for report in &outcome.reports {
        sm.extra.push(report.to_manifest_line());
    }
    sm.write(out)
}

/// Pick the model pair for prediction: `auto` prefers end-to-end weights.
fn prediction_models(cfg: &RunConfig, out: &Path) -> Result<(ExtractorParams, SegParams, &'static str), CliError> {
    let has_e2e = ckpt_path(out, "extractor_e2e").exists() && ckpt_path(out, "seg_e2e").exists();
    let choice = match cfg.predict_model.as_str() {
        "separate" => "separate",
        "e2e" => "e2e",
        _ if has_e2e => "e2e",
        _ => "separate",
    };
    let (ext_name, seg_name) = if choice == "e2e" {
        ("extractor_e2e", "seg_e2e")
    } else {
        ("extractor", "seg")
    };
    Ok((
        load_extractor(out, cfg, ext_name)?,
        load_seg(out, cfg, seg_name)?,
        if choice == "e2e" { "e2e" } else { "separate" },
    ))
}

fn run_predict(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let (ext, seg, which) = prediction_models(cfg, out)?;
    let mut sm = StageManifest::new(Stage::Predict, cfg);
    sm.input(out, "dataset.manifest")?;
    sm.extra.push(format!("model = {which}"));
    let ids = split_ids(&manifest, &cfg.eval.split);
    for id in &ids {
        let sp = load_patch_store(out, id, cfg.synth.patch_size)?;
        if sp.patches.is_empty() {
            continue;
        }
        let pred = predict(&ext, &seg, &cfg.arch, &sp, cfg.map_layout())?;
        write_prediction(out, &pred)?;
        sm.output(format!("predictions/{id}.pred"));
    }
    sm.write(out)
}

fn run_eval(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let ids = split_ids(&manifest, &cfg.eval.split);
    let cal = LesionCalibration::new(cfg.eval.cell_mm);
    let mut sm = StageManifest::new(Stage::Eval, cfg);
    sm.input(out, "dataset.manifest")?;

    let mut cells: Vec<(f64, CellLabel)> = Vec::new();
    let mut scores = Vec::new();
    let mut score_labels = Vec::new();
    let mut pred_classes: Vec<SlideClass> = Vec::new();
    let mut truth_classes: Vec<SlideClass> = Vec::new();
    let mut evaluated = 0usize;
    for id in &ids {
        let sp = load_patch_store(out, id, cfg.synth.patch_size)?;
        if sp.patches.is_empty() {
            continue;
        }
        let preds = read_prediction(out, id)?;
        evaluated += 1;
        let by_pos: BTreeMap<(u32, u32), PatchLabel> = sp
            .patches
            .iter()
            .map(|p| (p.grid_pos, p.label))
            .collect();
        let mut pred_tumor_cells = Vec::new();
        let mut truth_tumor_cells = Vec::new();
        for &(pos, p) in &preds {
            let label: CellLabel = by_pos
                .get(&pos)
                .copied()
                .map(Into::into)
                .unwrap_or(CellLabel::Ignore);
            cells.push((p, label));
            match label {
                CellLabel::Tumor => {
                    scores.push(p);
                    score_labels.push(true);
                }
                CellLabel::Normal => {
                    scores.push(p);
                    score_labels.push(false);
                }
                CellLabel::Ignore => {}
            }
            if p >= crate::eval::TUMOR_THRESHOLD {
                pred_tumor_cells.push(pos);
            }
        }
        for p in &sp.patches {
            if p.label == PatchLabel::Tumor {
                truth_tumor_cells.push(p.grid_pos);
            }
        }
        pred_classes.push(slide_class(&pred_tumor_cells, &cal)?);
        truth_classes.push(slide_class(&truth_tumor_cells, &cal)?);
    }

    let accuracy = patch_accuracy(cells.iter().copied())?;
    let auc = pr_auc(&scores, &score_labels)?;

    let mut csv = String::from("metric,value\n");
    writeln!(csv, "patch_accuracy,{accuracy}").unwrap();
    writeln!(csv, "pr_auc,{auc}").unwrap();
    writeln!(csv, "labeled_cells,{}", scores.len()).unwrap();
    writeln!(csv, "slides,{evaluated}").unwrap();

    let mut summary = String::new();
    writeln!(summary, "split: {}", cfg.eval.split).unwrap();
    writeln!(summary, "slides evaluated: {evaluated}").unwrap();
    writeln!(summary, "labeled cells: {}", scores.len()).unwrap();
    writeln!(summary, "patch accuracy: {accuracy:.4}").unwrap();
    writeln!(summary, "pr-auc: {auc:.4}").unwrap();

    if cfg.eval.patient_level {
        if evaluated > 0 && evaluated.is_multiple_of(5) {
            let mut pred_stages: Vec<PnStage> = Vec::new();
            let mut truth_stages: Vec<PnStage> = Vec::new();
            for chunk in pred_classes.chunks(5).zip(truth_classes.chunks(5)) {
                pred_stages.push(pn_stage(chunk.0)?);
                truth_stages.push(pn_stage(chunk.1)?);
            }
            let k = kappa(&pred_stages, &truth_stages)?;
            writeln!(csv, "kappa,{k}").unwrap();
            writeln!(csv, "patients,{}", pred_stages.len()).unwrap();
            writeln!(summary, "patients: {}", pred_stages.len()).unwrap();
            writeln!(summary, "patient-level kappa: {k:.4}").unwrap();
        } else {
            writeln!(
                summary,
                "patient-level kappa: skipped ({evaluated} slides is not a multiple of 5)"
            )
            .unwrap();
        }
    }

    formats::write_text(&out.join("metrics").join("metrics.csv"), &csv)?;
    formats::write_text(&out.join("metrics").join("summary.txt"), &summary)?;
    sm.output("metrics/metrics.csv");
    sm.output("metrics/summary.txt");
    sm.write(out)
}

fn run_render_heatmap(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let manifest = dataset_manifest(out)?;
    let ids = split_ids(&manifest, &cfg.eval.split);
    let mut sm = StageManifest::new(Stage::RenderHeatmap, cfg);
    sm.input(out, "dataset.manifest")?;
    let scale = 8usize;
    for id in &ids {
        let sp = load_patch_store(out, id, cfg.synth.patch_size)?;
        if sp.patches.is_empty() {
            continue;
        }
        let preds = read_prediction(out, id)?;
        let positions: Vec<(u32, u32)> = sp.patches.iter().map(|p| p.grid_pos).collect();
        let labels: Vec<((u32, u32), PatchLabel)> =
            sp.patches.iter().map(|p| (p.grid_pos, p.label)).collect();
        let components = if cfg.per_lump {
            tissue_components(&positions)
        } else {
            vec![positions.clone()]
        };
        for (k, comp) in components.iter().enumerate() {
            let placement = make_placement(comp, cfg.arch.map_size, cfg.overflow)?;
            let comp_labels: Vec<((u32, u32), PatchLabel)> = labels
                .iter()
                .filter(|(pos, _)| comp.contains(pos))
                .copied()
                .collect();
            let lm = assemble_label_map(&comp_labels, &placement)?;
            let (w, h, rgb) = render_heatmap(&placement, &preds, &lm, scale, true);
            let name = format!("heatmaps/{id}_lump{k}.ppm");
            std::fs::create_dir_all(out.join("heatmaps"))?;
            formats::write_ppm(&out.join(&name), w, h, &rgb)?;
            sm.output(name);
        }
    }
    sm.write(out)
}
