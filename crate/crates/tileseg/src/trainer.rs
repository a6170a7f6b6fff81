//! Both optimization regimes over the two-model composite.
//!
//! Separate learning trains the extractor on labeled patches, freezes it,
//! caches per-slide feature rows, and trains the segmentation net on the
//! assembled maps. End-to-end learning walks slides one at a time: the
//! extractor runs forward in `r` micro-batches keeping only the boundary
//! features `x`, the segmentation pass produces the boundary gradient
//! `dL/dx`, and each micro-batch is recomputed under the surrogate loss
//! `L' = dL/dx . x`, whose gradient equals the monolithic `dL/dw` up to
//! floating-point associativity.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::autodiff::{
    accumulate_grad, adam_update, softmax_rows, AdamState, AutodiffError, Reduction, Tape,
};
use crate::featuremap::{
    assemble_feature_map, assemble_label_map, tissue_components, FeatureMap, FeatureMapError,
    LabelMap, MapLayout,
};
use crate::formats::FormatError;
use crate::models::{
    extractor_forward, segmentation_forward, ArchConfig, ExtractorMode, ExtractorParams,
    ModelError, SegParams,
};
use crate::preprocess::{augment, patch_aug_seed, AugConfig, Patch, PatchLabel, PreprocessError};
use crate::synth::mix2;
use crate::tensor::{load_tensor, save_tensor, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training set must contain both classes")]
    SingleClass,
    #[error("no labeled cells in the whole dataset")]
    AllIgnore,
    #[error("micro-batch count {r} exceeds patch count {n}")]
    MicroBatchCount { r: usize, n: usize },
    #[error("retained gradient shape {got:?} does not match features {want:?}")]
    BoundaryShape { got: Vec<usize>, want: Vec<usize> },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    FeatureMap(#[from] FeatureMapError),
    #[error(transparent)]
    Preprocess(#[from] PreprocessError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Hyperparameters for all three training stages. Stage defaults follow the
/// reference setup: 1e-4 learning rates for separate learning, 1e-9/1e-7
/// for end-to-end, batch sizes 128/32, epochs 30/50/10.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_extractor: f64,
    pub lr_segmentation: f64,
    pub e2e_lr_extractor: f64,
    pub e2e_lr_segmentation: f64,
    pub epochs_extractor: usize,
    pub epochs_segmentation: usize,
    pub epochs_e2e: usize,
    pub batch_size: usize,
    pub seg_batch_size: usize,
    /// r: how many micro-batches one slide's patches are split into.
    pub micro_batch_count: usize,
    pub seed: u64,
    pub reduction: Reduction,
    /// Sample equal tumor/normal counts per epoch.
    pub class_balance: bool,
    /// Permit end-to-end training from random weights instead of the
    /// separate-learning warm start.
    pub allow_cold_start: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_extractor: 1e-4,
            lr_segmentation: 1e-4,
            e2e_lr_extractor: 1e-9,
            e2e_lr_segmentation: 1e-7,
            epochs_extractor: 30,
            epochs_segmentation: 50,
            epochs_e2e: 10,
            batch_size: 128,
            seg_batch_size: 32,
            micro_batch_count: 4,
            seed: 0,
            reduction: Reduction::Mean,
            class_balance: false,
            allow_cold_start: false,
        }
    }
}

impl TrainConfig {
    pub fn write_kv(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        out.push((format!("{prefix}lr_extractor"), self.lr_extractor.to_string()));
        out.push((format!("{prefix}lr_segmentation"), self.lr_segmentation.to_string()));
        out.push((format!("{prefix}e2e_lr_extractor"), self.e2e_lr_extractor.to_string()));
        out.push((
            format!("{prefix}e2e_lr_segmentation"),
            self.e2e_lr_segmentation.to_string(),
        ));
        out.push((format!("{prefix}epochs_extractor"), self.epochs_extractor.to_string()));
        out.push((
            format!("{prefix}epochs_segmentation"),
            self.epochs_segmentation.to_string(),
        ));
        out.push((format!("{prefix}epochs_e2e"), self.epochs_e2e.to_string()));
        out.push((format!("{prefix}batch_size"), self.batch_size.to_string()));
        out.push((format!("{prefix}seg_batch_size"), self.seg_batch_size.to_string()));
        out.push((
            format!("{prefix}micro_batch_count"),
            self.micro_batch_count.to_string(),
        ));
        out.push((format!("{prefix}seed"), self.seed.to_string()));
        let red = match self.reduction {
            Reduction::Mean => "mean",
            Reduction::Sum => "sum",
        };
        out.push((format!("{prefix}reduction"), red.to_string()));
        out.push((format!("{prefix}class_balance"), self.class_balance.to_string()));
        out.push((format!("{prefix}allow_cold_start"), self.allow_cold_start.to_string()));
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |k: &str| format!("bad value for {k}");
        match key {
            "lr_extractor" => self.lr_extractor = value.parse().map_err(|_| bad(key))?,
            "lr_segmentation" => self.lr_segmentation = value.parse().map_err(|_| bad(key))?,
            "e2e_lr_extractor" => self.e2e_lr_extractor = value.parse().map_err(|_| bad(key))?,
            "e2e_lr_segmentation" => {
                self.e2e_lr_segmentation = value.parse().map_err(|_| bad(key))?
            }
            "epochs_extractor" => self.epochs_extractor = value.parse().map_err(|_| bad(key))?,
            "epochs_segmentation" => {
                self.epochs_segmentation = value.parse().map_err(|_| bad(key))?
            }
            "epochs_e2e" => self.epochs_e2e = value.parse().map_err(|_| bad(key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(key))?,
            "seg_batch_size" => self.seg_batch_size = value.parse().map_err(|_| bad(key))?,
            "micro_batch_count" => {
                self.micro_batch_count = value.parse().map_err(|_| bad(key))?
            }
            "seed" => self.seed = value.parse().map_err(|_| bad(key))?,
            "reduction" => {
                self.reduction = match value {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(bad(key)),
                }
            }
            "class_balance" => self.class_balance = value.parse().map_err(|_| bad(key))?,
            "allow_cold_start" => self.allow_cold_start = value.parse().map_err(|_| bad(key))?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }
}

/// One slide's kept patches, in row-major grid order.
#[derive(Debug, Clone)]
pub struct SlidePatches {
    pub slide_id: String,
    pub patch_size: usize,
    pub patches: Vec<Patch>,
}

/// Crops of one slide's patches prepared for a forward pass.
#[derive(Debug, Clone)]
pub struct SlideBatch {
    pub slide_id: String,
    /// `[N, 3, crop, crop]` in grid order, values in [0, 1].
    pub crops: Tensor,
    pub order: Vec<(u32, u32)>,
    pub labels: Vec<PatchLabel>,
}

/// The retained boundary of one slide: feature rows for all N patches and,
/// after a segmentation backward pass, the boundary gradient.
#[derive(Debug, Clone)]
pub struct RetainedBoundary {
    pub slide_id: String,
    /// `[N, feature_dim]`, rows in grid order.
    pub features: Tensor,
    pub order: Vec<(u32, u32)>,
    pub labels: Vec<PatchLabel>,
    /// `dL/dx`, same shape as `features`; present only after the
    /// segmentation backward pass of an end-to-end step.
    pub dl_dx: Option<Tensor>,
}

/// Live-element accounting for one end-to-end step.
#[derive(Debug, Clone)]
pub struct MemoryReport {
    pub n_patches: usize,
    pub micro_batch_count: usize,
    /// Boundary elements retained across the whole step (N * feature_dim).
    pub retained_elements: usize,
    /// Retained + the largest micro-batch tape during step 1.
    pub extractor_phase_peak: usize,
    pub seg_phase_peak: usize,
    pub recompute_phase_peak: usize,
    /// Measured per-patch activation footprint.
    pub per_patch_elements: usize,
}

impl MemoryReport {
    pub fn to_manifest_line(&self) -> String {
        format!(
            "memory: n={} r={} retained={} extractor_peak={} seg_peak={} recompute_peak={} per_patch={}",
            self.n_patches,
            self.micro_batch_count,
            self.retained_elements,
            self.extractor_phase_peak,
            self.seg_phase_peak,
            self.recompute_phase_peak,
            self.per_patch_elements
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct TraceRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub peak_live_elements: usize,
}

#[derive(Debug, Clone, Default)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub fn push(&mut self, epoch: usize, step: usize, loss: f64, peak: usize) {
        self.rows.push(TraceRow {
            epoch,
            step,
            loss,
            peak_live_elements: peak,
        });
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,step,loss,peak_live_elements\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch, r.step, r.loss, r.peak_live_elements
            ));
        }
        out
    }

    pub fn last_loss(&self) -> Option<f64> {
        self.rows.last().map(|r| r.loss)
    }
}

fn fisher_yates<T>(items: &mut [T], rng: &mut ChaCha20Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.random_range(0..=i);
        items.swap(i, j);
    }
}

/// Assemble the `[N,3,crop,crop]` batch for one slide. `epoch` seeds the
/// per-patch augmentation stream; pass 0 with a disabled config for the
/// deterministic center-crop used at inference time.
pub fn make_slide_batch(
    slide: &SlidePatches,
    aug: &AugConfig,
    seed: u64,
    epoch: u64,
) -> Result<SlideBatch, TrainError> {
    let crop = aug.crop_size;
    let mut data = Vec::with_capacity(slide.patches.len() * 3 * crop * crop);
    let mut order = Vec::with_capacity(slide.patches.len());
    let mut labels = Vec::with_capacity(slide.patches.len());
    for p in &slide.patches {
        let s = patch_aug_seed(seed, &slide.slide_id, p.grid_pos, epoch);
        let block = augment(&p.pixels, slide.patch_size, s, aug)?;
        // interleaved RGB -> planar [3, crop, crop]
        for ch in 0..3 {
            for px in 0..crop * crop {
                data.push(block[3 * px + ch] as f64 / 255.0);
            }
        }
        order.push(p.grid_pos);
        labels.push(p.label);
    }
    Ok(SlideBatch {
        slide_id: slide.slide_id.clone(),
        crops: Tensor::new(vec![slide.patches.len(), 3, crop, crop], data)?,
        order,
        labels,
    })
}

struct NamedAdam {
    states: Vec<(String, AdamState)>,
}

impl NamedAdam {
    fn for_tensors(tensors: &[(String, &Tensor)]) -> Self {
        NamedAdam {
            states: tensors
                .iter()
                .map(|(n, t)| (n.clone(), AdamState::new(t.numel())))
                .collect(),
        }
    }

    fn state_mut(&mut self, name: &str) -> &mut AdamState {
        &mut self
            .states
            .iter_mut()
            .find(|(n, _)| n == name)
            .unwrap_or_else(|| panic!("no adam state for {name}"))
            .1
    }
}

/// Stage one of separate learning: patch-level training of the extractor
/// with softmax cross entropy over its two logits.
pub fn train_feature_extractor(
    params: &mut ExtractorParams,
    arch: &ArchConfig,
    slides: &[SlidePatches],
    aug: &AugConfig,
    cfg: &TrainConfig,
) -> Result<LossTrace, TrainError> {
    // indices of labeled patches only
    let mut tumor: Vec<(usize, usize)> = Vec::new();
    let mut normal: Vec<(usize, usize)> = Vec::new();
    for (si, s) in slides.iter().enumerate() {
        for (pi, p) in s.patches.iter().enumerate() {
            match p.label {
                PatchLabel::Tumor => tumor.push((si, pi)),
                PatchLabel::Normal => normal.push((si, pi)),
                PatchLabel::NoLabel => {}
            }
        }
    }
    if tumor.is_empty() || normal.is_empty() {
        return Err(TrainError::SingleClass);
    }

    let mut adam = NamedAdam::for_tensors(&params.named_tensors());
    let mut trace = LossTrace::default();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs_extractor {
        let mut rng = ChaCha20Rng::seed_from_u64(mix2(cfg.seed, 0xE0 + epoch as u64));
        let mut pool: Vec<(usize, usize)> = if cfg.class_balance {
            let take = tumor.len().min(normal.len());
            let mut t = tumor.clone();
            let mut n = normal.clone();
            fisher_yates(&mut t, &mut rng);
            fisher_yates(&mut n, &mut rng);
            t.truncate(take);
            n.truncate(take);
            t.extend(n);
            t
        } else {
            let mut all = tumor.clone();
            all.extend(normal.iter().copied());
            all
        };
        fisher_yates(&mut pool, &mut rng);

        for (step, chunk) in pool.chunks(cfg.batch_size).enumerate() {
            let crop = aug.crop_size;
            let mut data = Vec::with_capacity(chunk.len() * 3 * crop * crop);
            let mut labels = Vec::with_capacity(chunk.len());
            for &(si, pi) in chunk {
                let s = &slides[si];
                let p = &s.patches[pi];
                let aug_seed = patch_aug_seed(cfg.seed, &s.slide_id, p.grid_pos, epoch as u64);
                let block = augment(&p.pixels, s.patch_size, aug_seed, aug)?;
                for ch in 0..3 {
                    for px in 0..crop * crop {
                        data.push(block[3 * px + ch] as f64 / 255.0);
                    }
                }
                labels.push(usize::from(p.label == PatchLabel::Tumor));
            }
            let batch = Tensor::new(vec![chunk.len(), 3, crop, crop], data)?;

            tape.clear();
            let x = tape.input(&batch);
            let (logits, vars) = extractor_forward(&mut tape, params, arch, x, ExtractorMode::Logits)?;
            let mask = vec![true; chunk.len()];
            let loss = tape.masked_softmax_cross_entropy(logits, &labels, &mask, cfg.reduction)?;
            let loss_value = tape.value(loss)[0];
            tape.backward(loss)?;

            let ordered = vars.ordered();
            for (name, slot) in params.tensors_mut() {
                let var = ordered.iter().find(|(n, _)| *n == name).map(|(_, v)| *v);
                if let Some(var) = var {
                    let grad = tape.grad_tensor(var);
                    adam_update(slot, grad.as_ref(), adam.state_mut(&name), cfg.lr_extractor)?;
                }
            }
            trace.push(epoch, step, loss_value, tape.peak_live_elements());
        }
    }
    Ok(trace)
}

/// Forward the extractor in fixed chunks, returning the `[N, D]` feature
/// rows and the per-chunk tape peaks.
fn features_in_chunks(
    params: &ExtractorParams,
    arch: &ArchConfig,
    batch: &SlideBatch,
    chunk_size: usize,
) -> Result<(Tensor, Vec<usize>), TrainError> {
    let n = batch.order.len();
    let d = arch.feature_dim;
    let crop = arch.crop_size;
    let plane = 3 * crop * crop;
    let mut rows = Vec::with_capacity(n * d);
    let mut peaks = Vec::new();
    let mut tape = Tape::new();
    let mut start = 0;
    while start < n {
        let len = chunk_size.min(n - start);
        let sub = Tensor::new(
            vec![len, 3, crop, crop],
            batch.crops.data()[start * plane..(start + len) * plane].to_vec(),
        )?;
        tape.clear();
        let x = tape.input(&sub);
        let (feats, _) = extractor_forward(&mut tape, params, arch, x, ExtractorMode::Features)?;
        rows.extend_from_slice(tape.value(feats));
        peaks.push(tape.peak_live_elements());
        start += len;
    }
    Ok((Tensor::new(vec![n, d], rows)?, peaks))
}

/// Stage two setup: run the frozen extractor over all patches of a slide
/// (deterministic center crops) and retain only the boundary features.
/// Values are quantized through `f32` so a cached copy reloads bit-equal.
pub fn extract_all_features(
    params: &ExtractorParams,
    arch: &ArchConfig,
    slide: &SlidePatches,
) -> Result<RetainedBoundary, TrainError> {
    let aug = AugConfig::disabled(arch.crop_size);
    let batch = make_slide_batch(slide, &aug, 0, 0)?;
    let (mut features, _) = features_in_chunks(params, arch, &batch, 32)?;
    features.quantize_f32();
    Ok(RetainedBoundary {
        slide_id: slide.slide_id.clone(),
        features,
        order: batch.order,
        labels: batch.labels,
        dl_dx: None,
    })
}

/// Persist a boundary: `<id>.tns` with the `[N,D]` rows plus a text sidecar
/// of `row col label` lines in row order.
pub fn save_boundary(dir: &Path, rb: &RetainedBoundary) -> Result<(), TrainError> {
    std::fs::create_dir_all(dir)?;
    save_tensor(&dir.join(format!("{}.tns", rb.slide_id)), &rb.features)?;
    let mut sidecar = String::new();
    for (pos, label) in rb.order.iter().zip(&rb.labels) {
        sidecar.push_str(&format!("{} {} {}\n", pos.0, pos.1, label.as_str()));
    }
    crate::formats::write_text(&dir.join(format!("{}.txt", rb.slide_id)), &sidecar)?;
    Ok(())
}

pub fn load_boundary(dir: &Path, slide_id: &str) -> Result<RetainedBoundary, TrainError> {
    let features = load_tensor(&dir.join(format!("{slide_id}.tns")))?;
    let text = crate::formats::read_text(&dir.join(format!("{slide_id}.txt")))?;
    let mut order = Vec::new();
    let mut labels = Vec::new();
    for line in text.lines() {
        let mut parts = line.split_whitespace();
        let r: u32 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| {
            TrainError::Format(FormatError::Malformed {
                kind: "sidecar",
                path: slide_id.to_string(),
                reason: format!("bad line {line:?}"),
            })
        })?;
        let c: u32 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(|| {
            TrainError::Format(FormatError::Malformed {
                kind: "sidecar",
                path: slide_id.to_string(),
                reason: format!("bad line {line:?}"),
            })
        })?;
        let label = parts
            .next()
            .and_then(PatchLabel::parse)
            .ok_or_else(|| {
                TrainError::Format(FormatError::Malformed {
                    kind: "sidecar",
                    path: slide_id.to_string(),
                    reason: format!("bad label in {line:?}"),
                })
            })?;
        order.push((r, c));
        labels.push(label);
    }
    Ok(RetainedBoundary {
        slide_id: slide_id.to_string(),
        features,
        order,
        labels,
        dl_dx: None,
    })
}

/// Assemble the feature/label map pairs for one slide: one map per tissue
/// lump, or a single whole-slide map.
pub fn slide_maps(
    rb: &RetainedBoundary,
    arch: &ArchConfig,
    layout: MapLayout,
) -> Result<Vec<(FeatureMap, LabelMap)>, TrainError> {
    let d = arch.feature_dim;
    let components: Vec<Vec<(u32, u32)>> = if layout.per_lump {
        tissue_components(&rb.order)
    } else {
        let mut all = rb.order.clone();
        all.sort_unstable();
        vec![all]
    };
    let by_pos: std::collections::BTreeMap<(u32, u32), usize> = rb
        .order
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let mut maps = Vec::new();
    for comp in components {
        let feats: Vec<((u32, u32), Vec<f64>)> = comp
            .iter()
            .map(|&pos| {
                let i = by_pos[&pos];
                (pos, rb.features.data()[i * d..(i + 1) * d].to_vec())
            })
            .collect();
        let labels: Vec<((u32, u32), PatchLabel)> = comp
            .iter()
            .map(|&pos| (pos, rb.labels[by_pos[&pos]]))
            .collect();
        let fm = assemble_feature_map(&feats, arch.map_size, layout.overflow)?;
        let lm = assemble_label_map(&labels, &fm.placement)?;
        maps.push((fm, lm));
    }
    Ok(maps)
}

/// Stage two of separate learning: train the segmentation net on cached
/// feature maps under the masked cross entropy.
pub fn train_segmentation(
    params: &mut SegParams,
    arch: &ArchConfig,
    data: &[(FeatureMap, LabelMap)],
    cfg: &TrainConfig,
) -> Result<LossTrace, TrainError> {
    let usable: Vec<&(FeatureMap, LabelMap)> =
        data.iter().filter(|(_, lm)| lm.labeled_count() > 0).collect();
    if usable.is_empty() {
        return Err(TrainError::AllIgnore);
    }
    let mut adam = NamedAdam::for_tensors(&params.named_tensors());
    let mut trace = LossTrace::default();
    let mut tape = Tape::new();
    for epoch in 0..cfg.epochs_segmentation {
        let mut rng = ChaCha20Rng::seed_from_u64(mix2(cfg.seed, 0x5E0 + epoch as u64));
        let mut order: Vec<usize> = (0..usable.len()).collect();
        fisher_yates(&mut order, &mut rng);
        for (step, chunk) in order.chunks(cfg.seg_batch_size).enumerate() {
            let scale = 1.0 / chunk.len() as f64;
            let mut grads: Vec<(String, Tensor)> = params
                .named_tensors()
                .iter()
                .map(|(n, t)| (n.clone(), Tensor::zeros(t.shape().to_vec())))
                .collect();
            let mut batch_loss = 0.0;
            let mut peak = 0usize;
            for &mi in chunk {
                let (fm, lm) = usable[mi];
                tape.clear();
                let fmap = tape.input(&fm.data);
                let (logits, vars) = segmentation_forward(&mut tape, params, arch, fmap)?;
                let rows = tape.rows_from_chw(logits);
                let (labels, mask) = lm.to_loss_inputs();
                let loss = tape.masked_softmax_cross_entropy(rows, &labels, &mask, cfg.reduction)?;
                batch_loss += tape.value(loss)[0] * scale;
                tape.backward(loss)?;
                for (name, var) in vars.ordered() {
                    if let Some(g) = tape.grad_tensor(var) {
                        let slot = &mut grads.iter_mut().find(|(n, _)| *n == name).unwrap().1;
                        let mut g = g;
                        for v in g.data_mut() {
                            *v *= scale;
                        }
                        accumulate_grad(slot, &g);
                    }
                }
                peak = peak.max(tape.peak_live_elements());
            }
            for (name, slot) in params.tensors_mut() {
                let g = &grads.iter().find(|(n, _)| *n == name).unwrap().1;
                adam_update(slot, Some(g), adam.state_mut(&name), cfg.lr_segmentation)?;
            }
            trace.push(epoch, step, batch_loss, peak);
        }
    }
    Ok(trace)
}

/// Outcome of the segmentation phase of one end-to-end step.
struct SegPhase {
    dl_dx: Tensor,
    seg_grads: Vec<(String, Tensor)>,
    loss: f64,
    peak: usize,
}

/// Steps 2-3: assemble maps from the retained features, run the
/// segmentation forward and backward, and scatter `dL/dx` back to rows.
/// The slide loss is the mean of the per-lump masked cross entropies.
fn segmentation_phase(
    seg: &SegParams,
    arch: &ArchConfig,
    rb: &RetainedBoundary,
    cfg: &TrainConfig,
    layout: MapLayout,
    want_grads: bool,
) -> Result<SegPhase, TrainError> {
    let n = rb.order.len();
    let d = arch.feature_dim;
    let by_pos: std::collections::BTreeMap<(u32, u32), usize> = rb
        .order
        .iter()
        .enumerate()
        .map(|(i, &p)| (p, i))
        .collect();
    let maps = slide_maps(rb, arch, layout)?;
    let labeled: Vec<&(FeatureMap, LabelMap)> =
        maps.iter().filter(|(_, lm)| lm.labeled_count() > 0).collect();
    if labeled.is_empty() {
        return Err(TrainError::AllIgnore);
    }
    let scale = 1.0 / labeled.len() as f64;

    let mut dl_dx = Tensor::zeros(vec![n, d]);
    let mut seg_grads: Vec<(String, Tensor)> = seg
        .named_tensors()
        .iter()
        .map(|(nm, t)| (nm.clone(), Tensor::zeros(t.shape().to_vec())))
        .collect();
    let mut loss_total = 0.0;
    let mut peak = 0usize;
    let mut tape = Tape::new();
    for (fm, lm) in labeled {
        tape.clear();
        // row i of this map's input corresponds to placement order
        let occupied: Vec<((u32, u32), (usize, usize))> = fm.placement.occupied().collect();
        let rows_data: Vec<f64> = occupied
            .iter()
            .flat_map(|&(pos, _)| {
                let i = by_pos[&pos];
                rb.features.data()[i * d..(i + 1) * d].iter().copied()
            })
            .collect();
        let rows_t = Tensor::new(vec![occupied.len(), d], rows_data)?;
        let x = tape.param(&rows_t);
        let cells: Vec<(usize, usize)> = occupied.iter().map(|&(_, c)| c).collect();
        let fmap = tape.scatter_to_map(x, &cells, fm.placement.map_h, fm.placement.map_w);
        let (logits, vars) = segmentation_forward(&mut tape, seg, arch, fmap)?;
        let logit_rows = tape.rows_from_chw(logits);
        let (labels, mask) = lm.to_loss_inputs();
        let loss = tape.masked_softmax_cross_entropy(logit_rows, &labels, &mask, cfg.reduction)?;
        loss_total += tape.value(loss)[0] * scale;
        tape.backward(loss)?;

        let gx = tape
            .grad_tensor(x)
            .expect("boundary rows receive a gradient");
        for (row, &(pos, _)) in occupied.iter().enumerate() {
            let i = by_pos[&pos];
            for j in 0..d {
                dl_dx.data_mut()[i * d + j] += gx.data()[row * d + j] * scale;
            }
        }
        if want_grads {
            for (name, var) in vars.ordered() {
                if let Some(mut g) = tape.grad_tensor(var) {
                    for v in g.data_mut() {
                        *v *= scale;
                    }
                    let slot = &mut seg_grads.iter_mut().find(|(nm, _)| *nm == name).unwrap().1;
                    accumulate_grad(slot, &g);
                }
            }
        }
        peak = peak.max(tape.peak_live_elements());
    }
    Ok(SegPhase {
        dl_dx,
        seg_grads,
        loss: loss_total,
        peak,
    })
}

/// Accumulated extractor gradients from the recompute phase (step 4),
/// ordered like `ExtractorParams::named_tensors` minus the removed head.
pub struct ExtractorGrads {
    pub grads: Vec<(String, Tensor)>,
    pub peak: usize,
}

/// Step 4: re-run the extractor forward per micro-batch and backpropagate
/// the surrogate loss `L' = dL/dx . x`, accumulating parameter gradients
/// sequentially in micro-batch order.
fn recompute_phase(
    ext: &ExtractorParams,
    arch: &ArchConfig,
    batch: &SlideBatch,
    dl_dx: &Tensor,
    chunk_size: usize,
) -> Result<ExtractorGrads, TrainError> {
    let n = batch.order.len();
    let d = arch.feature_dim;
    if dl_dx.shape() != [n, d] {
        return Err(TrainError::BoundaryShape {
            got: dl_dx.shape().to_vec(),
            want: vec![n, d],
        });
    }
    let crop = arch.crop_size;
    let plane = 3 * crop * crop;
    let mut grads: Vec<(String, Tensor)> = Vec::new();
    let mut peak = 0usize;
    let mut tape = Tape::new();
    let mut start = 0;
    while start < n {
        let len = chunk_size.min(n - start);
        let sub = Tensor::new(
            vec![len, 3, crop, crop],
            batch.crops.data()[start * plane..(start + len) * plane].to_vec(),
        )?;
        let coeffs = Tensor::new(
            vec![len, d],
            dl_dx.data()[start * d..(start + len) * d].to_vec(),
        )?;
        tape.clear();
        let x = tape.input(&sub);
        let (feats, vars) = extractor_forward(&mut tape, ext, arch, x, ExtractorMode::Features)?;
        let surrogate = tape.dot_const(feats, &coeffs);
        tape.backward(surrogate)?;
        // linearity of the surrogate: the boundary gradient is recovered
        // exactly
        debug_assert!(tape
            .grad(feats)
            .map(|g| g
                .iter()
                .zip(coeffs.data())
                .all(|(a, b)| a.to_bits() == b.to_bits()))
            .unwrap_or(false));

        for (name, var) in vars.ordered() {
            let g = tape
                .grad_tensor(var)
                .unwrap_or_else(|| Tensor::zeros(tape.shape(var).to_vec()));
            match grads.iter_mut().find(|(nm, _)| *nm == name) {
                Some((_, slot)) => accumulate_grad(slot, &g),
                None => grads.push((name, g)),
            }
        }
        peak = peak.max(tape.peak_live_elements());
        start += len;
    }
    Ok(ExtractorGrads { grads, peak })
}

/// Optimizer state for one end-to-end run. Fresh moments at warm start.
pub struct E2eOptimizer {
    ext_adam: NamedAdam,
    seg_adam: NamedAdam,
}

impl E2eOptimizer {
    pub fn new(ext: &ExtractorParams, seg: &SegParams) -> Self {
        E2eOptimizer {
            ext_adam: NamedAdam::for_tensors(&ext.named_tensors()),
            seg_adam: NamedAdam::for_tensors(&seg.named_tensors()),
        }
    }
}

/// Everything an end-to-end step computes before touching the optimizer:
/// accumulated extractor gradients, segmentation gradients, the retained
/// boundary gradient, the slide loss, and the memory report.
pub struct StagedPass {
    pub ext_grads: Vec<(String, Tensor)>,
    pub seg_grads: Vec<(String, Tensor)>,
    pub dl_dx: Tensor,
    pub loss: f64,
    pub report: MemoryReport,
}

/// Steps 1-4 of an end-to-end step, gradients only.
pub fn e2e_forward_backward(
    ext: &ExtractorParams,
    seg: &SegParams,
    arch: &ArchConfig,
    batch: &SlideBatch,
    cfg: &TrainConfig,
    layout: MapLayout,
) -> Result<StagedPass, TrainError> {
    let n = batch.order.len();
    let r = cfg.micro_batch_count;
    if r == 0 || r > n {
        return Err(TrainError::MicroBatchCount { r, n });
    }
    let chunk_size = n.div_ceil(r);
    let d = arch.feature_dim;

    // step 1: forward in micro-batches, retain only the boundary features
    let (features, step1_peaks) = features_in_chunks(ext, arch, batch, chunk_size)?;
    let retained = n * d;
    let rb = RetainedBoundary {
        slide_id: batch.slide_id.clone(),
        features,
        order: batch.order.clone(),
        labels: batch.labels.clone(),
        dl_dx: None,
    };

    // steps 2-3: maps, segmentation forward/backward, boundary gradient
    let seg_phase = segmentation_phase(seg, arch, &rb, cfg, layout, true)?;

    // step 4: micro-batched recomputation under the surrogate loss
    let ext_grads = recompute_phase(ext, arch, batch, &seg_phase.dl_dx, chunk_size)?;

    let max_step1 = step1_peaks.iter().copied().max().unwrap_or(0);
    let report = MemoryReport {
        n_patches: n,
        micro_batch_count: r,
        retained_elements: retained,
        extractor_phase_peak: retained + max_step1,
        seg_phase_peak: retained + seg_phase.peak,
        recompute_phase_peak: retained + ext_grads.peak,
        per_patch_elements: max_step1 / chunk_size.min(n),
    };
    Ok(StagedPass {
        ext_grads: ext_grads.grads,
        seg_grads: seg_phase.seg_grads,
        dl_dx: seg_phase.dl_dx,
        loss: seg_phase.loss,
        report,
    })
}

/// One end-to-end optimization step over a single slide (steps 1-5).
pub fn e2e_step(
    ext: &mut ExtractorParams,
    seg: &mut SegParams,
    arch: &ArchConfig,
    batch: &SlideBatch,
    cfg: &TrainConfig,
    opt: &mut E2eOptimizer,
    layout: MapLayout,
) -> Result<(MemoryReport, f64), TrainError> {
    let pass = e2e_forward_backward(ext, seg, arch, batch, cfg, layout)?;

    // step 5: updates with the per-model learning rates
    for (name, slot) in ext.tensors_mut() {
        if let Some((_, g)) = pass.ext_grads.iter().find(|(nm, _)| *nm == name) {
            adam_update(slot, Some(g), opt.ext_adam.state_mut(&name), cfg.e2e_lr_extractor)?;
        }
    }
    for (name, slot) in seg.tensors_mut() {
        let g = &pass.seg_grads.iter().find(|(nm, _)| *nm == name).unwrap().1;
        adam_update(slot, Some(g), opt.seg_adam.state_mut(&name), cfg.e2e_lr_segmentation)?;
    }
    Ok((pass.report, pass.loss))
}

/// Mean per-slide masked loss under deterministic center crops, used to
/// compare the warm start against the end-to-end result.
pub fn evaluate_masked_loss(
    ext: &ExtractorParams,
    seg: &SegParams,
    arch: &ArchConfig,
    slides: &[SlidePatches],
    cfg: &TrainConfig,
    layout: MapLayout,
) -> Result<f64, TrainError> {
    let aug = AugConfig::disabled(arch.crop_size);
    let mut total = 0.0;
    let mut count = 0usize;
    for slide in slides {
        let batch = make_slide_batch(slide, &aug, 0, 0)?;
        let (features, _) = features_in_chunks(ext, arch, &batch, 32)?;
        let rb = RetainedBoundary {
            slide_id: slide.slide_id.clone(),
            features,
            order: batch.order,
            labels: batch.labels,
            dl_dx: None,
        };
        match segmentation_phase(seg, arch, &rb, cfg, layout, false) {
            Ok(phase) => {
                total += phase.loss;
                count += 1;
            }
            Err(TrainError::AllIgnore) => {}
            Err(e) => return Err(e),
        }
    }
    if count == 0 {
        return Err(TrainError::AllIgnore);
    }
    Ok(total / count as f64)
}

#[derive(Debug, Clone)]
pub struct E2eOutcome {
    pub trace: LossTrace,
    pub reports: Vec<MemoryReport>,
    pub warm_start_loss: f64,
    pub final_loss: f64,
}

/// End-to-end training: one optimization step per slide, repeated for
/// `epochs_e2e` epochs in seeded shuffled slide order.
pub fn e2e_train(
    ext: &mut ExtractorParams,
    seg: &mut SegParams,
    arch: &ArchConfig,
    slides: &[SlidePatches],
    aug: &AugConfig,
    cfg: &TrainConfig,
    layout: MapLayout,
) -> Result<E2eOutcome, TrainError> {
    // slides with no labeled cell cannot contribute a loss
    let mut usable: Vec<&SlidePatches> = Vec::new();
    for s in slides {
        if s.patches.iter().any(|p| p.label != PatchLabel::NoLabel) {
            usable.push(s);
        }
    }
    if usable.is_empty() {
        return Err(TrainError::AllIgnore);
    }
    let usable_owned: Vec<SlidePatches> = usable.iter().map(|s| (*s).clone()).collect();
    let warm_start_loss = evaluate_masked_loss(ext, seg, arch, &usable_owned, cfg, layout)?;

    let mut opt = E2eOptimizer::new(ext, seg);
    let mut trace = LossTrace::default();
    let mut reports = Vec::new();
    for epoch in 0..cfg.epochs_e2e {
        let mut rng = ChaCha20Rng::seed_from_u64(mix2(cfg.seed, 0xEE0 + epoch as u64));
        let mut order: Vec<usize> = (0..usable.len()).collect();
        fisher_yates(&mut order, &mut rng);
        for (step, &si) in order.iter().enumerate() {
            let batch = make_slide_batch(usable[si], aug, cfg.seed, epoch as u64)?;
            let (report, loss) = e2e_step(ext, seg, arch, &batch, cfg, &mut opt, layout)?;
            trace.push(epoch, step, loss, report.extractor_phase_peak);
            reports.push(report);
        }
    }
    let final_loss = evaluate_masked_loss(ext, seg, arch, &usable_owned, cfg, layout)?;
    Ok(E2eOutcome {
        trace,
        reports,
        warm_start_loss,
        final_loss,
    })
}

/// Whole-slide prediction: per-cell tumor probability for every kept patch,
/// nolabel cells included. Cells outside any map stay absent (invalid).
#[derive(Debug, Clone)]
pub struct SlidePrediction {
    pub slide_id: String,
    /// (grid position, tumor probability), sorted by position.
    pub cells: Vec<((u32, u32), f64)>,
}

impl SlidePrediction {
    pub fn tumor_cells(&self) -> Vec<(u32, u32)> {
        self.cells
            .iter()
            .filter(|(_, p)| *p >= crate::eval::TUMOR_THRESHOLD)
            .map(|&(pos, _)| pos)
            .collect()
    }
}

pub fn predict(
    ext: &ExtractorParams,
    seg: &SegParams,
    arch: &ArchConfig,
    slide: &SlidePatches,
    layout: MapLayout,
) -> Result<SlidePrediction, TrainError> {
    let rb = extract_all_features(ext, arch, slide)?;
    let maps = slide_maps(&rb, arch, layout)?;
    let mut cells = Vec::new();
    let mut tape = Tape::new();
    for (fm, _) in &maps {
        tape.clear();
        let fmap = tape.input(&fm.data);
        let (logits, _) = segmentation_forward(&mut tape, seg, arch, fmap)?;
        let rows = tape.rows_from_chw(logits);
        let probs = softmax_rows(&tape.to_tensor(rows));
        let w = fm.placement.map_w;
        for (pos, (r, c)) in fm.placement.occupied() {
            let p_tumor = probs.data()[(r * w + c) * 2 + 1];
            cells.push((pos, p_tumor));
        }
    }
    cells.sort_by_key(|&(pos, _)| pos);
    Ok(SlidePrediction {
        slide_id: slide.slide_id.clone(),
        cells,
    })
}
