//! Patch-level metrics (accuracy, PR-AUC) and patient-level staging
//! (slide class, pN stage, quadratically weighted kappa).

use thiserror::Error;

use crate::featuremap::{tissue_components, CellLabel};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no labeled cells to evaluate")]
    NoLabeledCells,
    #[error("precision-recall needs at least one positive label")]
    NoPositives,
    #[error("missing or invalid lesion calibration (cell_mm must be positive)")]
    MissingCalibration,
    #[error("a patient has exactly 5 slides, got {0}")]
    WrongSlideCount(usize),
    #[error("stage lists must be nonempty and of equal length")]
    BadStageLists,
}

/// Millimeter calibration and lesion-size thresholds for slide classes.
/// The 0.2 mm / 2 mm cut points follow the lymph-node challenge convention.
#[derive(Debug, Clone, PartialEq)]
pub struct LesionCalibration {
    /// Edge length of one map cell in millimeters.
    pub cell_mm: f64,
    pub itc_max_mm: f64,
    pub macro_min_mm: f64,
}

impl LesionCalibration {
    pub fn new(cell_mm: f64) -> Self {
        LesionCalibration {
            cell_mm,
            itc_max_mm: 0.2,
            macro_min_mm: 2.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum SlideClass {
    Negative,
    Itc,
    Micro,
    Macro,
}

impl SlideClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SlideClass::Negative => "negative",
            SlideClass::Itc => "itc",
            SlideClass::Micro => "micro",
            SlideClass::Macro => "macro",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum PnStage {
    Pn0,
    Pn0IPlus,
    Pn1Mi,
    Pn1,
    Pn2,
}

impl PnStage {
    pub fn ordinal(self) -> usize {
        match self {
            PnStage::Pn0 => 0,
            PnStage::Pn0IPlus => 1,
            PnStage::Pn1Mi => 2,
            PnStage::Pn1 => 3,
            PnStage::Pn2 => 4,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            PnStage::Pn0 => "pN0",
            PnStage::Pn0IPlus => "pN0(i+)",
            PnStage::Pn1Mi => "pN1mi",
            PnStage::Pn1 => "pN1",
            PnStage::Pn2 => "pN2",
        }
    }
}

/// Threshold for calling a cell tumor. Exactly 0.5 counts as tumor.
pub const TUMOR_THRESHOLD: f64 = 0.5;

/// Accuracy over labeled cells: predicted tumor iff probability >= 0.5,
/// `Ignore` cells excluded.
pub fn patch_accuracy(
    cells: impl IntoIterator<Item = (f64, CellLabel)>,
) -> Result<f64, EvalError> {
    let mut total = 0usize;
    let mut correct = 0usize;
    for (p, label) in cells {
        let truth_tumor = match label {
            CellLabel::Tumor => true,
            CellLabel::Normal => false,
            CellLabel::Ignore => continue,
        };
        total += 1;
        if (p >= TUMOR_THRESHOLD) == truth_tumor {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(EvalError::NoLabeledCells);
    }
    Ok(correct as f64 / total as f64)
}

/// Average precision by step-wise integration of the precision-recall
/// curve: scores sorted descending, equal scores entering together,
/// AP = sum over distinct-score prefixes of (R_k - R_{k-1}) * P_k.
pub fn pr_auc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    assert_eq!(scores.len(), labels.len());
    assert!(scores.iter().all(|s| s.is_finite()), "scores must be finite");
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut prev_recall = 0.0;
    let mut i = 0;
    while i < order.len() {
        let score = scores[order[i]];
        while i < order.len() && scores[order[i]] == score {
            if labels[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}

/// Slide class from the predicted tumor cells (already binarized at 0.5):
/// the largest 8-connected component's major bounding-box extent, in
/// millimeters, decides the class.
pub fn slide_class(
    tumor_cells: &[(u32, u32)],
    cal: &LesionCalibration,
) -> Result<SlideClass, EvalError> {
    if cal.cell_mm <= 0.0 || !cal.cell_mm.is_finite() {
        return Err(EvalError::MissingCalibration);
    }
    if tumor_cells.is_empty() {
        return Ok(SlideClass::Negative);
    }
    let mut largest_mm = 0.0f64;
    for comp in tissue_components(tumor_cells) {
        let min_r = comp.iter().map(|c| c.0).min().unwrap();
        let max_r = comp.iter().map(|c| c.0).max().unwrap();
        let min_c = comp.iter().map(|c| c.1).min().unwrap();
        let max_c = comp.iter().map(|c| c.1).max().unwrap();
        let extent = (max_r - min_r + 1).max(max_c - min_c + 1) as f64 * cal.cell_mm;
        largest_mm = largest_mm.max(extent);
    }
    Ok(if largest_mm > cal.macro_min_mm {
        SlideClass::Macro
    } else if largest_mm > cal.itc_max_mm {
        SlideClass::Micro
    } else {
        SlideClass::Itc
    })
}

/// Patient stage from exactly five slide classes:
/// all negative -> pN0; only ITC -> pN0(i+); micro but no macro -> pN1mi;
/// 1-3 macro slides -> pN1; 4 or more -> pN2.
pub fn pn_stage(classes: &[SlideClass]) -> Result<PnStage, EvalError> {
    if classes.len() != 5 {
        return Err(EvalError::WrongSlideCount(classes.len()));
    }
    let macros = classes.iter().filter(|&&c| c == SlideClass::Macro).count();
    let micros = classes.iter().filter(|&&c| c == SlideClass::Micro).count();
    let itcs = classes.iter().filter(|&&c| c == SlideClass::Itc).count();
    Ok(if macros >= 4 {
        PnStage::Pn2
    } else if macros >= 1 {
        PnStage::Pn1
    } else if micros >= 1 {
        PnStage::Pn1Mi
    } else if itcs >= 1 {
        PnStage::Pn0IPlus
    } else {
        PnStage::Pn0
    })
}

/// Quadratically weighted Cohen's kappa over the five ordered stages.
/// Identical constant labelings are defined as perfect agreement.
pub fn kappa(pred: &[PnStage], truth: &[PnStage]) -> Result<f64, EvalError> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(EvalError::BadStageLists);
    }
    let k = 5usize;
    let n = pred.len() as f64;
    let mut observed = [[0.0f64; 5]; 5];
    let mut row = [0.0f64; 5];
    let mut col = [0.0f64; 5];
    for (&p, &t) in pred.iter().zip(truth) {
        observed[t.ordinal()][p.ordinal()] += 1.0;
        row[t.ordinal()] += 1.0;
        col[p.ordinal()] += 1.0;
    }
    let weight = |i: usize, j: usize| {
        let d = i as f64 - j as f64;
        d * d
    };
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..k {
        for j in 0..k {
            num += weight(i, j) * observed[i][j];
            den += weight(i, j) * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        // single class on both sides; identical by construction
        return Ok(1.0);
    }
    Ok(1.0 - num / den)
}
