//! Prediction-map rendering: tumor red, normal gray, nolabel overlaid
//! purple, background white.

use crate::featuremap::{CellLabel, LabelMap, Placement};

pub const TUMOR_COLOR: [u8; 3] = [255, 0, 0];
pub const NORMAL_COLOR: [u8; 3] = [128, 128, 128];
pub const NOLABEL_COLOR: [u8; 3] = [128, 0, 128];
pub const BACKGROUND_COLOR: [u8; 3] = [255, 255, 255];

/// 50% blend, integer floor per channel.
fn blend(a: [u8; 3], b: [u8; 3]) -> [u8; 3] {
    [
        ((a[0] as u16 + b[0] as u16) / 2) as u8,
        ((a[1] as u16 + b[1] as u16) / 2) as u8,
        ((a[2] as u16 + b[2] as u16) / 2) as u8,
    ]
}

fn cell_color(prob: Option<f64>, truth: CellLabel) -> [u8; 3] {
    match prob {
        None => BACKGROUND_COLOR,
        Some(p) => {
            let base = if p >= crate::eval::TUMOR_THRESHOLD {
                TUMOR_COLOR
            } else {
                NORMAL_COLOR
            };
            // cells without ground truth keep their prediction color but
            // are tinted so the unlabeled area stays visible
            if truth == CellLabel::Ignore {
                blend(base, NOLABEL_COLOR)
            } else {
                base
            }
        }
    }
}

fn truth_color(occupied: bool, truth: CellLabel) -> [u8; 3] {
    if !occupied {
        return BACKGROUND_COLOR;
    }
    match truth {
        CellLabel::Tumor => TUMOR_COLOR,
        CellLabel::Normal => NORMAL_COLOR,
        CellLabel::Ignore => NOLABEL_COLOR,
    }
}

/// Render one map's predictions as an RGB raster of `scale` pixels per
/// cell. With `truth_panel` the ground truth is drawn side by side and the
/// width doubles. Returns (width, height, rgb).
pub fn render_heatmap(
    placement: &Placement,
    probs: &[((u32, u32), f64)],
    truth: &LabelMap,
    scale: usize,
    truth_panel: bool,
) -> (usize, usize, Vec<u8>) {
    assert!(scale >= 1);
    assert_eq!(placement.map_h, truth.map_h);
    assert_eq!(placement.map_w, truth.map_w);
    let (mh, mw) = (placement.map_h, placement.map_w);
    let by_pos: std::collections::BTreeMap<(u32, u32), f64> = probs.iter().copied().collect();

    let panels = if truth_panel { 2 } else { 1 };
    let (w, h) = (mw * scale * panels, mh * scale);
    let mut rgb = vec![0u8; 3 * w * h];
    for r in 0..mh {
        for c in 0..mw {
            let truth_label = truth.at(r, c);
            let prob = placement
                .cell_to_patch((r, c))
                .and_then(|pos| by_pos.get(&pos).copied());
            let pred_px = cell_color(prob, truth_label);
            let truth_px = truth_color(placement.cell_to_patch((r, c)).is_some(), truth_label);
            for dy in 0..scale {
                for dx in 0..scale {
                    let y = r * scale + dy;
                    let x = c * scale + dx;
                    let i = 3 * (y * w + x);
                    rgb[i..i + 3].copy_from_slice(&pred_px);
                    if truth_panel {
                        let xt = x + mw * scale;
                        let j = 3 * (y * w + xt);
                        rgb[j..j + 3].copy_from_slice(&truth_px);
                    }
                }
            }
        }
    }
    (w, h, rgb)
}
