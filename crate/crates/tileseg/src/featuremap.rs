//! Feature-map assembly: per-patch feature vectors arranged into fixed-size
//! zero-filled maps, centered per tissue lump, with matching label maps.

use std::collections::{BTreeMap, BTreeSet};

use thiserror::Error;

use crate::preprocess::PatchLabel;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum FeatureMapError {
    #[error("tissue bbox {bbox_h}x{bbox_w} exceeds map size {map_h}x{map_w}")]
    Overflow {
        bbox_h: usize,
        bbox_w: usize,
        map_h: usize,
        map_w: usize,
    },
    #[error("grid position ({0}, {1}) is not covered by this placement")]
    PlacementMismatch(u32, u32),
    #[error("feature vectors must share one length, got {0} and {1}")]
    MixedDepth(usize, usize),
    #[error("cannot assemble an empty component")]
    Empty,
}

/// Per-cell ground truth on a map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CellLabel {
    Tumor,
    Normal,
    Ignore,
}

impl From<PatchLabel> for CellLabel {
    fn from(l: PatchLabel) -> Self {
        match l {
            PatchLabel::Tumor => CellLabel::Tumor,
            PatchLabel::Normal => CellLabel::Normal,
            PatchLabel::NoLabel => CellLabel::Ignore,
        }
    }
}

/// How a slide's patches become maps: one map per tissue lump or a single
/// whole-slide map, and the policy for tissue that outgrows the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MapLayout {
    pub per_lump: bool,
    pub overflow: OverflowPolicy,
}

impl Default for MapLayout {
    fn default() -> Self {
        MapLayout {
            per_lump: true,
            overflow: OverflowPolicy::Error,
        }
    }
}

/// What to do when a component's bounding box does not fit the map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverflowPolicy {
    /// Refuse, reporting the offending extents.
    #[default]
    Error,
    /// Keep the centered placement and drop cells that fall outside.
    Crop,
}

/// Mapping between slide grid positions and map cells for one assembled map.
#[derive(Debug, Clone)]
pub struct Placement {
    pub map_h: usize,
    pub map_w: usize,
    /// Top-left of the component bounding box, in grid units.
    pub bbox_min: (u32, u32),
    /// Centering offset added to bbox-relative positions (may be negative
    /// under the crop policy).
    pub offset: (i64, i64),
    forward: BTreeMap<(u32, u32), (usize, usize)>,
    inverse: BTreeMap<(usize, usize), (u32, u32)>,
    /// Positions dropped by the crop policy.
    pub cropped: BTreeSet<(u32, u32)>,
}

impl Placement {
    pub fn cell_of(&self, grid_pos: (u32, u32)) -> Option<(usize, usize)> {
        self.forward.get(&grid_pos).copied()
    }

    /// Exact inverse on occupied cells, none elsewhere.
    pub fn cell_to_patch(&self, cell: (usize, usize)) -> Option<(u32, u32)> {
        self.inverse.get(&cell).copied()
    }

    pub fn occupied(&self) -> impl Iterator<Item = ((u32, u32), (usize, usize))> + '_ {
        self.forward.iter().map(|(&g, &c)| (g, c))
    }

    pub fn n_occupied(&self) -> usize {
        self.forward.len()
    }
}

/// Zero-padded, centered map of per-patch feature vectors.
#[derive(Debug, Clone)]
pub struct FeatureMap {
    /// `[D, map_h, map_w]`.
    pub data: Tensor,
    /// Row-major per-cell occupancy; unoccupied cells are exactly zero in
    /// every channel.
    pub occupancy: Vec<bool>,
    pub placement: Placement,
}

/// Per-cell labels aligned with a feature map.
#[derive(Debug, Clone)]
pub struct LabelMap {
    pub map_h: usize,
    pub map_w: usize,
    /// Row-major; `Ignore` wherever unoccupied or unlabeled.
    pub cells: Vec<CellLabel>,
}

impl LabelMap {
    pub fn at(&self, r: usize, c: usize) -> CellLabel {
        self.cells[r * self.map_w + c]
    }

    /// Flattened (labels, mask) for the masked cross-entropy: label index 1
    /// is tumor, 0 is normal; the mask is true on labeled cells only.
    pub fn to_loss_inputs(&self) -> (Vec<usize>, Vec<bool>) {
        let mut labels = Vec::with_capacity(self.cells.len());
        let mut mask = Vec::with_capacity(self.cells.len());
        for &c in &self.cells {
            match c {
                CellLabel::Tumor => {
                    labels.push(1);
                    mask.push(true);
                }
                CellLabel::Normal => {
                    labels.push(0);
                    mask.push(true);
                }
                CellLabel::Ignore => {
                    labels.push(0);
                    mask.push(false);
                }
            }
        }
        (labels, mask)
    }

    pub fn labeled_count(&self) -> usize {
        self.cells.iter().filter(|&&c| c != CellLabel::Ignore).count()
    }
}

/// Connected components of kept grid cells under 8-connectivity, ordered by
/// their topmost-leftmost cell; cells within a component are sorted.
pub fn tissue_components(kept_cells: &[(u32, u32)]) -> Vec<Vec<(u32, u32)>> {
    let set: BTreeSet<(u32, u32)> = kept_cells.iter().copied().collect();
    let mut seen: BTreeSet<(u32, u32)> = BTreeSet::new();
    let mut components = Vec::new();
    for &start in &set {
        if seen.contains(&start) {
            continue;
        }
        let mut stack = vec![start];
        let mut comp = Vec::new();
        seen.insert(start);
        while let Some((r, c)) = stack.pop() {
            comp.push((r, c));
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let nr = r as i64 + dr;
                    let nc = c as i64 + dc;
                    if nr < 0 || nc < 0 {
                        continue;
                    }
                    let n = (nr as u32, nc as u32);
                    if set.contains(&n) && seen.insert(n) {
                        stack.push(n);
                    }
                }
            }
        }
        comp.sort_unstable();
        components.push(comp);
    }
    // BTreeSet iteration makes discovery order topmost-leftmost already
    components
}

/// Arrange feature vectors into a `[D, map_h, map_w]` map, centering the
/// component bounding box: offset = floor((map - bbox) / 2) per axis.
pub fn assemble_feature_map(
    features: &[((u32, u32), Vec<f64>)],
    map_size: (usize, usize),
    policy: OverflowPolicy,
) -> Result<FeatureMap, FeatureMapError> {
    if features.is_empty() {
        return Err(FeatureMapError::Empty);
    }
    let depth = features[0].1.len();
    for (_, v) in features {
        if v.len() != depth {
            return Err(FeatureMapError::MixedDepth(depth, v.len()));
        }
    }
    let (map_h, map_w) = map_size;
    let placement = place(features.iter().map(|&(g, _)| g), map_size, policy)?;

    let mut data = vec![0.0; depth * map_h * map_w];
    let mut occupancy = vec![false; map_h * map_w];
    for (grid_pos, vector) in features {
        let Some((r, c)) = placement.cell_of(*grid_pos) else {
            continue; // cropped
        };
        occupancy[r * map_w + c] = true;
        for (d, &v) in vector.iter().enumerate() {
            data[d * map_h * map_w + r * map_w + c] = v;
        }
    }
    Ok(FeatureMap {
        data: Tensor::new(vec![depth, map_h, map_w], data).expect("consistent shape"),
        occupancy,
        placement,
    })
}

/// Centered placement for a set of grid positions, without any feature
/// data. Reused when only geometry is needed (label maps, rendering).
pub fn make_placement(
    positions: &[(u32, u32)],
    map_size: (usize, usize),
    policy: OverflowPolicy,
) -> Result<Placement, FeatureMapError> {
    if positions.is_empty() {
        return Err(FeatureMapError::Empty);
    }
    place(positions.iter().copied(), map_size, policy)
}

fn place(
    positions: impl Iterator<Item = (u32, u32)>,
    map_size: (usize, usize),
    policy: OverflowPolicy,
) -> Result<Placement, FeatureMapError> {
    let positions: Vec<(u32, u32)> = positions.collect();
    let (map_h, map_w) = map_size;
    let min_r = positions.iter().map(|p| p.0).min().expect("nonempty");
    let min_c = positions.iter().map(|p| p.1).min().expect("nonempty");
    let max_r = positions.iter().map(|p| p.0).max().expect("nonempty");
    let max_c = positions.iter().map(|p| p.1).max().expect("nonempty");
    let bbox_h = (max_r - min_r + 1) as usize;
    let bbox_w = (max_c - min_c + 1) as usize;
    if (bbox_h > map_h || bbox_w > map_w) && policy == OverflowPolicy::Error {
        return Err(FeatureMapError::Overflow {
            bbox_h,
            bbox_w,
            map_h,
            map_w,
        });
    }
    let offset = (
        (map_h as i64 - bbox_h as i64).div_euclid(2),
        (map_w as i64 - bbox_w as i64).div_euclid(2),
    );
    let mut forward = BTreeMap::new();
    let mut inverse = BTreeMap::new();
    let mut cropped = BTreeSet::new();
    for &(gr, gc) in &positions {
        let r = (gr - min_r) as i64 + offset.0;
        let c = (gc - min_c) as i64 + offset.1;
        if r < 0 || c < 0 || r >= map_h as i64 || c >= map_w as i64 {
            cropped.insert((gr, gc));
            continue;
        }
        forward.insert((gr, gc), (r as usize, c as usize));
        inverse.insert((r as usize, c as usize), (gr, gc));
    }
    Ok(Placement {
        map_h,
        map_w,
        bbox_min: (min_r, min_c),
        offset,
        forward,
        inverse,
        cropped,
    })
}

/// Labels arranged with the placement of the matching feature map. Empty
/// cells and nolabel patches become `Ignore`.
pub fn assemble_label_map(
    labels: &[((u32, u32), PatchLabel)],
    placement: &Placement,
) -> Result<LabelMap, FeatureMapError> {
    let mut cells = vec![CellLabel::Ignore; placement.map_h * placement.map_w];
    for &(grid_pos, label) in labels {
        match placement.cell_of(grid_pos) {
            Some((r, c)) => cells[r * placement.map_w + c] = label.into(),
            None if placement.cropped.contains(&grid_pos) => {}
            None => return Err(FeatureMapError::PlacementMismatch(grid_pos.0, grid_pos.1)),
        }
    }
    Ok(LabelMap {
        map_h: placement.map_h,
        map_w: placement.map_w,
        cells,
    })
}
