//! Deterministic synthetic slide generation.
//!
//! Slides are white rasters carrying a handful of tissue lumps (unions of
//! random ellipses, smoothed by one dilation pass). Normal tissue is pink
//! with smooth low-frequency variation and per-pixel noise; tumor regions
//! shift hue toward purple and add a high-frequency checker, so patch mean
//! color separates the classes while texture still carries signal. Layout
//! decisions come from one seeded stream and textures from coordinate
//! hashes, making every raster a pure function of (seed, config).

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use thiserror::Error;

use crate::formats::{self, FormatError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("degenerate config: {0}")]
    DegenerateConfig(String),
    #[error("need at least 5 slides, got {0}")]
    TooFewSlides(usize),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Per-pixel ground truth class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelClass {
    Background,
    Normal,
    Tumor,
    Unannotated,
}

impl PixelClass {
    /// Graymap code, matching the white-normal / gray-tumor convention.
    pub fn code(self) -> u8 {
        match self {
            PixelClass::Background => 0,
            PixelClass::Tumor => 64,
            PixelClass::Unannotated => 128,
            PixelClass::Normal => 255,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(PixelClass::Background),
            64 => Some(PixelClass::Tumor),
            128 => Some(PixelClass::Unannotated),
            255 => Some(PixelClass::Normal),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlideImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct AnnotationMask {
    pub width: usize,
    pub height: usize,
    pub codes: Vec<u8>,
}

impl AnnotationMask {
    pub fn class_at(&self, x: usize, y: usize) -> PixelClass {
        PixelClass::from_code(self.codes[y * self.width + x]).expect("valid class code")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlideGenConfig {
    pub width: usize,
    pub height: usize,
    /// Patch edge the downstream tiler will use; extents must cover at
    /// least 4 patches per axis.
    pub patch_size: usize,
    pub max_lumps: usize,
    /// Target fraction of slide area covered by tissue.
    pub tissue_target: f64,
    /// Target tumor fraction within a tumor-bearing lump. Zero disables
    /// tumor entirely.
    pub tumor_fraction: f64,
    /// Chance that a lump carries a tumor region.
    pub tumor_lump_prob: f64,
    /// Width of the unannotated rim at lump boundaries, as a fraction of
    /// `patch_size`. Zero disables rims.
    pub unannotated_rim_frac: f64,
}

impl Default for SlideGenConfig {
    fn default() -> Self {
        SlideGenConfig {
            width: 1024,
            height: 1024,
            patch_size: 64,
            max_lumps: 3,
            tissue_target: 0.40,
            tumor_fraction: 0.30,
            tumor_lump_prob: 0.85,
            unannotated_rim_frac: 0.25,
        }
    }
}

impl SlideGenConfig {
    fn validate(&self) -> Result<(), SynthError> {
        if self.max_lumps == 0 {
            return Err(SynthError::DegenerateConfig("max_lumps is zero".into()));
        }
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::DegenerateConfig("zero extents".into()));
        }
        if self.width < 4 * self.patch_size || self.height < 4 * self.patch_size {
            return Err(SynthError::DegenerateConfig(format!(
                "extents {}x{} smaller than 4 patches of {}",
                self.width, self.height, self.patch_size
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        out.push((format!("{prefix}width"), self.width.to_string()));
        out.push((format!("{prefix}height"), self.height.to_string()));
        out.push((format!("{prefix}patch_size"), self.patch_size.to_string()));
        out.push((format!("{prefix}max_lumps"), self.max_lumps.to_string()));
        out.push((format!("{prefix}tissue_target"), self.tissue_target.to_string()));
        out.push((format!("{prefix}tumor_fraction"), self.tumor_fraction.to_string()));
        out.push((format!("{prefix}tumor_lump_prob"), self.tumor_lump_prob.to_string()));
        out.push((
            format!("{prefix}unannotated_rim_frac"),
            self.unannotated_rim_frac.to_string(),
        ));
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |k: &str| format!("bad value for {k}");
        match key {
            "width" => self.width = value.parse().map_err(|_| bad(key))?,
            "height" => self.height = value.parse().map_err(|_| bad(key))?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad(key))?,
            "max_lumps" => self.max_lumps = value.parse().map_err(|_| bad(key))?,
            "tissue_target" => self.tissue_target = value.parse().map_err(|_| bad(key))?,
            "tumor_fraction" => self.tumor_fraction = value.parse().map_err(|_| bad(key))?,
            "tumor_lump_prob" => self.tumor_lump_prob = value.parse().map_err(|_| bad(key))?,
            "unannotated_rim_frac" => {
                self.unannotated_rim_frac = value.parse().map_err(|_| bad(key))?
            }
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }
}

// ── deterministic hashing ─────────────────────────────────────────────

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn mix2(a: u64, b: u64) -> u64 {
    splitmix64(a ^ splitmix64(b))
}

fn mix3(a: u64, b: u64, c: u64) -> u64 {
    splitmix64(mix2(a, b) ^ splitmix64(c.wrapping_add(0x6A09_E667_F3BC_C909)))
}

/// Hash to the unit interval [0, 1).
fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

fn signed_range(h: u64, amp: f64) -> f64 {
    (unit(h) * 2.0 - 1.0) * amp
}

// ── geometry ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let dx = (x - self.cx) / self.rx;
        let dy = (y - self.cy) / self.ry;
        dx * dx + dy * dy <= 1.0
    }

    fn bbox(&self, w: usize, h: usize) -> (usize, usize, usize, usize) {
        let x0 = (self.cx - self.rx).floor().max(0.0) as usize;
        let y0 = (self.cy - self.ry).floor().max(0.0) as usize;
        let x1 = ((self.cx + self.rx).ceil() as usize).min(w.saturating_sub(1));
        let y1 = ((self.cy + self.ry).ceil() as usize).min(h.saturating_sub(1));
        (x0, y0, x1, y1)
    }
}

struct LumpPlan {
    shapes: Vec<Ellipse>,
    tumor: Vec<Ellipse>,
}

const NORMAL_BASE: [f64; 3] = [210.0, 150.0, 160.0];
const TUMOR_BASE: [f64; 3] = [135.0, 105.0, 195.0];
const LATTICE: usize = 32;

/// Generate one slide and its pixel-level ground truth.
pub fn generate_slide(
    seed: u64,
    cfg: &SlideGenConfig,
) -> Result<(SlideImage, AnnotationMask), SynthError> {
    cfg.validate()?;
    let (w, h) = (cfg.width, cfg.height);
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    // layout: one vertical strip per lump, jittered ellipse unions inside
    let n_lumps = rng.random_range(1..=cfg.max_lumps);
    let strip_w = w / n_lumps;
    let margin_x = (cfg.patch_size / 2).max(8);
    let margin_y = cfg.patch_size.max(16);
    let mut plans = Vec::with_capacity(n_lumps);
    for li in 0..n_lumps {
        let box_lo_x = (li * strip_w + margin_x) as f64;
        let box_hi_x = ((li + 1) * strip_w - margin_x) as f64;
        let box_lo_y = margin_y as f64;
        let box_hi_y = (h - margin_y) as f64;
        let ax = (box_hi_x - box_lo_x) / 2.0;
        let ay = (box_hi_y - box_lo_y) / 2.0;
        let target_area = cfg.tissue_target * (w * h) as f64 / n_lumps as f64;

        let mut rx = (target_area / std::f64::consts::PI).sqrt().min(0.8 * ax);
        let mut ry = (target_area / (std::f64::consts::PI * rx)).min(0.8 * ay);
        rx *= rng.random_range(0.92..1.0);
        ry *= rng.random_range(0.92..1.0);
        let strip_cx = (box_lo_x + box_hi_x) / 2.0;
        let strip_cy = (box_lo_y + box_hi_y) / 2.0;
        let cx = strip_cx + rng.random_range(-1.0..1.0) * (ax - rx).max(0.0) * 0.6;
        let cy = strip_cy + rng.random_range(-1.0..1.0) * (ay - ry).max(0.0) * 0.6;
        let mut shapes = vec![Ellipse { cx, cy, rx, ry }];

        let n_sat = rng.random_range(1..=3);
        for _ in 0..n_sat {
            let srx = rx * rng.random_range(0.3..0.6);
            let sry = ry * rng.random_range(0.3..0.6);
            let sx = cx + rng.random_range(-0.6..0.6) * rx;
            let sy = cy + rng.random_range(-0.6..0.6) * ry;
            // keep the satellite inside the strip box
            let sx = sx.clamp(box_lo_x + srx, box_hi_x - srx);
            let sy = sy.clamp(box_lo_y + sry, box_hi_y - sry);
            shapes.push(Ellipse {
                cx: sx,
                cy: sy,
                rx: srx,
                ry: sry,
            });
        }

        let mut tumor = Vec::new();
        if cfg.tumor_fraction > 0.0 && rng.random_range(0.0..1.0) < cfg.tumor_lump_prob {
            let s = cfg.tumor_fraction.sqrt();
            let n_tumor = rng.random_range(1..=2);
            for _ in 0..n_tumor {
                let scale = s * rng.random_range(0.75..1.05) / (n_tumor as f64).sqrt();
                let trx = rx * scale;
                let try_ = ry * scale;
                let tx = cx + rng.random_range(-0.8..0.8) * (rx - trx).max(0.0);
                let ty = cy + rng.random_range(-0.8..0.8) * (ry - try_).max(0.0);
                tumor.push(Ellipse {
                    cx: tx,
                    cy: ty,
                    rx: trx.max(2.0),
                    ry: try_.max(2.0),
                });
            }
        }
        plans.push(LumpPlan { shapes, tumor });
    }

    // rasterize lump membership (1-based index, 0 = background)
    let mut lump = vec![0u16; w * h];
    for (li, plan) in plans.iter().enumerate() {
        for e in &plan.shapes {
            let (x0, y0, x1, y1) = e.bbox(w, h);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if e.contains(x as f64, y as f64) {
                        lump[y * w + x] = (li + 1) as u16;
                    }
                }
            }
        }
    }
    // one 3x3 dilation pass
    let src = lump.clone();
    for y in 0..h {
        for x in 0..w {
            if src[y * w + x] != 0 {
                continue;
            }
            'scan: for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                        let v = src[ny as usize * w + nx as usize];
                        if v != 0 {
                            lump[y * w + x] = v;
                            break 'scan;
                        }
                    }
                }
            }
        }
    }

    let mut tumor = vec![false; w * h];
    for plan in &plans {
        for e in &plan.tumor {
            let (x0, y0, x1, y1) = e.bbox(w, h);
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if lump[y * w + x] != 0 && e.contains(x as f64, y as f64) {
                        tumor[y * w + x] = true;
                    }
                }
            }
        }
    }

    // city-block distance to background, for the unannotated rim
    let rim_px = (cfg.unannotated_rim_frac * cfg.patch_size as f64).round() as u32;
    let mut dist = vec![u32::MAX; w * h];
    if rim_px > 0 {
        for i in 0..w * h {
            if lump[i] == 0 {
                dist[i] = 0;
            }
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                if dist[i] == 0 {
                    continue;
                }
                let mut d = u32::MAX;
                if x > 0 {
                    d = d.min(dist[i - 1].saturating_add(1));
                }
                if y > 0 {
                    d = d.min(dist[i - w].saturating_add(1));
                }
                dist[i] = dist[i].min(d);
            }
        }
        for y in (0..h).rev() {
            for x in (0..w).rev() {
                let i = y * w + x;
                if dist[i] == 0 {
                    continue;
                }
                let mut d = dist[i];
                if x + 1 < w {
                    d = d.min(dist[i + 1].saturating_add(1));
                }
                if y + 1 < h {
                    d = d.min(dist[i + w].saturating_add(1));
                }
                dist[i] = d;
            }
        }
    }

    // per-lump color jitter, derived from the slide seed
    let jitter: Vec<[f64; 3]> = (0..=n_lumps)
        .map(|li| {
            let mut j = [0.0; 3];
            for (ch, v) in j.iter_mut().enumerate() {
                *v = signed_range(mix3(seed, 0xC0, (li * 4 + ch) as u64), 6.0);
            }
            j
        })
        .collect();

    let mut rgb = vec![255u8; 3 * w * h];
    let mut codes = vec![PixelClass::Background.code(); w * h];
    let lattice_seed = mix2(seed, 0xA11CE);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let li = lump[i] as usize;
            if li == 0 {
                continue;
            }
            let is_tumor = tumor[i];
            let class = if rim_px > 0 && dist[i] <= rim_px {
                PixelClass::Unannotated
            } else if is_tumor {
                PixelClass::Tumor
            } else {
                PixelClass::Normal
            };
            codes[i] = class.code();

            // smooth value noise on a 32px lattice, bilinear
            let (gx, gy) = (x / LATTICE, y / LATTICE);
            let (fx, fy) = (
                (x % LATTICE) as f64 / LATTICE as f64,
                (y % LATTICE) as f64 / LATTICE as f64,
            );
            let corner =
                |ix: usize, iy: usize| signed_range(mix3(lattice_seed, ix as u64, iy as u64), 10.0);
            let smooth = corner(gx, gy) * (1.0 - fx) * (1.0 - fy)
                + corner(gx + 1, gy) * fx * (1.0 - fy)
                + corner(gx, gy + 1) * (1.0 - fx) * fy
                + corner(gx + 1, gy + 1) * fx * fy;

            let checker = if is_tumor {
                if (x / 4 + y / 4) % 2 == 0 {
                    14.0
                } else {
                    -14.0
                }
            } else {
                0.0
            };
            let base = if is_tumor { TUMOR_BASE } else { NORMAL_BASE };
            for ch in 0..3 {
                let noise = signed_range(mix3(mix2(seed, 0xF00D), (y * w + x) as u64, ch as u64), 8.0);
                let v = base[ch] + jitter[li][ch] + smooth + checker + noise;
                rgb[3 * i + ch] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    Ok((
        SlideImage {
            id: format!("slide-{seed:016x}"),
            width: w,
            height: h,
            rgb,
        },
        AnnotationMask {
            width: w,
            height: h,
            codes,
        },
    ))
}

// ── dataset generation ────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SlideEntry {
    pub id: String,
    pub seed: u64,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub seed: u64,
    pub cfg: SlideGenConfig,
    pub slides: Vec<SlideEntry>,
}

impl DatasetManifest {
    pub fn slides_in(&self, split: Split) -> impl Iterator<Item = &SlideEntry> {
        self.slides.iter().filter(move |s| s.split == split)
    }

    pub fn to_text(&self) -> String {
        let mut kv: Vec<(String, String)> = Vec::new();
        kv.push(("seed".into(), self.seed.to_string()));
        kv.push(("n_slides".into(), self.slides.len().to_string()));
        self.cfg.write_kv("synth.", &mut kv);
        for s in &self.slides {
            kv.push((format!("slide.{}.seed", s.id), s.seed.to_string()));
            kv.push((format!("slide.{}.split", s.id), s.split.as_str().to_string()));
        }
        let mut out = String::from("# tileseg dataset manifest\n");
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, String> {
        let mut seed = None;
        let mut cfg = SlideGenConfig::default();
        let mut slides: Vec<SlideEntry> = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| format!("bad manifest line {line:?}"))?;
            if k == "seed" {
                seed = Some(v.parse().map_err(|_| "bad seed")?);
            } else if k == "n_slides" {
                // redundant count, validated below
            } else if let Some(rest) = k.strip_prefix("synth.") {
                cfg.apply_kv(rest, v)?;
            } else if let Some(rest) = k.strip_prefix("slide.") {
                let (id, field) = rest
                    .rsplit_once('.')
                    .ok_or_else(|| format!("bad slide key {k:?}"))?;
                let entry = match slides.iter_mut().find(|s| s.id == id) {
                    Some(e) => e,
                    None => {
                        slides.push(SlideEntry {
                            id: id.to_string(),
                            seed: 0,
                            split: Split::Train,
                        });
                        slides.last_mut().unwrap()
                    }
                };
                match field {
                    "seed" => entry.seed = v.parse().map_err(|_| "bad slide seed")?,
                    "split" => {
                        entry.split =
                            Split::parse(v).ok_or_else(|| format!("bad split {v:?}"))?
                    }
                    _ => return Err(format!("unknown slide field {field:?}")),
                }
            } else {
                return Err(format!("unknown manifest key {k:?}"));
            }
        }
        Ok(DatasetManifest {
            seed: seed.ok_or("manifest missing seed")?,
            cfg,
            slides,
        })
    }
}

/// 80/20 train/test split, then 80/20 train/validation within train, with
/// floor-then-remainder counts and a seeded shuffle deciding membership.
pub fn split_counts(n: usize) -> (usize, usize, usize) {
    let train_all = n * 4 / 5;
    let test = n - train_all;
    let train = train_all * 4 / 5;
    let val = train_all - train;
    (train, val, test)
}

/// Generate `n_slides` slides plus masks under `out_dir` and write the
/// dataset manifest. Fully reproducible from (seed, cfg).
pub fn generate_dataset(
    seed: u64,
    n_slides: usize,
    cfg: &SlideGenConfig,
    out_dir: &Path,
) -> Result<DatasetManifest, SynthError> {
    cfg.validate()?;
    if n_slides < 5 {
        return Err(SynthError::TooFewSlides(n_slides));
    }
    let (n_train, n_val, _n_test) = split_counts(n_slides);
    let mut order: Vec<usize> = (0..n_slides).collect();
    let mut rng = ChaCha20Rng::seed_from_u64(mix2(seed, 0x5B117));
    for i in (1..n_slides).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    let mut split_of = vec![Split::Test; n_slides];
    for (rank, &idx) in order.iter().enumerate() {
        split_of[idx] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    std::fs::create_dir_all(out_dir.join("slides"))?;
    std::fs::create_dir_all(out_dir.join("masks"))?;
    let mut slides = Vec::with_capacity(n_slides);
    for i in 0..n_slides {
        let slide_seed = mix2(seed, 1000 + i as u64);
        let id = format!("slide_{i:03}");
        let (mut img, mask) = generate_slide(slide_seed, cfg)?;
        img.id = id.clone();
        formats::write_ppm(
            &out_dir.join("slides").join(format!("{id}.ppm")),
            img.width,
            img.height,
            &img.rgb,
        )?;
        formats::write_pgm(
            &out_dir.join("masks").join(format!("{id}.pgm")),
            mask.width,
            mask.height,
            &mask.codes,
        )?;
        slides.push(SlideEntry {
            id,
            seed: slide_seed,
            split: split_of[i],
        });
    }
    let manifest = DatasetManifest {
        seed,
        cfg: cfg.clone(),
        slides,
    };
    formats::write_text(&out_dir.join("dataset.manifest"), &manifest.to_text())?;
    Ok(manifest)
}
