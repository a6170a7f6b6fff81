//! The two networks: a small convolutional patch feature extractor whose
//! penultimate layer is the feature vector, and an encoder-decoder
//! segmentation network with skip connections over feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid arch: {0}")]
    InvalidArch(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("checkpoint is missing tensor {0:?}")]
    MissingTensor(String),
}

/// Network shapes. Convolutions are 3x3 stride-1 zero-padded throughout,
/// except the segmentation head, which is 1x1.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchConfig {
    /// Extractor input edge (the augmented crop size).
    pub crop_size: usize,
    pub in_channels: usize,
    /// Channels per extractor conv block; each block ends in a 2x2 maxpool.
    pub conv_channels: Vec<usize>,
    /// Length of the feature vector extracted from the penultimate layer.
    pub feature_dim: usize,
    /// Encoder channels of the segmentation net; depth = length.
    pub seg_channels: Vec<usize>,
    pub seg_bottleneck: usize,
    /// Fixed feature-map extents fed to the segmentation net.
    pub map_size: (usize, usize),
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            crop_size: 56,
            in_channels: 3,
            conv_channels: vec![8, 16, 32],
            feature_dim: 16,
            seg_channels: vec![32, 64],
            seg_bottleneck: 128,
            map_size: (16, 16),
        }
    }
}

impl ArchConfig {
    /// A tiny configuration for gradient-check and equivalence tests.
    pub fn toy() -> Self {
        ArchConfig {
            crop_size: 8,
            in_channels: 3,
            conv_channels: vec![4],
            feature_dim: 4,
            seg_channels: vec![8],
            seg_bottleneck: 16,
            map_size: (4, 4),
        }
    }

    pub fn seg_depth(&self) -> usize {
        self.seg_channels.len()
    }

    /// Spatial edge after the extractor conv stack.
    pub fn final_spatial(&self) -> usize {
        self.crop_size >> self.conv_channels.len()
    }

    pub fn flat_features(&self) -> usize {
        let s = self.final_spatial();
        self.conv_channels.last().copied().unwrap_or(0) * s * s
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.conv_channels.is_empty() {
            return Err(ModelError::InvalidArch("no extractor conv blocks".into()));
        }
        if self.in_channels == 0 || self.feature_dim == 0 {
            return Err(ModelError::InvalidArch("zero channel counts".into()));
        }
        let mut edge = self.crop_size;
        for _ in &self.conv_channels {
            if edge < 2 {
                return Err(ModelError::InvalidArch(format!(
                    "crop {} too small for {} pool stages",
                    self.crop_size,
                    self.conv_channels.len()
                )));
            }
            edge /= 2;
        }
        if self.seg_channels.is_empty() {
            return Err(ModelError::InvalidArch("no segmentation encoder blocks".into()));
        }
        let div = 1usize << self.seg_depth();
        let (mh, mw) = self.map_size;
        if mh % div != 0 || mw % div != 0 {
            return Err(ModelError::InvalidArch(format!(
                "map size {mh}x{mw} not divisible by 2^{}",
                self.seg_depth()
            )));
        }
        Ok(())
    }

    /// Canonical arch string; checkpoints refuse to load across changes.
    pub fn fingerprint(&self) -> String {
        let join = |v: &[usize]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(".")
        };
        format!(
            "crop{}-in{}-conv{}-fd{}-seg{}-bn{}-map{}x{}",
            self.crop_size,
            self.in_channels,
            join(&self.conv_channels),
            self.feature_dim,
            join(&self.seg_channels),
            self.seg_bottleneck,
            self.map_size.0,
            self.map_size.1
        )
    }

    pub fn write_kv(&self, prefix: &str, out: &mut Vec<(String, String)>) {
        let join = |v: &[usize]| {
            v.iter()
                .map(|c| c.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        out.push((format!("{prefix}crop_size"), self.crop_size.to_string()));
        out.push((format!("{prefix}in_channels"), self.in_channels.to_string()));
        out.push((format!("{prefix}conv_channels"), join(&self.conv_channels)));
        out.push((format!("{prefix}feature_dim"), self.feature_dim.to_string()));
        out.push((format!("{prefix}seg_channels"), join(&self.seg_channels)));
        out.push((format!("{prefix}seg_bottleneck"), self.seg_bottleneck.to_string()));
        out.push((format!("{prefix}map_h"), self.map_size.0.to_string()));
        out.push((format!("{prefix}map_w"), self.map_size.1.to_string()));
    }

    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        let bad = |k: &str| format!("bad value for {k}");
        let list = |v: &str| -> Result<Vec<usize>, String> {
            v.split(',')
                .map(|p| p.trim().parse().map_err(|_| format!("bad list {v:?}")))
                .collect()
        };
        match key {
            "crop_size" => self.crop_size = value.parse().map_err(|_| bad(key))?,
            "in_channels" => self.in_channels = value.parse().map_err(|_| bad(key))?,
            "conv_channels" => self.conv_channels = list(value)?,
            "feature_dim" => self.feature_dim = value.parse().map_err(|_| bad(key))?,
            "seg_channels" => self.seg_channels = list(value)?,
            "seg_bottleneck" => self.seg_bottleneck = value.parse().map_err(|_| bad(key))?,
            "map_h" => self.map_size.0 = value.parse().map_err(|_| bad(key))?,
            "map_w" => self.map_size.1 = value.parse().map_err(|_| bad(key))?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub w: Tensor,
    pub b: Tensor,
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Tensor,
    pub b: Tensor,
}

/// Extractor weights: conv blocks, the feature layer, and the patch
/// classification head (unused in end-to-end mode).
#[derive(Debug, Clone)]
pub struct ExtractorParams {
    pub convs: Vec<ConvLayer>,
    pub fc_feat: Linear,
    pub fc_out: Linear,
}

#[derive(Debug, Clone)]
pub struct SegParams {
    pub enc: Vec<ConvLayer>,
    pub bottleneck: ConvLayer,
    pub dec: Vec<ConvLayer>,
    pub head: ConvLayer,
}

fn named<'a>(out: &mut Vec<(String, &'a Tensor)>, name: &str, layer_w: &'a Tensor, layer_b: &'a Tensor) {
    out.push((format!("{name}.w"), layer_w));
    out.push((format!("{name}.b"), layer_b));
}

impl ExtractorParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            named(&mut out, &format!("conv{i}"), &c.w, &c.b);
        }
        named(&mut out, "fc_feat", &self.fc_feat.w, &self.fc_feat.b);
        named(&mut out, "fc_out", &self.fc_out.w, &self.fc_out.b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, c) in self.convs.iter_mut().enumerate() {
            out.push((format!("conv{i}.w"), &mut c.w));
            out.push((format!("conv{i}.b"), &mut c.b));
        }
        out.push(("fc_feat.w".into(), &mut self.fc_feat.w));
        out.push(("fc_feat.b".into(), &mut self.fc_feat.b));
        out.push(("fc_out.w".into(), &mut self.fc_out.w));
        out.push(("fc_out.b".into(), &mut self.fc_out.b));
        out
    }

    pub fn load_named(&mut self, mut loaded: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        for (name, slot) in self.tensors_mut() {
            let pos = loaded
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            let (_, t) = loaded.swap_remove(pos);
            if t.shape() != slot.shape() {
                return Err(ModelError::InvalidArch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

impl SegParams {
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, c) in self.enc.iter().enumerate() {
            named(&mut out, &format!("enc{i}"), &c.w, &c.b);
        }
        named(&mut out, "bottleneck", &self.bottleneck.w, &self.bottleneck.b);
        for (i, c) in self.dec.iter().enumerate() {
            named(&mut out, &format!("dec{i}"), &c.w, &c.b);
        }
        named(&mut out, "head", &self.head.w, &self.head.b);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, c) in self.enc.iter_mut().enumerate() {
            out.push((format!("enc{i}.w"), &mut c.w));
            out.push((format!("enc{i}.b"), &mut c.b));
        }
        out.push(("bottleneck.w".into(), &mut self.bottleneck.w));
        out.push(("bottleneck.b".into(), &mut self.bottleneck.b));
        for (i, c) in self.dec.iter_mut().enumerate() {
            out.push((format!("dec{i}.w"), &mut c.w));
            out.push((format!("dec{i}.b"), &mut c.b));
        }
        out.push(("head.w".into(), &mut self.head.w));
        out.push(("head.b".into(), &mut self.head.b));
        out
    }

    pub fn load_named(&mut self, mut loaded: Vec<(String, Tensor)>) -> Result<(), ModelError> {
        for (name, slot) in self.tensors_mut() {
            let pos = loaded
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::MissingTensor(name.clone()))?;
            let (_, t) = loaded.swap_remove(pos);
            if t.shape() != slot.shape() {
                return Err(ModelError::InvalidArch(format!(
                    "tensor {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                )));
            }
            *slot = t;
        }
        Ok(())
    }
}

fn he_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>, fan_in: usize) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(rng);
            z * std
        })
        .collect();
    Tensor::new(shape, data).expect("shape consistent")
}

fn conv_layer(rng: &mut ChaCha20Rng, c_out: usize, c_in: usize, k: usize) -> ConvLayer {
    ConvLayer {
        w: he_tensor(rng, vec![c_out, c_in, k, k], c_in * k * k),
        b: Tensor::zeros(vec![c_out]),
    }
}

fn linear_layer(rng: &mut ChaCha20Rng, d_in: usize, d_out: usize) -> Linear {
    Linear {
        w: he_tensor(rng, vec![d_in, d_out], d_in),
        b: Tensor::zeros(vec![d_out]),
    }
}

/// He-style fan-in scaled normal initialization, zero biases, deterministic
/// in the seed.
pub fn init_params(seed: u64, arch: &ArchConfig) -> Result<(ExtractorParams, SegParams), ModelError> {
    arch.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(seed);

    let mut convs = Vec::new();
    let mut c_in = arch.in_channels;
    for &c_out in &arch.conv_channels {
        convs.push(conv_layer(&mut rng, c_out, c_in, 3));
        c_in = c_out;
    }
    let extractor = ExtractorParams {
        convs,
        fc_feat: linear_layer(&mut rng, arch.flat_features(), arch.feature_dim),
        fc_out: linear_layer(&mut rng, arch.feature_dim, 2),
    };

    let mut enc = Vec::new();
    let mut c_in = arch.feature_dim;
    for &c_out in &arch.seg_channels {
        enc.push(conv_layer(&mut rng, c_out, c_in, 3));
        c_in = c_out;
    }
    let bottleneck = conv_layer(&mut rng, arch.seg_bottleneck, c_in, 3);
    let mut dec = Vec::new();
    let mut up_in = arch.seg_bottleneck;
    for &skip_ch in arch.seg_channels.iter().rev() {
        dec.push(conv_layer(&mut rng, skip_ch, up_in + skip_ch, 3));
        up_in = skip_ch;
    }
    let head = conv_layer(&mut rng, 2, arch.seg_channels[0], 1);
    let seg = SegParams {
        enc,
        bottleneck,
        dec,
        head,
    };
    Ok((extractor, seg))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractorMode {
    /// Stop at the penultimate layer and return `[B, feature_dim]`.
    Features,
    /// Apply the classification head and return `[B, 2]`.
    Logits,
}

/// Tape handles for the extractor parameters, in checkpoint order. The
/// head vars are absent in features mode, where that layer is removed.
pub struct ExtractorVars {
    pub convs: Vec<(Var, Var)>,
    pub fc_feat: (Var, Var),
    pub fc_out: Option<(Var, Var)>,
}

impl ExtractorVars {
    /// (name, var) pairs matching `ExtractorParams::named_tensors` order,
    /// restricted to the layers this forward actually used.
    pub fn ordered(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, &(w, b)) in self.convs.iter().enumerate() {
            out.push((format!("conv{i}.w"), w));
            out.push((format!("conv{i}.b"), b));
        }
        out.push(("fc_feat.w".into(), self.fc_feat.0));
        out.push(("fc_feat.b".into(), self.fc_feat.1));
        if let Some((w, b)) = self.fc_out {
            out.push(("fc_out.w".into(), w));
            out.push(("fc_out.b".into(), b));
        }
        out
    }
}

pub struct SegVars {
    pub enc: Vec<(Var, Var)>,
    pub bottleneck: (Var, Var),
    pub dec: Vec<(Var, Var)>,
    pub head: (Var, Var),
}

impl SegVars {
    pub fn ordered(&self) -> Vec<(String, Var)> {
        let mut out = Vec::new();
        for (i, &(w, b)) in self.enc.iter().enumerate() {
            out.push((format!("enc{i}.w"), w));
            out.push((format!("enc{i}.b"), b));
        }
        out.push(("bottleneck.w".into(), self.bottleneck.0));
        out.push(("bottleneck.b".into(), self.bottleneck.1));
        for (i, &(w, b)) in self.dec.iter().enumerate() {
            out.push((format!("dec{i}.w"), w));
            out.push((format!("dec{i}.b"), b));
        }
        out.push(("head.w".into(), self.head.0));
        out.push(("head.b".into(), self.head.1));
        out
    }
}

/// Run the extractor over a `[B, C, crop, crop]` batch already on the tape.
pub fn extractor_forward(
    tape: &mut Tape,
    params: &ExtractorParams,
    arch: &ArchConfig,
    x: Var,
    mode: ExtractorMode,
) -> Result<(Var, ExtractorVars), ModelError> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != arch.in_channels || xs[2] != arch.crop_size || xs[3] != arch.crop_size
    {
        return Err(ModelError::Autodiff(AutodiffError::ShapeMismatch(format!(
            "extractor input must be [B,{},{},{}], got {xs:?}",
            arch.in_channels, arch.crop_size, arch.crop_size
        ))));
    }
    let batch = xs[0];
    let mut convs = Vec::new();
    let mut cur = x;
    for layer in &params.convs {
        let w = tape.param(&layer.w);
        let b = tape.param(&layer.b);
        convs.push((w, b));
        cur = tape.conv2d(cur, w, b, 1, 1)?;
        cur = tape.relu(cur);
        cur = tape.maxpool2d(cur, 2, 2);
    }
    let flat = tape.reshape(cur, vec![batch, arch.flat_features()]);
    let fw = tape.param(&params.fc_feat.w);
    let fb = tape.param(&params.fc_feat.b);
    let features = tape.fully_connected(flat, fw, fb)?;
    let mut vars = ExtractorVars {
        convs,
        fc_feat: (fw, fb),
        fc_out: None,
    };
    match mode {
        ExtractorMode::Features => Ok((features, vars)),
        ExtractorMode::Logits => {
            let ow = tape.param(&params.fc_out.w);
            let ob = tape.param(&params.fc_out.b);
            vars.fc_out = Some((ow, ob));
            let logits = tape.fully_connected(features, ow, ob)?;
            Ok((logits, vars))
        }
    }
}

/// Run the segmentation net over a `[D, Hm, Wm]` feature map on the tape.
/// Output keeps the input extents with 2 channels of per-cell logits.
pub fn segmentation_forward(
    tape: &mut Tape,
    params: &SegParams,
    arch: &ArchConfig,
    fmap: Var,
) -> Result<(Var, SegVars), ModelError> {
    let fs = tape.shape(fmap).to_vec();
    if fs.len() != 3 || fs[0] != arch.feature_dim {
        return Err(ModelError::Autodiff(AutodiffError::ShapeMismatch(format!(
            "feature map must be [{},H,W], got {fs:?}",
            arch.feature_dim
        ))));
    }
    let div = 1usize << arch.seg_depth();
    if !fs[1].is_multiple_of(div) || !fs[2].is_multiple_of(div) {
        return Err(ModelError::InvalidArch(format!(
            "map extents {}x{} not divisible by 2^{}",
            fs[1],
            fs[2],
            arch.seg_depth()
        )));
    }

    let mut enc_vars = Vec::new();
    let mut skips = Vec::new();
    let mut cur = fmap;
    for layer in &params.enc {
        let w = tape.param(&layer.w);
        let b = tape.param(&layer.b);
        enc_vars.push((w, b));
        cur = tape.conv2d(cur, w, b, 1, 1)?;
        cur = tape.relu(cur);
        skips.push(cur);
        cur = tape.maxpool2d(cur, 2, 2);
    }
    let bw = tape.param(&params.bottleneck.w);
    let bb = tape.param(&params.bottleneck.b);
    cur = tape.conv2d(cur, bw, bb, 1, 1)?;
    cur = tape.relu(cur);

    let mut dec_vars = Vec::new();
    for (layer, &skip) in params.dec.iter().zip(skips.iter().rev()) {
        let w = tape.param(&layer.w);
        let b = tape.param(&layer.b);
        dec_vars.push((w, b));
        cur = tape.nearest_upsample(cur, 2);
        cur = tape.concat_channels(cur, skip)?;
        cur = tape.conv2d(cur, w, b, 1, 1)?;
        cur = tape.relu(cur);
    }
    let hw = tape.param(&params.head.w);
    let hb = tape.param(&params.head.b);
    let logits = tape.conv2d(cur, hw, hb, 1, 0)?;
    Ok((
        logits,
        SegVars {
            enc: enc_vars,
            bottleneck: (bw, bb),
            dec: dec_vars,
            head: (hw, hb),
        },
    ))
}
