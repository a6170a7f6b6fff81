//! Line-based `key = value` run configuration with section prefixes.
//! Unknown keys are rejected so typos cannot silently fall back to defaults.

use thiserror::Error;

use crate::featuremap::{MapLayout, OverflowPolicy};
use crate::models::ArchConfig;
use crate::preprocess::AugConfig;
use crate::synth::SlideGenConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("invalid value for {key:?}: {reason}")]
    BadValue { key: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    /// Millimeters per map cell, for lesion-size classes.
    pub cell_mm: f64,
    /// Compute slide classes, pN stages and kappa (needs a multiple of 5
    /// slides in the evaluated split).
    pub patient_level: bool,
    /// Which split predict/eval work on: train | val | test | all.
    pub split: String,
}

fn default_predict_model() -> String {
    "auto".into()
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            cell_mm: 0.5,
            patient_level: true,
            split: "test".into(),
        }
    }
}

/// Everything one pipeline run needs; fully echoed into run manifests.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub n_slides: usize,
    /// One feature map per tissue lump, or one whole-slide map.
    pub per_lump: bool,
    /// `error` or `crop`: what to do when tissue exceeds the map.
    pub overflow: OverflowPolicy,
    pub tissue_frac: f64,
    pub synth: SlideGenConfig,
    pub arch: ArchConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    /// Which checkpoints `predict` uses: auto | separate | e2e.
    pub predict_model: String,
    /// Augmentation switches for the patch-training stage.
    pub aug_random_crop: bool,
    pub aug_rotate: bool,
    pub aug_flip: bool,
    pub aug_color_jitter: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            n_slides: 100,
            per_lump: true,
            overflow: OverflowPolicy::Error,
            tissue_frac: 0.8,
            synth: SlideGenConfig::default(),
            arch: ArchConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            predict_model: default_predict_model(),
            aug_random_crop: true,
            aug_rotate: true,
            aug_flip: true,
            aug_color_jitter: true,
        }
    }
}

impl RunConfig {
    pub fn map_layout(&self) -> MapLayout {
        MapLayout {
            per_lump: self.per_lump,
            overflow: self.overflow,
        }
    }

    /// Training-time augmentation; crop size comes from the arch.
    pub fn train_aug(&self) -> AugConfig {
        AugConfig {
            crop_size: self.arch.crop_size,
            random_crop: self.aug_random_crop,
            rotate: self.aug_rotate,
            flip: self.aug_flip,
            color_jitter: self.aug_color_jitter,
        }
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let mut kv = Vec::new();
        kv.push(("seed".into(), self.seed.to_string()));
        kv.push(("n_slides".into(), self.n_slides.to_string()));
        kv.push(("per_lump".into(), self.per_lump.to_string()));
        let overflow = match self.overflow {
            OverflowPolicy::Error => "error",
            OverflowPolicy::Crop => "crop",
        };
        kv.push(("overflow".into(), overflow.to_string()));
        kv.push(("pre.tissue_frac".into(), self.tissue_frac.to_string()));
        kv.push(("pre.random_crop".into(), self.aug_random_crop.to_string()));
        kv.push(("pre.rotate".into(), self.aug_rotate.to_string()));
        kv.push(("pre.flip".into(), self.aug_flip.to_string()));
        kv.push(("pre.color_jitter".into(), self.aug_color_jitter.to_string()));
        self.synth.write_kv("synth.", &mut kv);
        self.arch.write_kv("arch.", &mut kv);
        self.train.write_kv("train.", &mut kv);
        kv.push(("eval.cell_mm".into(), self.eval.cell_mm.to_string()));
        kv.push(("eval.patient_level".into(), self.eval.patient_level.to_string()));
        kv.push(("eval.split".into(), self.eval.split.clone()));
        kv.push(("predict.model".into(), self.predict_model.clone()));
        kv
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# tileseg run configuration\n");
        for (k, v) in self.to_kv() {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    /// Apply one `key = value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let bad = |key: &str, reason: &str| ConfigError::BadValue {
            key: key.to_string(),
            reason: reason.to_string(),
        };
        if let Some(rest) = key.strip_prefix("synth.") {
            return self
                .synth
                .apply_kv(rest, value)
                .map_err(|e| bad(key, &e));
        }
        if let Some(rest) = key.strip_prefix("arch.") {
            return self.arch.apply_kv(rest, value).map_err(|e| bad(key, &e));
        }
        if let Some(rest) = key.strip_prefix("train.") {
            return self.train.apply_kv(rest, value).map_err(|e| bad(key, &e));
        }
        match key {
            "seed" => self.seed = value.parse().map_err(|_| bad(key, "want u64"))?,
            "n_slides" => self.n_slides = value.parse().map_err(|_| bad(key, "want usize"))?,
            "per_lump" => self.per_lump = value.parse().map_err(|_| bad(key, "want bool"))?,
            "overflow" => {
                self.overflow = match value {
                    "error" => OverflowPolicy::Error,
                    "crop" => OverflowPolicy::Crop,
                    _ => return Err(bad(key, "want error|crop")),
                }
            }
            "pre.tissue_frac" => {
                self.tissue_frac = value.parse().map_err(|_| bad(key, "want float"))?
            }
            "pre.random_crop" => {
                self.aug_random_crop = value.parse().map_err(|_| bad(key, "want bool"))?
            }
            "pre.rotate" => self.aug_rotate = value.parse().map_err(|_| bad(key, "want bool"))?,
            "pre.flip" => self.aug_flip = value.parse().map_err(|_| bad(key, "want bool"))?,
            "pre.color_jitter" => {
                self.aug_color_jitter = value.parse().map_err(|_| bad(key, "want bool"))?
            }
            "eval.cell_mm" => {
                self.eval.cell_mm = value.parse().map_err(|_| bad(key, "want float"))?
            }
            "eval.patient_level" => {
                self.eval.patient_level = value.parse().map_err(|_| bad(key, "want bool"))?
            }
            "eval.split" => {
                if !matches!(value, "train" | "val" | "test" | "all") {
                    return Err(bad(key, "want train|val|test|all"));
                }
                self.eval.split = value.to_string();
            }
            "predict.model" => {
                if !matches!(value, "auto" | "separate" | "e2e") {
                    return Err(bad(key, "want auto|separate|e2e"));
                }
                self.predict_model = value.to_string();
            }
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Parse a config file on top of the defaults.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: i + 1,
                reason: format!("expected `key = value`, got {line:?}"),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let back = RunConfig::parse(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            RunConfig::parse("bogus = 1"),
            Err(ConfigError::UnknownKey(_))
        ));
        assert!(RunConfig::parse("train.bogus = 1").is_err());
    }

    #[test]
    fn section_overrides_apply() {
        let text = "train.lr_extractor = 0.01\narch.feature_dim = 8\nsynth.width = 512\n";
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg.train.lr_extractor, 0.01);
        assert_eq!(cfg.arch.feature_dim, 8);
        assert_eq!(cfg.synth.width, 512);
    }

    #[test]
    fn bad_values_name_the_key() {
        match RunConfig::parse("eval.cell_mm = banana") {
            Err(ConfigError::BadValue { key, .. }) => assert_eq!(key, "eval.cell_mm"),
            other => panic!("expected BadValue, got {other:?}"),
        }
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let cfg = RunConfig::parse("# comment\n\nseed = 9\n").unwrap();
        assert_eq!(cfg.seed, 9);
    }
}
