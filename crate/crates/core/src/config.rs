//! Flat key=value run configuration: schema-validated parsing, the `desk`
//! and `paper` presets, deterministic echo serialization, and mapping onto
//! the typed pipeline configs. Ranges appear as `name_min` / `name_max`
//! key pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::augment::AugmentConfig;
use crate::detector::DetectorConfig;
use crate::generator::{GeneratorConfig, Normalization};
use crate::training::{DecodeLoss, PipelineConfig, SceneConfig, TrainConfig};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("bad value for `{key}`: `{value}` ({reason})")]
    BadValue { key: String, value: String, reason: String },
    #[error("malformed line {line}: `{text}`")]
    Malformed { line: usize, text: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    U64,
    F64,
    UsizeList,
    U64List,
    Word,
}

/// Registered schema: every legal key with its value kind.
const SCHEMA: &[(&str, Kind)] = &[
    ("gen.n_bits", Kind::U64),
    ("gen.style_dim", Kind::U64),
    ("gen.stage_channels", Kind::UsizeList),
    ("gen.marker_resolution", Kind::U64),
    ("gen.normalization", Kind::Word),
    ("gen.leaky_slope", Kind::F64),
    ("det.grid_side", Kind::U64),
    ("det.c_stem", Kind::U64),
    ("det.c_fpn", Kind::U64),
    ("det.roi_size", Kind::U64),
    ("det.common_dim", Kind::U64),
    ("det.corner_fc1", Kind::U64),
    ("det.corner_fc2", Kind::U64),
    ("det.corner_conv_channels", Kind::U64),
    ("det.decode_fc1", Kind::U64),
    ("det.decode_fc2", Kind::U64),
    ("det.train_proposals", Kind::U64),
    ("det.test_proposals", Kind::U64),
    ("det.score_thresh", Kind::F64),
    ("det.nms_iou", Kind::F64),
    ("det.rpn_nms_iou", Kind::F64),
    ("det.fg_iou", Kind::F64),
    ("det.leaky_slope", Kind::F64),
    ("aug.perspective_jitter", Kind::F64),
    ("aug.rotation_max", Kind::F64),
    ("aug.scale_min", Kind::F64),
    ("aug.scale_max", Kind::F64),
    ("aug.translate_frac", Kind::F64),
    ("aug.radial_k1_min", Kind::F64),
    ("aug.radial_k1_max", Kind::F64),
    ("aug.tps_grid", Kind::U64),
    ("aug.tps_shift_frac", Kind::F64),
    ("aug.blur_prob", Kind::F64),
    ("aug.blur_radius_max", Kind::F64),
    ("aug.motion_len_max", Kind::F64),
    ("aug.noise_sigma_max", Kind::F64),
    ("aug.brightness_min", Kind::F64),
    ("aug.brightness_max", Kind::F64),
    ("aug.gamma_min", Kind::F64),
    ("aug.gamma_max", Kind::F64),
    ("aug.hue_max", Kind::F64),
    ("aug.jpeg_prob", Kind::F64),
    ("aug.jpeg_quality_min", Kind::U64),
    ("aug.jpeg_quality_max", Kind::U64),
    ("scene.width", Kind::U64),
    ("scene.height", Kind::U64),
    ("scene.margin", Kind::F64),
    ("scene.layouts", Kind::UsizeList),
    ("scene.specular_prob", Kind::F64),
    ("scene.roughness_min", Kind::F64),
    ("scene.roughness_max", Kind::F64),
    ("scene.specular_albedo", Kind::F64),
    ("scene.intensity_max", Kind::F64),
    ("train.steps", Kind::U64),
    ("train.lr", Kind::F64),
    ("train.momentum", Kind::F64),
    ("train.grad_clip", Kind::F64),
    ("train.decay_steps", Kind::U64List),
    ("train.decay_factor", Kind::F64),
    ("train.messages_per_iter", Kind::U64),
    ("train.scenes_per_iter", Kind::U64),
    ("train.max_fg_rois", Kind::U64),
    ("train.max_bg_rois", Kind::U64),
    ("train.rpn_fg_iou", Kind::F64),
    ("train.rpn_bg_iou", Kind::F64),
    ("train.rpn_batch_per_class", Kind::U64),
    ("train.w_corner", Kind::F64),
    ("train.decode_loss", Kind::Word),
    ("train.clamp_decay", Kind::F64),
    ("train.clamp_warmup", Kind::U64),
    ("train.seed", Kind::U64),
    ("identify.threshold", Kind::F64),
    ("preset", Kind::Word),
];

fn schema_kind(key: &str) -> Option<Kind> {
    SCHEMA.iter().find(|(k, _)| *k == key).map(|&(_, v)| v)
}

/// Merged flat settings; later `set` calls override earlier values.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    entries: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parse `key = value` lines; `#` comments and blanks allowed.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Malformed {
                line: i + 1,
                text: raw.to_string(),
            })?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let kind = schema_kind(key).ok_or_else(|| ConfigError::UnknownKey(key.to_string()))?;
        validate_value(key, value, kind)?;
        self.entries.insert(key.to_string(), value.to_string());
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    /// Overlay `other` on top of `self`.
    pub fn merge(&mut self, other: &RunConfig) {
        for (k, v) in &other.entries {
            self.entries.insert(k.clone(), v.clone());
        }
    }

    /// Canonical serialization: sorted keys, one `key = value` per line.
    /// Written next to every artifact; reparsing reproduces the run.
    pub fn echo(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.entries {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    fn u64_or(&self, key: &str, default: u64) -> u64 {
        self.get(key).map(|v| v.parse().unwrap()).unwrap_or(default)
    }

    fn usize_or(&self, key: &str, default: usize) -> usize {
        self.u64_or(key, default as u64) as usize
    }

    fn f64_or(&self, key: &str, default: f64) -> f64 {
        self.get(key).map(|v| v.parse().unwrap()).unwrap_or(default)
    }

    fn usize_list_or(&self, key: &str, default: &[usize]) -> Vec<usize> {
        self.get(key)
            .map(|v| v.split(',').map(|t| t.trim().parse().unwrap()).collect())
            .unwrap_or_else(|| default.to_vec())
    }

    pub fn identify_threshold(&self) -> f64 {
        self.f64_or("identify.threshold", 0.8)
    }

    /// Build typed pipeline configuration: module defaults overridden by any
    /// set keys, then cross-checked.
    pub fn to_pipeline(&self) -> Result<PipelineConfig, ConfigError> {
        let gd = GeneratorConfig::default();
        let gen = GeneratorConfig {
            n_bits: self.usize_or("gen.n_bits", gd.n_bits),
            style_dim: self.usize_or("gen.style_dim", gd.style_dim),
            stage_channels: self.usize_list_or("gen.stage_channels", &gd.stage_channels),
            marker_resolution: self.usize_or("gen.marker_resolution", gd.marker_resolution),
            normalization: match self.get("gen.normalization").unwrap_or("adain_zero_pad") {
                "none" => Normalization::None,
                "pixel_norm" => Normalization::PixelNorm,
                "adain_zero_pad" => Normalization::AdainZeroPad,
                "adain_replicate" => Normalization::AdainReplicate,
                other => {
                    return Err(ConfigError::BadValue {
                        key: "gen.normalization".into(),
                        value: other.into(),
                        reason: "expected none|pixel_norm|adain_zero_pad|adain_replicate".into(),
                    })
                }
            },
            leaky_slope: self.f64_or("gen.leaky_slope", gd.leaky_slope),
        };
        let expect_res = 4usize << gen.stages();
        if gen.marker_resolution != expect_res {
            return Err(ConfigError::Invalid(format!(
                "marker_resolution {} does not match {} stage channels (expects {expect_res})",
                gen.marker_resolution,
                gen.stage_channels.len()
            )));
        }
        let dd = DetectorConfig::default();
        let det = DetectorConfig {
            n_bits: gen.n_bits,
            grid_side: self.usize_or("det.grid_side", dd.grid_side),
            c_stem: self.usize_or("det.c_stem", dd.c_stem),
            c_fpn: self.usize_or("det.c_fpn", dd.c_fpn),
            roi_size: self.usize_or("det.roi_size", dd.roi_size),
            common_dim: self.usize_or("det.common_dim", dd.common_dim),
            corner_fc: (
                self.usize_or("det.corner_fc1", dd.corner_fc.0),
                self.usize_or("det.corner_fc2", dd.corner_fc.1),
            ),
            corner_conv_channels: self
                .usize_or("det.corner_conv_channels", dd.corner_conv_channels),
            decode_hidden: (
                self.usize_or("det.decode_fc1", dd.decode_hidden.0),
                self.usize_or("det.decode_fc2", dd.decode_hidden.1),
            ),
            train_proposals: self.usize_or("det.train_proposals", dd.train_proposals),
            test_proposals: self.usize_or("det.test_proposals", dd.test_proposals),
            score_thresh: self.f64_or("det.score_thresh", dd.score_thresh),
            nms_iou: self.f64_or("det.nms_iou", dd.nms_iou),
            rpn_nms_iou: self.f64_or("det.rpn_nms_iou", dd.rpn_nms_iou),
            fg_iou: self.f64_or("det.fg_iou", dd.fg_iou),
            leaky_slope: self.f64_or("det.leaky_slope", dd.leaky_slope),
        };
        let ad = AugmentConfig::default();
        let aug = AugmentConfig {
            perspective_jitter: self.f64_or("aug.perspective_jitter", ad.perspective_jitter),
            rotation_max: self.f64_or("aug.rotation_max", ad.rotation_max),
            scale_min: self.f64_or("aug.scale_min", ad.scale_min),
            scale_max: self.f64_or("aug.scale_max", ad.scale_max),
            translate_frac: self.f64_or("aug.translate_frac", ad.translate_frac),
            radial_k1_min: self.f64_or("aug.radial_k1_min", ad.radial_k1_min),
            radial_k1_max: self.f64_or("aug.radial_k1_max", ad.radial_k1_max),
            tps_grid: self.usize_or("aug.tps_grid", ad.tps_grid),
            tps_shift_frac: self.f64_or("aug.tps_shift_frac", ad.tps_shift_frac),
            blur_prob: self.f64_or("aug.blur_prob", ad.blur_prob),
            blur_radius_max: self.f64_or("aug.blur_radius_max", ad.blur_radius_max),
            motion_len_max: self.f64_or("aug.motion_len_max", ad.motion_len_max),
            noise_sigma_max: self.f64_or("aug.noise_sigma_max", ad.noise_sigma_max),
            brightness_min: self.f64_or("aug.brightness_min", ad.brightness_min),
            brightness_max: self.f64_or("aug.brightness_max", ad.brightness_max),
            gamma_min: self.f64_or("aug.gamma_min", ad.gamma_min),
            gamma_max: self.f64_or("aug.gamma_max", ad.gamma_max),
            hue_max: self.f64_or("aug.hue_max", ad.hue_max),
            jpeg_prob: self.f64_or("aug.jpeg_prob", ad.jpeg_prob),
            jpeg_quality_min: self.u64_or("aug.jpeg_quality_min", ad.jpeg_quality_min as u64)
                as u32,
            jpeg_quality_max: self.u64_or("aug.jpeg_quality_max", ad.jpeg_quality_max as u64)
                as u32,
        };
        aug.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let sd = SceneConfig::default();
        let scene = SceneConfig {
            width: self.usize_or("scene.width", sd.width),
            height: self.usize_or("scene.height", sd.height),
            margin: self.f64_or("scene.margin", sd.margin),
            layouts: self.usize_list_or("scene.layouts", &sd.layouts),
            specular_prob: self.f64_or("scene.specular_prob", sd.specular_prob),
            roughness_min: self.f64_or("scene.roughness_min", sd.roughness_min),
            roughness_max: self.f64_or("scene.roughness_max", sd.roughness_max),
            specular_albedo: self.f64_or("scene.specular_albedo", sd.specular_albedo),
            intensity_max: self.f64_or("scene.intensity_max", sd.intensity_max),
        };
        let td = TrainConfig::default();
        let decay_steps = self
            .get("train.decay_steps")
            .map(|v| v.split(',').map(|t| t.trim().parse().unwrap()).collect())
            .unwrap_or_else(|| td.decay_steps.clone());
        let train = TrainConfig {
            steps: self.u64_or("train.steps", td.steps),
            lr: self.f64_or("train.lr", td.lr),
            momentum: self.f64_or("train.momentum", td.momentum),
            grad_clip: self.f64_or("train.grad_clip", td.grad_clip),
            decay_steps,
            decay_factor: self.f64_or("train.decay_factor", td.decay_factor),
            messages_per_iter: self.usize_or("train.messages_per_iter", td.messages_per_iter),
            scenes_per_iter: self.usize_or("train.scenes_per_iter", td.scenes_per_iter),
            max_fg_rois: self.usize_or("train.max_fg_rois", td.max_fg_rois),
            max_bg_rois: self.usize_or("train.max_bg_rois", td.max_bg_rois),
            rpn_fg_iou: self.f64_or("train.rpn_fg_iou", td.rpn_fg_iou),
            rpn_bg_iou: self.f64_or("train.rpn_bg_iou", td.rpn_bg_iou),
            rpn_batch_per_class: self
                .usize_or("train.rpn_batch_per_class", td.rpn_batch_per_class),
            w_corner: self.f64_or("train.w_corner", td.w_corner),
            decode_loss: match self.get("train.decode_loss").unwrap_or("l2") {
                "l2" => DecodeLoss::SquaredSigmoid,
                "bce" => DecodeLoss::Bce,
                other => {
                    return Err(ConfigError::BadValue {
                        key: "train.decode_loss".into(),
                        value: other.into(),
                        reason: "expected l2|bce".into(),
                    })
                }
            },
            clamp_decay: self.f64_or("train.clamp_decay", td.clamp_decay),
            clamp_warmup: self.u64_or("train.clamp_warmup", td.clamp_warmup),
            seed: self.u64_or("train.seed", td.seed),
        };
        Ok(PipelineConfig { gen, det, aug, scene, train })
    }
}

fn validate_value(key: &str, value: &str, kind: Kind) -> Result<(), ConfigError> {
    let bad = |reason: &str| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.to_string(),
    };
    match kind {
        Kind::U64 => value.parse::<u64>().map(|_| ()).map_err(|_| bad("expected integer")),
        Kind::F64 => value
            .parse::<f64>()
            .ok()
            .filter(|v| v.is_finite())
            .map(|_| ())
            .ok_or_else(|| bad("expected finite number")),
        Kind::UsizeList | Kind::U64List => {
            if value.split(',').all(|t| t.trim().parse::<u64>().is_ok()) {
                Ok(())
            } else {
                Err(bad("expected comma-separated integers"))
            }
        }
        Kind::Word => {
            if !value.is_empty() && value.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
                Ok(())
            } else {
                Err(bad("expected a bare word"))
            }
        }
    }
}

/// Small-scale preset for commodity hardware: 8-bit messages, 16x16 markers,
/// 256x256 scenes, 2000 steps, mild augmentation. A distinct named config —
/// never a stand-in for the full-scale preset.
pub fn preset_desk() -> RunConfig {
    let mut c = RunConfig::new();
    for (k, v) in [
        ("preset", "desk"),
        ("gen.n_bits", "8"),
        ("gen.style_dim", "16"),
        ("gen.stage_channels", "8,6,4"),
        ("gen.marker_resolution", "16"),
        ("det.grid_side", "3"),
        ("det.c_stem", "12"),
        ("det.c_fpn", "16"),
        ("det.roi_size", "4"),
        ("det.common_dim", "48"),
        ("det.corner_fc1", "32"),
        ("det.corner_fc2", "24"),
        ("det.corner_conv_channels", "8"),
        ("det.decode_fc1", "64"),
        ("det.decode_fc2", "48"),
        ("det.train_proposals", "24"),
        ("det.test_proposals", "24"),
        ("aug.perspective_jitter", "0.04"),
        ("aug.rotation_max", "0.1"),
        ("aug.scale_min", "0.9"),
        ("aug.scale_max", "1.1"),
        ("aug.translate_frac", "0.03"),
        ("aug.radial_k1_min", "-0.05"),
        ("aug.radial_k1_max", "0.03"),
        ("aug.tps_shift_frac", "0.04"),
        ("aug.blur_prob", "0.15"),
        ("aug.noise_sigma_max", "0.01"),
        ("aug.brightness_min", "0.85"),
        ("aug.brightness_max", "1.15"),
        ("aug.gamma_min", "0.9"),
        ("aug.gamma_max", "1.1"),
        ("aug.hue_max", "0.2"),
        ("aug.jpeg_prob", "0.1"),
        ("aug.jpeg_quality_min", "60"),
        ("aug.jpeg_quality_max", "95"),
        ("scene.width", "256"),
        ("scene.height", "256"),
        ("scene.layouts", "0,1,2"),
        ("train.steps", "2000"),
        ("train.lr", "0.02"),
        ("train.grad_clip", "5"),
        ("train.decay_steps", "1500,1850"),
        ("train.messages_per_iter", "8"),
        ("train.scenes_per_iter", "4"),
        ("train.max_fg_rois", "8"),
        ("train.max_bg_rois", "8"),
        ("train.rpn_batch_per_class", "16"),
        ("train.w_corner", "1.0"),
        ("train.decode_loss", "bce"),
        ("train.seed", "1"),
    ] {
        c.set(k, v).expect("preset keys are schema-valid");
    }
    c
}

/// Full-scale preset mirroring the published training recipe: 36-bit
/// messages, 32x32 markers, 35000 steps with decay at 20000 and 30000.
pub fn preset_paper() -> RunConfig {
    let mut c = RunConfig::new();
    for (k, v) in [
        ("preset", "paper"),
        ("gen.n_bits", "36"),
        ("gen.style_dim", "256"),
        ("gen.stage_channels", "16,8,6,6"),
        ("gen.marker_resolution", "32"),
        ("det.grid_side", "9"),
        ("train.steps", "35000"),
        ("train.decay_steps", "20000,30000"),
        ("train.scenes_per_iter", "16"),
    ] {
        c.set(k, v).expect("preset keys are schema-valid");
    }
    c
}

pub fn preset(name: &str) -> Result<RunConfig, ConfigError> {
    match name {
        "desk" => Ok(preset_desk()),
        "paper" => Ok(preset_paper()),
        other => Err(ConfigError::BadValue {
            key: "preset".into(),
            value: other.into(),
            reason: "expected desk|paper".into(),
        }),
    }
}
