//! Run configuration: one JSON document, dotted-path overrides, validated as a
//! whole before anything runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AugmentPolicy, Transform};
use crate::datahub::synthetic::SceneConfig;
use crate::datahub::{Split, DATA_ROOT_ENV};
use crate::dethead::{HeadConfig, LossConfig, Paradigm};
use crate::fusion::FusionConfig;
use crate::textenc::TextEncoderConfig;
use crate::visenc::{BackboneConfig, BackboneKind};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {message}")]
    Invalid { path: String, message: String },
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn at(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Invalid { path: path.into(), message: message.into() }
    }

    pub fn path(&self) -> Option<&str> {
        match self {
            Self::Invalid { path, .. } => Some(path),
            Self::Io { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticData {
    pub train: usize,
    pub val: usize,
    pub scene: SceneConfig,
    pub seed: u64,
}

impl Default for SyntheticData {
    fn default() -> Self {
        Self { train: 16, val: 16, scene: SceneConfig::default(), seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Relative paths resolve against `$SIMREC_DATA_ROOT`, else the working directory.
    pub train_manifest: Option<PathBuf>,
    /// Defaults to `train_manifest` (one manifest holding every split).
    pub val_manifest: Option<PathBuf>,
    pub train_split: Split,
    pub val_split: Split,
    /// Generated scenes instead of manifests.
    pub synthetic: Option<SyntheticData>,
    pub batch_size: usize,
    /// Evaluate on the training samples themselves (overfit checks).
    pub eval_on_train: bool,
    pub max_train_samples: Option<usize>,
    pub vocab_min_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_manifest: None,
            val_manifest: None,
            train_split: Split::Train,
            val_split: Split::Val,
            synthetic: None,
            batch_size: 32,
            eval_on_train: false,
            max_train_samples: None,
            vocab_min_count: 1,
        }
    }
}

/// Backbone settings; input side and scale count live at the top level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VisencConfig {
    pub kind: BackboneKind,
    pub freeze: bool,
    pub stage_channels: [usize; 5],
    pub weights: Option<PathBuf>,
}

impl Default for VisencConfig {
    fn default() -> Self {
        let b = BackboneConfig::default();
        Self { kind: b.kind, freeze: b.freeze, stage_channels: b.stage_channels, weights: b.weights }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Step,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub kind: ScheduleKind,
    pub step_epochs: Vec<usize>,
    pub step_factor: f64,
    pub total_epochs: usize,
    pub warmup_steps: usize,
    /// Cosine floor as a fraction of `base_lr`.
    pub min_lr_ratio: f64,
    /// Stop after this many optimizer steps (desk-scale runs).
    pub max_steps: Option<usize>,
    /// Run the eval hook every this many epochs (and after the last step).
    pub eval_every: usize,
    pub grad_clip: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-4,
            kind: ScheduleKind::Step,
            step_epochs: vec![35, 37, 39],
            step_factor: 0.1,
            total_epochs: 40,
            warmup_steps: 0,
            min_lr_ratio: 0.01,
            max_steps: None,
            eval_every: 1,
            grad_clip: Some(5.0),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmaConfig {
    pub enabled: bool,
    pub decay: f64,
    /// Ramp the decay as `min(decay, (1+t)/(10+t))`.
    pub warmup: bool,
}

impl Default for EmaConfig {
    fn default() -> Self {
        Self { enabled: false, decay: 0.9998, warmup: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub augment: AugmentPolicy,
    pub textenc: TextEncoderConfig,
    pub visenc: VisencConfig,
    pub fusion: FusionConfig,
    pub head: HeadConfig,
    pub loss: LossConfig,
    pub schedule: ScheduleConfig,
    pub ema: EmaConfig,
    pub seed: u64,
    pub resolution: usize,
    pub scales_used: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            augment: AugmentPolicy::default(),
            textenc: TextEncoderConfig::default(),
            visenc: VisencConfig::default(),
            fusion: FusionConfig::default(),
            head: HeadConfig::default(),
            loss: LossConfig::default(),
            schedule: ScheduleConfig::default(),
            ema: EmaConfig::default(),
            seed: 0,
            resolution: 416,
            scales_used: 3,
        }
    }
}

/// Resolve a relative path against the data root (or leave it relative to the cwd).
pub fn data_path(p: &Path) -> PathBuf {
    if p.is_absolute() {
        return p.to_owned();
    }
    match std::env::var(DATA_ROOT_ENV) {
        Ok(root) if !root.is_empty() => Path::new(&root).join(p),
        _ => p.to_owned(),
    }
}

impl RunConfig {
    pub fn from_json_str(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::at(if path == "." { "<root>".to_owned() } else { path }, e.into_inner().to_string())
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        Self::from_json_str(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    /// sha256 of the compact JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig {
            kind: self.visenc.kind,
            resolution: self.resolution,
            scales_used: self.scales_used,
            freeze: self.visenc.freeze,
            stage_channels: self.visenc.stage_channels,
            weights: self.visenc.weights.as_deref().map(data_path),
        }
    }

    /// Apply `a.b.c=value` overrides in order. The value is parsed as JSON and
    /// taken as a plain string when that fails.
    pub fn with_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self, ConfigError> {
        let mut doc = serde_json::to_value(self).expect("config serializes");
        for o in overrides {
            let o = o.as_ref();
            let (path, raw) = o.split_once('=').ok_or_else(|| ConfigError::at(o, "override must look like path=value"))?;
            let path = path.trim();
            let value = serde_json::from_str::<Value>(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_owned()));
            set_path(&mut doc, path, value)?;
        }
        let text = serde_json::to_string(&doc).expect("value serializes");
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<Vec<String>, ConfigError> {
        let warnings = self.augment.validate().map_err(|e| ConfigError::at("augment.transforms", e.to_string()))?;
        for (i, e) in self.augment.transforms.iter().enumerate() {
            if let Transform::RandomResize { snap, .. } = e.transform {
                if snap % 32 != 0 {
                    return Err(ConfigError::at(format!("augment.transforms.{i}.transform.snap"), "must be a multiple of the backbone stride 32"));
                }
            }
        }
        self.textenc.validate().map_err(|m| ConfigError::at("textenc", m))?;
        if self.textenc.external_encoder.is_some() {
            return Err(ConfigError::at("textenc.external_encoder", "no external token encoders are registered in this build"));
        }
        if self.resolution == 0 || !self.resolution.is_multiple_of(32) {
            return Err(ConfigError::at("resolution", format!("{} is not a positive multiple of 32", self.resolution)));
        }
        if !(1..=4).contains(&self.scales_used) {
            return Err(ConfigError::at("scales_used", format!("{} outside 1..=4", self.scales_used)));
        }
        if self.visenc.stage_channels.contains(&0) {
            return Err(ConfigError::at("visenc.stage_channels", "entries must be positive"));
        }
        if self.visenc.kind == BackboneKind::External && self.visenc.weights.is_none() {
            return Err(ConfigError::at("visenc.weights", "required when visenc.kind is external"));
        }
        if self.fusion.dim == 0 {
            return Err(ConfigError::at("fusion.dim", "must be positive"));
        }
        if self.fusion.head_per_scale && self.scales_used == 1 {
            return Err(ConfigError::at("fusion.head_per_scale", "needs scales_used > 1"));
        }
        if self.head.paradigm == Paradigm::AnchorFree && self.head.anchor_file.is_some() {
            return Err(ConfigError::at("head.anchor_file", "set while head.paradigm is anchor_free"));
        }
        self.head.validate().map_err(|e| ConfigError::at("head", e.to_string()))?;
        self.loss.validate().map_err(|m| ConfigError::at("loss", m))?;
        if self.loss.dual_target && !self.augment.needs_partner() {
            return Err(ConfigError::at("loss.dual_target", "needs mixup or cutmix in augment.transforms"));
        }
        self.validate_schedule()?;
        if !(0.0..1.0).contains(&self.ema.decay) {
            return Err(ConfigError::at("ema.decay", "must lie in [0, 1)"));
        }
        self.validate_data()?;
        Ok(warnings)
    }

    fn validate_schedule(&self) -> Result<(), ConfigError> {
        let s = &self.schedule;
        if !(s.base_lr > 0.0 && s.base_lr.is_finite()) {
            return Err(ConfigError::at("schedule.base_lr", "must be positive"));
        }
        if s.total_epochs == 0 {
            return Err(ConfigError::at("schedule.total_epochs", "must be positive"));
        }
        if s.step_epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ConfigError::at("schedule.step_epochs", "must be strictly increasing"));
        }
        if s.step_epochs.iter().any(|&e| e >= s.total_epochs) {
            return Err(ConfigError::at("schedule.step_epochs", format!("milestones must be below total_epochs {}", s.total_epochs)));
        }
        if !(s.step_factor > 0.0 && s.step_factor <= 1.0) {
            return Err(ConfigError::at("schedule.step_factor", "must lie in (0, 1]"));
        }
        if !(0.0..=1.0).contains(&s.min_lr_ratio) {
            return Err(ConfigError::at("schedule.min_lr_ratio", "must lie in [0, 1]"));
        }
        if s.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(ConfigError::at("schedule.grad_clip", "must be positive"));
        }
        if !(0.0..1.0).contains(&s.beta1) || !(0.0..1.0).contains(&s.beta2) || !(s.adam_eps > 0.0) {
            return Err(ConfigError::at("schedule", "need beta1, beta2 in [0, 1) and adam_eps > 0"));
        }
        if s.eval_every == 0 {
            return Err(ConfigError::at("schedule.eval_every", "must be positive"));
        }
        if s.max_steps == Some(0) {
            return Err(ConfigError::at("schedule.max_steps", "must be positive"));
        }
        Ok(())
    }

    fn validate_data(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        if d.batch_size == 0 {
            return Err(ConfigError::at("data.batch_size", "must be positive"));
        }
        match (&d.train_manifest, &d.synthetic) {
            (None, None) => return Err(ConfigError::at("data", "set train_manifest or synthetic")),
            (Some(_), Some(_)) => return Err(ConfigError::at("data.synthetic", "cannot be combined with train_manifest")),
            _ => {}
        }
        if let Some(s) = &d.synthetic {
            if s.train == 0 {
                return Err(ConfigError::at("data.synthetic.train", "must be positive"));
            }
            let sc = &s.scene;
            if sc.min_side == 0 || sc.min_side > sc.max_side || sc.max_side > sc.width.min(sc.height) {
                return Err(ConfigError::at("data.synthetic.scene", "need 0 < min_side <= max_side <= image side"));
            }
        }
        if d.max_train_samples == Some(0) {
            return Err(ConfigError::at("data.max_train_samples", "must be positive"));
        }
        Ok(())
    }
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), ConfigError> {
    if path.is_empty() {
        return Err(ConfigError::at("<root>", "empty override path"));
    }
    let mut cur = doc;
    // sections that were null accept new keys; serde checks them afterwards
    let mut fresh = false;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let here = parts[..=i].join(".");
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if fresh && !map.contains_key(*part) {
                    map.insert((*part).to_owned(), Value::Null);
                }
                let slot = map.get_mut(*part).ok_or_else(|| ConfigError::at(&here, "no such field"))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                fresh = slot.is_null();
                if fresh {
                    *slot = Value::Object(Default::default());
                }
                slot
            }
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| ConfigError::at(&here, "expected a list index"))?;
                let len = items.len();
                let slot = items.get_mut(idx).ok_or_else(|| ConfigError::at(&here, format!("index out of range (len {len})")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(ConfigError::at(parts[..i].join("."), "is not a section")),
        };
    }
    unreachable!("loop returns on the last segment")
}
