//! Run configuration, read from TOML.
//!
//! Every key has a default, so an empty file is a valid config. Two
//! environment variables override the file: `MGAN_SEED` and `MGAN_RUN_DIR`.
//!
//! ```toml
//! seed = 0
//! run_dir = "runs/default"
//!
//! [data]
//! train_dir = "data/train"
//! val_dir = "data/val"
//!
//! [model]
//! channels = 32        # backbone / RoI feature depth C
//! roi_size = 7
//! fc_width = 128
//! # attention = true   # defaults to alpha > 0
//! rpn_emulation = false
//!
//! [loss]
//! alpha = 0.5
//! beta = 1.0
//! mask_mode = "coarse" # or "dense"
//!
//! [optim]
//! kind = "adam"
//! beta1 = 0.9
//! beta2 = 0.999
//! eps = 1e-8
//! schedule = [{ epochs = 8, lr = 1e-4 }, { epochs = 3, lr = 1e-5 }]
//!
//! [train]
//! batch_size = 2
//! positives_per_image = 4
//! negatives_per_image = 12
//! ```
//!
//! The remaining keys of `[train]`, `[detect]` and `[eval]` are listed on
//! the corresponding structs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::detector::SamplerConfig;
use crate::error::{Error, Result};
use crate::losses::{DEFAULT_ALPHA, DEFAULT_BETA};

pub const ENV_SEED: &str = "MGAN_SEED";
pub const ENV_RUN_DIR: &str = "MGAN_RUN_DIR";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Cells inside the visible box.
    Coarse,
    /// Cells on visible silhouette pixels.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub train_dir: PathBuf,
    pub val_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_dir: "data/train".into(),
            val_dir: "data/val".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub roi_size: usize,
    pub fc_width: usize,
    /// RoI Align samples per bin along each axis.
    pub roi_sampling: usize,
    /// Whether RoI features pass through the attention branch. Unset means
    /// "on exactly when alpha > 0".
    pub attention: Option<bool>,
    pub rpn_emulation: bool,
    /// Regression targets are divided by these before the loss.
    pub delta_std: [f64; 4],
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            roi_size: 7,
            fc_width: 128,
            roi_sampling: 2,
            attention: None,
            rpn_emulation: false,
            delta_std: [0.1, 0.1, 0.2, 0.2],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub mask_mode: MaskMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
            mask_mode: MaskMode::Coarse,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Phase {
    pub epochs: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    /// Only "adam" is implemented.
    pub kind: String,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Vec<Phase>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            kind: "adam".into(),
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: vec![Phase { epochs: 8, lr: 1e-4 }, Phase { epochs: 3, lr: 1e-5 }],
        }
    }
}

impl OptimConfig {
    pub fn total_epochs(&self) -> usize {
        self.schedule.iter().map(|p| p.epochs).sum()
    }

    /// Learning rate of the zero-based `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let mut end = 0;
        for p in &self.schedule {
            end += p.epochs;
            if epoch < end {
                return p.lr;
            }
        }
        self.schedule.last().map_or(0.0, |p| p.lr)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub positives_per_image: usize,
    pub negatives_per_image: usize,
    /// Annotations usable as positive sources; others only constrain
    /// negatives.
    pub positive_min_visibility: f64,
    pub positive_min_height: f64,
    pub sampler: SamplerConfig,
    /// Write a checkpoint after every epoch.
    pub checkpoint_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 2,
            positives_per_image: 4,
            negatives_per_image: 12,
            positive_min_visibility: 0.0,
            positive_min_height: 0.0,
            sampler: SamplerConfig::default(),
            checkpoint_every_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    /// Heights of the test-time proposal lattice.
    pub heights: Vec<f64>,
    pub aspect: f64,
    /// Lattice step as a fraction of box size.
    pub step_frac: f64,
    pub apply_regression: bool,
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub max_per_image: usize,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            heights: vec![48.0, 56.0, 64.0, 72.0, 80.0, 88.0],
            aspect: 0.41,
            step_frac: 0.25,
            apply_regression: true,
            score_threshold: 0.01,
            nms_iou: 0.5,
            max_per_image: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Any of "R", "HO", "R+HO".
    pub subsets: Vec<String>,
    pub iou_threshold: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            subsets: vec!["R".into(), "HO".into(), "R+HO".into()],
            iou_threshold: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub detect: DetectConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            run_dir: "runs/default".into(),
            data: DataConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            detect: DetectConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, then applies environment overrides.
    pub fn load(path: &Path) -> Result<Self> {
        Self::load_with_overrides(path, &[])
    }

    /// Parses `text` after setting each `dotted.key=value` override. Values
    /// are read as TOML (`3`, `1e-4`, `true`, `[48.0, 64.0]`); anything else
    /// is taken as a string.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut root: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
                .ok()
                .and_then(|mut t| t.remove("v"))
                .unwrap_or_else(|| toml::Value::String(raw.to_string()));
            set_key(&mut root, key.trim(), value)?;
        }
        let cfg: RunConfig = root
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies environment overrides, then `overrides`.
    pub fn load_with_overrides(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.apply_env()?;
        cfg.validate()?;
        if overrides.is_empty() {
            return Ok(cfg);
        }
        Self::from_toml_with_overrides(&cfg.to_toml(), overrides)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(ENV_SEED) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{ENV_SEED}={v:?} is not an unsigned integer")))?;
        }
        if let Ok(v) = std::env::var(ENV_RUN_DIR) {
            self.run_dir = v.into();
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Whether the attention branch is active.
    pub fn attention_enabled(&self) -> bool {
        self.model.attention.unwrap_or(self.loss.alpha > 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, why: String| Err(Error::Config(format!("{field}: {why}")));
        if self.seed > i64::MAX as u64 {
            return bad("seed", format!("{} does not fit a TOML integer", self.seed));
        }
        let m = &self.model;
        if m.channels == 0 || m.roi_size == 0 || m.fc_width == 0 || m.roi_sampling == 0 {
            return bad("model", "channels, roi_size, fc_width and roi_sampling must be positive".into());
        }
        if m.delta_std.iter().any(|s| !(*s > 0.0)) {
            return bad("model.delta_std", "entries must be positive".into());
        }
        for (k, v) in [("loss.alpha", self.loss.alpha), ("loss.beta", self.loss.beta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(k, format!("must be a finite non-negative number, got {v}"));
            }
        }
        let o = &self.optim;
        if o.kind != "adam" {
            return bad("optim.kind", format!("unsupported optimizer {:?}; only \"adam\"", o.kind));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.eps > 0.0) {
            return bad("optim", "need 0 <= beta1, beta2 < 1 and eps > 0".into());
        }
        if o.schedule.is_empty() || o.schedule.iter().any(|p| !(p.lr > 0.0)) {
            return bad("optim.schedule", "needs at least one phase with positive lr".into());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return bad("train.batch_size", "must be positive".into());
        }
        if t.positives_per_image + t.negatives_per_image == 0 {
            return bad("train", "no proposals per image".into());
        }
        let d = &self.detect;
        if d.heights.is_empty() || d.heights.iter().any(|h| !(*h > 0.0)) {
            return bad("detect.heights", "need positive heights".into());
        }
        if !(d.nms_iou > 0.0 && d.nms_iou < 1.0) {
            return bad("detect.nms_iou", format!("{} outside (0, 1)", d.nms_iou));
        }
        for s in &self.eval.subsets {
            crate::eval::SubsetSpec::by_name(s).map_err(|e| Error::Config(format!("eval.subsets: {e}")))?;
        }
        Ok(())
    }
}

/// Sets `root[a][b]...[last] = value` for the dotted `key`.
fn set_key(root: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("empty key in override {key:?}")))?;
    let mut table = root;
    for p in parts {
        table = table
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a section")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}
