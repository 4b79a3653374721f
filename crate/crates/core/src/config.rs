//! JSON model/training configuration with defaults and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::detection::HeadConfig;
use crate::encoders::EncoderConfig;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Fractions of `epochs` after which the learning rate is multiplied by `lr_gamma`.
    pub lr_steps: Vec<f64>,
    pub lr_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables.
    pub grad_clip: f64,
    pub seed: u64,
    pub hflip: bool,
    /// Evaluate AP50 on the training set every this many epochs; 0 never.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 2,
            lr: 1e-4,
            weight_decay: 0.05,
            lr_steps: vec![0.67, 0.89],
            lr_gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_clip: 1.0,
            seed: 0,
            hflip: false,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    /// Epoch indices after which the learning rate drops.
    pub fn milestones(&self) -> Vec<usize> {
        self.lr_steps
            .iter()
            .map(|f| (f * self.epochs as f64 + 1e-9).floor() as usize)
            .collect()
    }

    /// Learning rate used during `epoch` (1-based).
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestones().iter().filter(|&&m| epoch > m).count();
        self.lr * self.lr_gamma.powi(drops as i32)
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("train.epochs and train.batch_size must be positive"));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.grad_clip >= 0.0) {
            return Err(Error::config("train.lr, train.weight_decay and train.grad_clip must be non-negative"));
        }
        if self.lr_steps.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::config("train.lr_steps must be fractions in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::config("train.beta1/beta2 must lie in [0, 1) and train.eps must be positive"));
        }
        Ok(())
    }
}

/// Per-channel normalization applied after scaling pixels to [0, 1].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessConfig {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Square training/inference resolution.
    pub image_size: usize,
    pub backbone: BackboneConfig,
    pub encoder: EncoderConfig,
    pub head: HeadConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 2,
            image_size: 128,
            backbone: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
            head: HeadConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::config("num_classes must be positive"));
        }
        self.backbone.validate()?;
        self.backbone.validate_input(self.image_size, self.image_size).map_err(|e| {
            Error::config(format!("image_size {} does not fit the backbone: {e}", self.image_size))
        })?;
        self.encoder.validate()?;
        self.head.validate()?;
        self.train.validate()?;
        if self.preprocess.std.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::config("preprocess.std entries must be positive"));
        }
        let cells = (self.image_size / 32).pow(2) * self.head.anchors_per_cell();
        if self.head.match_k > cells {
            return Err(Error::config(format!(
                "head.match_k {} exceeds the {cells} anchors of a {1}x{1} image",
                self.head.match_k,
                self.image_size,
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Reads and validates a JSON config; missing keys take their defaults.
pub fn load_config(path: impl AsRef<Path>) -> Result<ModelConfig> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    let cfg: ModelConfig = serde_json::from_str(&text).map_err(|source| Error::Parse {
        path: path.to_path_buf(),
        source,
    })?;
    cfg.validate()?;
    Ok(cfg)
}
