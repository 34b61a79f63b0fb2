//! Experiment configuration.
//!
//! On disk this is flat `key = value` text with dotted section names, one
//! key per line, `#` comments. Unknown or duplicate keys are errors so a
//! typo can never silently fall back to a default. The canonical rendering
//! (fixed key order) is embedded in checkpoints and must round-trip.

use std::collections::BTreeMap;
use std::path::Path;

use crate::backbone::BackboneConfig;
use crate::data::DatasetConfig;
use crate::error::{Error, Result};
use crate::rng::derive_seed;
use crate::train::{LossConfig, TrainRunConfig};
use crate::vit::{HeadKind, ModelConfig, PatchConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    /// Master seed; every stream (data, inits, batching) derives from it.
    pub seed: u64,
    pub out_dir: String,
    pub data: DatasetConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainRunConfig,
    pub threshold: f64,
    pub eval_head: HeadKind,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            out_dir: "runs".to_string(),
            data: DatasetConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainRunConfig::default(),
            threshold: 0.55,
            eval_head: HeadKind::Distill,
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1)));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.insert(key.clone(), value).is_some() {
                return Err(Error::config(format!("duplicate key '{key}'")));
            }
        }
        let mut cfg = ExperimentConfig::default();
        for (key, value) in &seen {
            cfg.apply(key, value)?;
        }
        // The synthetic data stream is derived from the master seed.
        cfg.data.seed = derive_seed(cfg.seed, "data");
        cfg.validate()?;
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let uint = || -> Result<usize> {
            value.parse().map_err(|_| Error::config(format!("{key}: '{value}' is not an unsigned integer")))
        };
        let real = || -> Result<f64> {
            value.parse().map_err(|_| Error::config(format!("{key}: '{value}' is not a number")))
        };
        let list = || -> Result<Vec<usize>> {
            value
                .split(',')
                .map(|v| v.trim().parse().map_err(|_| Error::config(format!("{key}: '{value}' is not a comma list"))))
                .collect()
        };
        match key {
            "seed" => self.seed = value.parse().map_err(|_| Error::config(format!("seed: '{value}' is not a u64")))?,
            "out_dir" => self.out_dir = value.to_string(),
            "data.count" => self.data.count = uint()?,
            "data.balance" => self.data.balance = real()?,
            "data.min_strength" => self.data.min_strength = real()?,
            "data.max_strength" => self.data.max_strength = real()?,
            "model.image_size" => {
                self.model.patch.image_h = uint()?;
                self.model.patch.image_w = self.model.patch.image_h;
                self.data.image_size = self.model.patch.image_h;
            }
            "model.channels" => {
                self.model.patch.channels = uint()?;
                self.data.channels = self.model.patch.channels;
            }
            "model.patch_size" => self.model.patch.patch_size = uint()?,
            "model.embed_dim" => self.model.patch.embed_dim = uint()?,
            "model.layers" => self.model.layers = uint()?,
            "model.heads" => self.model.heads = uint()?,
            "model.mlp_ratio" => self.model.mlp_ratio = uint()?,
            "backbone.channels" => self.model.backbone.stage_channels = list()?,
            "backbone.strides" => self.model.backbone.strides = list()?,
            "backbone.feature_tokens" => self.model.backbone.feature_tokens = uint()?,
            "backbone.embed_dim" => self.model.backbone.embed_dim = uint()?,
            "loss.lambda" => self.loss.lambda = real()?,
            "train.epochs" => self.train.epochs = uint()?,
            "train.batch_size" => self.train.batch_size = uint()?,
            "train.batches_per_epoch" => self.train.batches_per_epoch = uint()?,
            "train.learning_rate" => self.train.learning_rate = real()?,
            "train.validation_every" => self.train.validation_every = uint()?,
            "eval.threshold" => self.threshold = real()?,
            "eval.head" => self.eval_head = value.parse()?,
            other => return Err(Error::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical rendering: every key, fixed order.
    pub fn to_canonical_string(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "seed = {}\n\
             out_dir = {}\n\
             data.count = {}\n\
             data.balance = {}\n\
             data.min_strength = {}\n\
             data.max_strength = {}\n\
             model.image_size = {}\n\
             model.channels = {}\n\
             model.patch_size = {}\n\
             model.embed_dim = {}\n\
             model.layers = {}\n\
             model.heads = {}\n\
             model.mlp_ratio = {}\n\
             backbone.channels = {}\n\
             backbone.strides = {}\n\
             backbone.feature_tokens = {}\n\
             backbone.embed_dim = {}\n\
             loss.lambda = {}\n\
             train.epochs = {}\n\
             train.batch_size = {}\n\
             train.batches_per_epoch = {}\n\
             train.learning_rate = {}\n\
             train.validation_every = {}\n\
             eval.threshold = {}\n\
             eval.head = {}\n",
            self.seed,
            self.out_dir,
            self.data.count,
            self.data.balance,
            self.data.min_strength,
            self.data.max_strength,
            self.model.patch.image_h,
            self.model.patch.channels,
            self.model.patch.patch_size,
            self.model.patch.embed_dim,
            self.model.layers,
            self.model.heads,
            self.model.mlp_ratio,
            list(&self.model.backbone.stage_channels),
            list(&self.model.backbone.strides),
            self.model.backbone.feature_tokens,
            self.model.backbone.embed_dim,
            self.loss.lambda,
            self.train.epochs,
            self.train.batch_size,
            self.train.batches_per_epoch,
            self.train.learning_rate,
            self.train.validation_every,
            self.threshold,
            self.eval_head.as_str(),
        )
    }

    /// Cross-config consistency; runs before any tensor is allocated.
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        if self.data.image_size != self.model.patch.image_h || self.data.channels != self.model.patch.channels {
            return Err(Error::config(format!(
                "dataset images {}x{} ({} ch) do not match the model's {}x{} ({} ch)",
                self.data.image_size,
                self.data.image_size,
                self.data.channels,
                self.model.patch.image_h,
                self.model.patch.image_w,
                self.model.patch.channels
            )));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config(format!("threshold {} outside [0,1]", self.threshold)));
        }
        Ok(())
    }

    /// Paper-scale model dimensions, usable for shape checks only.
    pub fn paper_scale_model() -> ModelConfig {
        ModelConfig {
            patch: PatchConfig { image_h: 384, image_w: 384, channels: 3, patch_size: 32, embed_dim: 1024 },
            backbone: BackboneConfig {
                stage_channels: vec![16, 32, 64, 64],
                strides: vec![2, 2, 2, 2],
                feature_tokens: 4,
                embed_dim: 1024,
            },
            layers: 24,
            heads: 16,
            mlp_ratio: 4,
        }
    }
}
