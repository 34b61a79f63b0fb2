//! Convolutional backbone.
//!
//! Plays two roles: feature extractor producing M tokens that are fused with
//! the patch tokens, and standalone teacher classifier emitting one logit
//! per image.

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Forward, Linear, ParamSet};
use crate::rng::Rng;
use crate::tensor::ValueId;

/// Stage kernels are 4x4 with padding 1 so a stride-2 stage halves even
/// spatial extents exactly, keeping conv output extents integral.
const STAGE_KERNEL: usize = 4;
const STAGE_PADDING: usize = 1;

/// Map [0,1] pixels to [-1,1] before any learned layer.
pub fn center_input(fwd: &mut Forward, x: ValueId) -> ValueId {
    let shifted = fwd.tape.add_scalar(x, -0.5);
    fwd.tape.scale(shifted, 2.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Output channels per conv stage.
    pub stage_channels: Vec<usize>,
    /// Stride per conv stage.
    pub strides: Vec<usize>,
    /// Number of feature tokens M produced for fusion.
    pub feature_tokens: usize,
    /// Per-token embedding width E.
    pub embed_dim: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stage_channels: vec![16, 32, 64, 64],
            strides: vec![2, 2, 2, 2],
            feature_tokens: 4,
            embed_dim: 64,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.is_empty() {
            return Err(Error::config("backbone needs at least one conv stage"));
        }
        if self.strides.len() != self.stage_channels.len() {
            return Err(Error::config(format!(
                "backbone has {} stage channels but {} strides",
                self.stage_channels.len(),
                self.strides.len()
            )));
        }
        if self.strides.iter().any(|&s| s == 0) {
            return Err(Error::config("backbone strides must be >= 1"));
        }
        if self.feature_tokens == 0 {
            return Err(Error::config("backbone feature_tokens must be >= 1"));
        }
        if self.embed_dim == 0 {
            return Err(Error::config("backbone embed_dim must be >= 1"));
        }
        Ok(())
    }

    pub fn cumulative_stride(&self) -> usize {
        self.strides.iter().product()
    }

    pub fn last_channels(&self) -> usize {
        *self.stage_channels.last().unwrap()
    }
}

/// Stack of conv stages with GELU activations.
pub struct CnnBackbone {
    pub stages: Vec<Conv2d>,
}

impl CnnBackbone {
    pub fn new(params: &mut ParamSet, rng: &mut Rng, name: &str, cfg: &BackboneConfig, in_ch: usize) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::with_capacity(cfg.stage_channels.len());
        let mut prev = in_ch;
        for (i, (&ch, &stride)) in cfg.stage_channels.iter().zip(&cfg.strides).enumerate() {
            stages.push(Conv2d::new(
                params,
                rng,
                &format!("{name}.stage{i}"),
                prev,
                ch,
                STAGE_KERNEL,
                stride,
                STAGE_PADDING,
            ));
            prev = ch;
        }
        Ok(CnnBackbone { stages })
    }

    /// Final feature map [B, C_last, H', W'].
    pub fn feature_map(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        let mut h = x;
        for stage in &self.stages {
            h = stage.forward(fwd, params, h)?;
            h = fwd.tape.gelu(h);
        }
        Ok(h)
    }
}

/// Backbone plus projection producing the M fusion tokens.
pub struct FeatureExtractor {
    pub backbone: CnnBackbone,
    pub proj: Linear,
    pub cfg: BackboneConfig,
}

impl FeatureExtractor {
    pub fn new(params: &mut ParamSet, rng: &mut Rng, name: &str, cfg: &BackboneConfig, in_ch: usize) -> Result<Self> {
        let backbone = CnnBackbone::new(params, rng, name, cfg, in_ch)?;
        let proj = Linear::new(params, rng, &format!("{name}.proj"), cfg.last_channels(), cfg.embed_dim);
        Ok(FeatureExtractor { backbone, proj, cfg: cfg.clone() })
    }

    /// Conv stages, then the spatial cells of the final map are adaptively
    /// averaged (row-major order) into M positions and projected to E.
    /// Returns [B, M, E].
    pub fn extract_features(&self, fwd: &mut Forward, params: &ParamSet, x: ValueId) -> Result<ValueId> {
        let shape = fwd.tape.shape(x).to_vec();
        let cum = self.cfg.cumulative_stride();
        if shape[2] % cum != 0 || shape[3] % cum != 0 {
            return Err(Error::config(format!(
                "input spatial size {}x{} is not divisible by cumulative stride {cum}",
                shape[2], shape[3]
            )));
        }
        let map = self.backbone.feature_map(fwd, params, x)?;
        let ms = fwd.tape.shape(map).to_vec();
        let (b, c, cells) = (ms[0], ms[1], ms[2] * ms[3]);
        if cells < self.cfg.feature_tokens {
            return Err(Error::config(format!(
                "final feature map has {cells} cells, fewer than {} feature tokens",
                self.cfg.feature_tokens
            )));
        }
        let seq = fwd.tape.reshape(map, vec![b, c, cells])?;
        let seq = fwd.tape.permute(seq, &[0, 2, 1])?;
        let pooled = fwd.tape.seq_pool(seq, self.cfg.feature_tokens)?;
        self.proj.forward(fwd, params, pooled)
    }
}

/// Standalone CNN classifier used as the distillation teacher.
pub struct Teacher {
    pub params: ParamSet,
    pub backbone: CnnBackbone,
    /// Head applied to the globally averaged final feature map.
    pub head: Linear,
    pub cfg: BackboneConfig,
    pub in_ch: usize,
}

impl Teacher {
    pub fn new(cfg: &BackboneConfig, in_ch: usize, rng: &mut Rng) -> Result<Self> {
        let mut params = ParamSet::new();
        let backbone = CnnBackbone::new(&mut params, rng, "backbone", cfg, in_ch)?;
        let head = Linear::new(&mut params, rng, "head", cfg.last_channels(), 1);
        Ok(Teacher { params, backbone, head, cfg: cfg.clone(), in_ch })
    }

    /// One real-valued logit per image: [B, 1]. Inputs are [0,1] pixels.
    ///
    /// The head reads the per-channel spatial maximum of the final feature
    /// map; artifact evidence is localized, so max pooling keeps it from
    /// being averaged away.
    pub fn logit(&self, fwd: &mut Forward, x: ValueId) -> Result<ValueId> {
        let x = center_input(fwd, x);
        let map = self.backbone.feature_map(fwd, &self.params, x)?;
        let ms = fwd.tape.shape(map).to_vec();
        let (b, c, cells) = (ms[0], ms[1], ms[2] * ms[3]);
        let seq = fwd.tape.reshape(map, vec![b, c, cells])?;
        let seq = fwd.tape.permute(seq, &[0, 2, 1])?;
        let pooled = fwd.tape.seq_max(seq)?;
        let flat = fwd.tape.reshape(pooled, vec![b, c])?;
        let y = self.head.forward(fwd, &self.params, flat)?;
        fwd.tape.reshape(y, vec![b, 1])
    }

    /// Inference-only logits for a [B,C,H,W] image batch.
    pub fn predict_logits(&self, images: Vec<f64>, shape: Vec<usize>) -> Result<Vec<f64>> {
        let mut fwd = Forward::inference();
        let x = fwd.input(images, shape)?;
        let y = self.logit(&mut fwd, x)?;
        Ok(fwd.tape.data(y).to_vec())
    }
}
