//! Token-fusion vision transformer with class and distillation heads.
//!
//! An image contributes two token streams: N embedded patches and M CNN
//! feature tokens. The streams are concatenated, adaptively pooled back to N
//! tokens, wrapped between a class token and a distillation token, offset by
//! a learned positional embedding, and run through a pre-norm encoder stack.
//! Each head is a single linear layer reading its token's final state.

use crate::backbone::{BackboneConfig, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::{init, EncoderBlock, Forward, LayerNorm, Linear, ParamId, ParamSet};
use crate::rng::Rng;
use crate::tensor::ValueId;

/// Which output head produces a prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Class,
    Distill,
}

impl HeadKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::Class => "class",
            HeadKind::Distill => "distill",
        }
    }
}

impl std::str::FromStr for HeadKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "class" => Ok(HeadKind::Class),
            "distill" => Ok(HeadKind::Distill),
            other => Err(Error::config(format!("unknown head '{other}', expected class|distill"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
}

impl Default for PatchConfig {
    fn default() -> Self {
        PatchConfig { image_h: 64, image_w: 64, channels: 1, patch_size: 8, embed_dim: 64 }
    }
}

impl PatchConfig {
    pub fn n_patches(&self) -> usize {
        (self.image_h / self.patch_size) * (self.image_w / self.patch_size)
    }

    pub fn patch_features(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_h == 0 || self.image_w == 0 || self.channels == 0 || self.embed_dim == 0 {
            return Err(Error::config("patch config extents must all be >= 1"));
        }
        if self.patch_size == 0
            || self.image_h % self.patch_size != 0
            || self.image_w % self.patch_size != 0
        {
            return Err(Error::config(format!(
                "patch size {} does not divide image {}x{}",
                self.patch_size, self.image_h, self.image_w
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub patch: PatchConfig,
    pub backbone: BackboneConfig,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch: PatchConfig::default(),
            backbone: BackboneConfig::default(),
            layers: 4,
            heads: 4,
            mlp_ratio: 4,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.patch.validate()?;
        self.backbone.validate()?;
        let e = self.patch.embed_dim;
        if self.heads == 0 || e % self.heads != 0 {
            return Err(Error::config(format!(
                "embed dim {e} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.layers == 0 || self.mlp_ratio == 0 {
            return Err(Error::config("layers and mlp_ratio must be >= 1"));
        }
        if self.backbone.embed_dim != e {
            return Err(Error::config(format!(
                "backbone embed dim {} must match model embed dim {e} for token fusion",
                self.backbone.embed_dim
            )));
        }
        let cum = self.backbone.cumulative_stride();
        if self.patch.image_h % cum != 0 || self.patch.image_w % cum != 0 {
            return Err(Error::config(format!(
                "image {}x{} is not divisible by backbone cumulative stride {cum}",
                self.patch.image_h, self.patch.image_w
            )));
        }
        Ok(())
    }

    /// Full token sequence length: N patches plus class and distill tokens.
    pub fn seq_len(&self) -> usize {
        self.patch.n_patches() + 2
    }
}

/// Logit pair produced by one forward pass.
pub struct HeadOutputs {
    pub class_logit: ValueId,
    pub distill_logit: ValueId,
}

/// Concatenate patch and CNN tokens, pool N+M back to N, wrap with the
/// class token (front) and distillation token (back), and add the
/// positional embedding covering all N+2 positions.
pub fn assemble_tokens(
    fwd: &mut Forward,
    z_p: ValueId,
    z_f: Option<ValueId>,
    class_token: ValueId,
    distill_token: ValueId,
    pos_embed: ValueId,
) -> Result<ValueId> {
    let sp = fwd.tape.shape(z_p).to_vec();
    if sp.len() != 3 {
        return Err(Error::contract(format!("patch tokens must be [B,N,E], got {sp:?}")));
    }
    let (b, n, e) = (sp[0], sp[1], sp[2]);
    for (what, id) in [("class token", class_token), ("distillation token", distill_token)] {
        let s = fwd.tape.shape(id);
        if s.iter().product::<usize>() != e {
            return Err(Error::ShapeMismatch { op: "assemble_tokens", lhs: sp.clone(), rhs: s.to_vec() })
                .map_err(|_| Error::config(format!("{what} width does not match embed dim {e}")));
        }
    }
    let fused = match z_f {
        Some(zf) => {
            let sf = fwd.tape.shape(zf).to_vec();
            if sf.len() != 3 || sf[0] != b || sf[2] != e {
                return Err(Error::ShapeMismatch { op: "assemble_tokens", lhs: sp, rhs: sf });
            }
            let cat = fwd.tape.concat_seq(&[z_p, zf])?;
            fwd.tape.seq_pool(cat, n)?
        }
        None => z_p,
    };
    let cls = fwd.tape.reshape(class_token, vec![1, e])?;
    let cls = fwd.tape.broadcast_batch(cls, b)?;
    let dst = fwd.tape.reshape(distill_token, vec![1, e])?;
    let dst = fwd.tape.broadcast_batch(dst, b)?;
    let tokens = fwd.tape.concat_seq(&[cls, fused, dst])?;

    let ps = fwd.tape.shape(pos_embed).to_vec();
    if ps != [n + 2, e] {
        return Err(Error::ShapeMismatch { op: "assemble_tokens pos_embed", lhs: vec![n + 2, e], rhs: ps });
    }
    let pos = fwd.tape.broadcast_batch(pos_embed, b)?;
    fwd.tape.add(tokens, pos)
}

pub struct HybridViT {
    pub params: ParamSet,
    pub cfg: ModelConfig,
    pub patch_embed: Linear,
    pub features: FeatureExtractor,
    pub class_token: ParamId,
    pub distill_token: ParamId,
    pub pos_embed: ParamId,
    pub encoder: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
    pub class_head: Linear,
    pub distill_head: Linear,
}

impl HybridViT {
    pub fn new(cfg: &ModelConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamSet::new();
        let e = cfg.patch.embed_dim;
        let patch_embed = Linear::new(&mut params, rng, "patch_embed", cfg.patch.patch_features(), e);
        let features = FeatureExtractor::new(&mut params, rng, "backbone", &cfg.backbone, cfg.patch.channels)?;
        let class_token = params.register("class_token", init::normal(rng, vec![e], 0.02));
        let distill_token = params.register("distill_token", init::normal(rng, vec![e], 0.02));
        let pos_embed = params.register("pos_embed", init::normal(rng, vec![cfg.seq_len(), e], 0.02));
        let mut encoder = Vec::with_capacity(cfg.layers);
        for i in 0..cfg.layers {
            encoder.push(EncoderBlock::new(
                &mut params,
                rng,
                &format!("encoder.{i}"),
                e,
                cfg.heads,
                e * cfg.mlp_ratio,
            )?);
        }
        let final_norm = LayerNorm::new(&mut params, "final_norm", e);
        let class_head = Linear::new(&mut params, rng, "class_head", e, 1);
        let distill_head = Linear::new(&mut params, rng, "distill_head", e, 1);
        Ok(HybridViT {
            params,
            cfg: cfg.clone(),
            patch_embed,
            features,
            class_token,
            distill_token,
            pos_embed,
            encoder,
            final_norm,
            class_head,
            distill_head,
        })
    }

    /// Split into patches and project each to the embedding width: [B,N,E].
    pub fn embed_patches(&self, fwd: &mut Forward, x: ValueId) -> Result<ValueId> {
        let patches = fwd.tape.extract_patches(x, self.cfg.patch.patch_size)?;
        self.patch_embed.forward(fwd, &self.params, patches)
    }

    fn check_input(&self, fwd: &Forward, x: ValueId) -> Result<()> {
        let s = fwd.tape.shape(x);
        let p = &self.cfg.patch;
        if s.len() != 4 || s[1] != p.channels || s[2] != p.image_h || s[3] != p.image_w {
            return Err(Error::config(format!(
                "input shape {s:?} does not match configured [B, {}, {}, {}]",
                p.channels, p.image_h, p.image_w
            )));
        }
        Ok(())
    }

    /// Run the encoder stack over an assembled token sequence and read both
    /// heads: class from token 0, distillation from the last token.
    pub fn heads_from_tokens(&self, fwd: &mut Forward, tokens: ValueId) -> Result<HeadOutputs> {
        let mut tokens = tokens;
        for block in &self.encoder {
            tokens = block.forward(fwd, &self.params, tokens)?;
        }
        let tokens = self.final_norm.forward(fwd, &self.params, tokens)?;
        let shape = fwd.tape.shape(tokens).to_vec();
        let (b, t, e) = (shape[0], shape[1], shape[2]);

        let cls = fwd.tape.slice_seq(tokens, 0, 1)?;
        let cls = fwd.tape.reshape(cls, vec![b, e])?;
        let class_logit = self.class_head.forward(fwd, &self.params, cls)?;

        let dst = fwd.tape.slice_seq(tokens, t - 1, 1)?;
        let dst = fwd.tape.reshape(dst, vec![b, e])?;
        let distill_logit = self.distill_head.forward(fwd, &self.params, dst)?;
        Ok(HeadOutputs { class_logit, distill_logit })
    }

    /// Full forward pass for an image batch [B,C,H,W] of [0,1] pixels.
    pub fn forward(&self, fwd: &mut Forward, x: ValueId) -> Result<HeadOutputs> {
        self.check_input(fwd, x)?;
        let x = crate::backbone::center_input(fwd, x);
        let z_p = self.embed_patches(fwd, x)?;
        let z_f = self.features.extract_features(fwd, &self.params, x)?;
        let cls = fwd.param(&self.params, self.class_token);
        let dst = fwd.param(&self.params, self.distill_token);
        let pos = fwd.param(&self.params, self.pos_embed);
        let tokens = assemble_tokens(fwd, z_p, Some(z_f), cls, dst, pos)?;
        self.heads_from_tokens(fwd, tokens)
    }

    /// Inference-only logits for a [B,C,H,W] batch: (class, distill).
    pub fn predict_logits(&self, images: Vec<f64>, shape: Vec<usize>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut fwd = Forward::inference();
        let x = fwd.input(images, shape)?;
        let out = self.forward(&mut fwd, x)?;
        Ok((
            fwd.tape.data(out.class_logit).to_vec(),
            fwd.tape.data(out.distill_logit).to_vec(),
        ))
    }

    /// Sigmoid probability of the selected head, per image.
    pub fn predict_probability(&self, images: Vec<f64>, shape: Vec<usize>, head: HeadKind) -> Result<Vec<f64>> {
        let (class, distill) = self.predict_logits(images, shape)?;
        let logits = match head {
            HeadKind::Class => class,
            HeadKind::Distill => distill,
        };
        Ok(logits.iter().map(|&l| crate::tensor::sigmoid(l)).collect())
    }
}
