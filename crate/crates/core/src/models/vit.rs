//! Patch transformer classifier.
//!
//! Parameter layout (prefix `encoder`):
//! `patch_embed.{weight,bias}`, `cls_token [1, d]`, `pos_embed [N+1, d]`,
//! `blocks.{i}.*` (see [`crate::nn::transformer_block`]), `norm.{weight,bias}`;
//! classifier `head.{weight,bias}`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stack_images, Hooks, ModelConfig};
use crate::autodiff::{Im2ColGeometry, SeqPart, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BlockShape};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const VISUAL_PROMPT: &str = "prompt.visual";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub num_classes: usize,
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            patch_side: 4,
            channels: 1,
            embed_dim: 32,
            layers: 4,
            heads: 4,
            mlp_ratio: 2.0,
            num_classes: 10,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("channels", self.channels),
            ("embed_dim", self.embed_dim),
            ("heads", self.heads),
            ("num_classes", self.num_classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("ViT {name} must be positive")));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} is not divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "embed dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return Err(Error::Config("mlp_ratio must give a positive hidden width".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_side / self.patch_side).pow(2)
    }

    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            dim: self.embed_dim,
            heads: self.heads,
            mlp_hidden: self.mlp_hidden(),
        }
    }

    fn geometry(&self, batch: usize) -> Im2ColGeometry {
        Im2ColGeometry {
            batch,
            height: self.image_side,
            width: self.image_side,
            channels: self.channels,
            kernel: self.patch_side,
            stride: self.patch_side,
            padding: 0,
        }
    }
}

/// Splits an `[h, w, c]` image into `N = (h / p)²` row-major patches, each
/// flattened in (row, column, channel) order: `[N, p·p·c]`.
pub fn patchify(image: &Tensor, cfg: &ViTConfig) -> Result<Tensor> {
    cfg.validate()?;
    let expect = [cfg.image_side, cfg.image_side, cfg.channels];
    if image.shape() != expect {
        return Err(Error::Config(format!(
            "image shape {:?} does not match ViT input {expect:?}",
            image.shape()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.input_ref(image);
    let p = tape.im2col(x, cfg.geometry(1))?;
    Ok(tape.value(p).clone())
}

pub(crate) fn init_encoder<R: Rng + ?Sized>(params: &mut ParamSet, prefix: &str, cfg: &ViTConfig, rng: &mut R) {
    let d = cfg.embed_dim;
    nn::init_linear(params, &format!("{prefix}.patch_embed"), cfg.patch_len(), d, rng);
    params.insert(format!("{prefix}.cls_token"), Tensor::randn(&[1, d], 0.02, rng), true);
    params.insert(
        format!("{prefix}.pos_embed"),
        Tensor::randn(&[cfg.num_patches() + 1, d], 0.02, rng),
        true,
    );
    for i in 0..cfg.layers {
        nn::init_block(params, &format!("{prefix}.blocks.{i}"), cfg.block_shape(), rng);
    }
    nn::init_layer_norm(params, &format!("{prefix}.norm"), d);
}

pub(crate) fn init_params<R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new();
    init_encoder(&mut params, "encoder", cfg, rng);
    nn::init_linear(&mut params, "head", cfg.embed_dim, cfg.num_classes, rng);
    params
}

/// Runs the patch encoder on `images` and returns the normalized class-token
/// output `[batch, d]`.
pub(crate) fn encode<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    prefix: &str,
    cfg: &ViTConfig,
    hooks: &Hooks,
    images: &[&Tensor],
) -> Result<Var> {
    let batch = images.len();
    let n = cfg.num_patches();
    let x = tape.input(stack_images(images, [cfg.image_side, cfg.image_side, cfg.channels])?);
    let patches = tape.im2col(x, cfg.geometry(batch))?;
    let emb = nn::linear(tape, params, &format!("{prefix}.patch_embed"), patches)?;
    let cls = tape.bind(params, &format!("{prefix}.cls_token"))?;
    let tokens = tape.assemble(&[SeqPart::shared(cls, 1), SeqPart::per_item(emb, n)], batch)?;
    let pos = tape.bind(params, &format!("{prefix}.pos_embed"))?;
    let mut seq = tape.add_tiled(tokens, pos)?;
    let mut len = n + 1;
    if hooks.visual_prompt_len > 0 {
        let prompts = tape.bind(params, VISUAL_PROMPT)?;
        let p = tape.value(prompts).as_matrix_dims();
        if p != (hooks.visual_prompt_len, cfg.embed_dim) {
            return Err(Error::Contract(format!(
                "{VISUAL_PROMPT} is {p:?}, expected ({}, {})",
                hooks.visual_prompt_len, cfg.embed_dim
            )));
        }
        seq = tape.assemble(
            &[
                SeqPart::window(seq, len, 0, 1),
                SeqPart::shared(prompts, hooks.visual_prompt_len),
                SeqPart::window(seq, len, 1, n),
            ],
            batch,
        )?;
        len += hooks.visual_prompt_len;
    }
    for i in 0..cfg.layers {
        seq = nn::transformer_block(
            tape,
            params,
            &format!("{prefix}.blocks.{i}"),
            seq,
            batch,
            len,
            cfg.heads,
            hooks.adapters,
        )?;
    }
    let normed = nn::layer_norm(tape, params, &format!("{prefix}.norm"), seq)?;
    tape.select_rows(normed, len, 0)
}

pub(crate) fn forward_batch<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    cfg: &ViTConfig,
    hooks: &Hooks,
    images: &[&Tensor],
) -> Result<Var> {
    if hooks.text_prompt_len > 0 {
        return Err(Error::Config("text prompts need a dual encoder".into()));
    }
    let feat = encode(tape, params, "encoder", cfg, hooks, images)?;
    nn::linear(tape, params, "head", feat)
}

/// Logits `[classes]` for one image.
pub fn vit_forward(image: &Tensor, params: &ParamSet, cfg: &ViTConfig, hooks: &Hooks) -> Result<Tensor> {
    ModelConfig::Vit(cfg.clone()).logits(params, hooks, image)
}
