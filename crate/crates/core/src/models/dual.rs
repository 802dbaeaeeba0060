//! Dual image/text encoder classifying by cosine similarity.
//!
//! The image side is a patch encoder (prefix `image`) followed by a linear
//! projection `image.proj` into the joint space. The text side encodes every
//! class as the sequence `[context tokens ‖ class embedding]` with one
//! transformer block (`text.block`), takes the output at the class position
//! and projects it with `text.proj`. Both features are unit-normalized and
//! `logit_c = ⟨f_img, f_c⟩ / temperature`.
//!
//! Tokenization is out of scope: each class has a learned embedding row in
//! `text.class_embed`, and `text.context` holds the fixed context tokens.
//! The text side carries no position embeddings, so its output depends on the
//! set of context tokens and the class embedding only.

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::vit::{self, ViTConfig};
use super::{Hooks, ModelConfig};
use crate::autodiff::{SeqPart, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{self, BlockShape};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const TEXT_PROMPT: &str = "prompt.text";
pub const TEXT_CONTEXT: &str = "text.context";
pub const CLASS_EMBED: &str = "text.class_embed";
pub const POST_ADAPTER: &str = "image.adapter";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualEncoderConfig {
    /// Image encoder; its `num_classes` is unused.
    pub vision: ViTConfig,
    pub class_embed_dim: usize,
    pub text_heads: usize,
    pub joint_dim: usize,
    pub num_classes: usize,
    pub context_len: usize,
    pub temperature: f64,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        Self {
            vision: ViTConfig::default(),
            class_embed_dim: 32,
            text_heads: 4,
            joint_dim: 32,
            num_classes: 10,
            context_len: 4,
            temperature: 0.07,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        if self.class_embed_dim == 0 || self.joint_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config("dual encoder dimensions must be positive".into()));
        }
        if self.text_heads == 0 || self.class_embed_dim % self.text_heads != 0 {
            return Err(Error::Config(format!(
                "class embed dim {} is not divisible by {} text heads",
                self.class_embed_dim, self.text_heads
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        Ok(())
    }

    fn text_block(&self) -> BlockShape {
        BlockShape {
            dim: self.class_embed_dim,
            heads: self.text_heads,
            mlp_hidden: (self.class_embed_dim as f64 * self.vision.mlp_ratio).round() as usize,
        }
    }
}

pub(crate) fn init_params<R: Rng + ?Sized>(cfg: &DualEncoderConfig, rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new();
    vit::init_encoder(&mut params, "image", &cfg.vision, rng);
    nn::init_linear(&mut params, "image.proj", cfg.vision.embed_dim, cfg.joint_dim, rng);
    let dt = cfg.class_embed_dim;
    params.insert(CLASS_EMBED, Tensor::randn(&[cfg.num_classes, dt], 1.0, rng), true);
    if cfg.context_len > 0 {
        params.insert(TEXT_CONTEXT, Tensor::randn(&[cfg.context_len, dt], 1.0, rng), true);
    }
    nn::init_block(&mut params, "text.block", cfg.text_block(), rng);
    nn::init_layer_norm(&mut params, "text.norm", dt);
    nn::init_linear(&mut params, "text.proj", dt, cfg.joint_dim, rng);
    params
}

/// Unit-normalized class features `[classes, joint_dim]`.
fn encode_text<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    cfg: &DualEncoderConfig,
    hooks: &Hooks,
) -> Result<Var> {
    let c = cfg.num_classes;
    let classes = tape.bind(params, CLASS_EMBED)?;
    let context = if hooks.text_prompt_len > 0 {
        Some((tape.bind(params, TEXT_PROMPT)?, hooks.text_prompt_len))
    } else if cfg.context_len > 0 {
        Some((tape.bind(params, TEXT_CONTEXT)?, cfg.context_len))
    } else {
        None
    };
    let (seq, len) = match context {
        Some((ctx, rows)) => {
            let got = tape.value(ctx).as_matrix_dims();
            if got != (rows, cfg.class_embed_dim) {
                return Err(Error::Contract(format!(
                    "text context is {got:?}, expected ({rows}, {})",
                    cfg.class_embed_dim
                )));
            }
            let s = tape.assemble(&[SeqPart::shared(ctx, rows), SeqPart::per_item(classes, 1)], c)?;
            (s, rows + 1)
        }
        None => (classes, 1),
    };
    let h = nn::transformer_block(tape, params, "text.block", seq, c, len, cfg.text_heads, false)?;
    let h = nn::layer_norm(tape, params, "text.norm", h)?;
    let last = tape.select_rows(h, len, len - 1)?;
    let proj = nn::linear(tape, params, "text.proj", last)?;
    Ok(tape.l2_normalize(proj))
}

/// Image features `[batch, joint_dim]` before normalization.
fn encode_image<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    cfg: &DualEncoderConfig,
    hooks: &Hooks,
    images: &[&Tensor],
) -> Result<Var> {
    let cls = vit::encode(tape, params, "image", &cfg.vision, hooks, images)?;
    let proj = nn::linear(tape, params, "image.proj", cls)?;
    if hooks.adapters {
        nn::adapter(tape, params, POST_ADAPTER, proj)
    } else {
        Ok(proj)
    }
}

pub(crate) fn forward_batch<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    cfg: &DualEncoderConfig,
    hooks: &Hooks,
    images: &[&Tensor],
) -> Result<Var> {
    let img = encode_image(tape, params, cfg, hooks, images)?;
    let img = tape.l2_normalize(img);
    let txt = encode_text(tape, params, cfg, hooks)?;
    let sim = tape.matmul_nt(img, txt)?;
    Ok(tape.scale(sim, 1.0 / cfg.temperature))
}

/// `logits[b, c] = ⟨f_b/|f_b|, t_c/|t_c|⟩ / temperature` for raw feature rows.
pub fn cosine_logits(image_features: &Tensor, text_features: &Tensor, temperature: f64) -> Result<Tensor> {
    let mut tape = Tape::new();
    let i = tape.input_ref(image_features);
    let t = tape.input_ref(text_features);
    let i = tape.l2_normalize(i);
    let t = tape.l2_normalize(t);
    let s = tape.matmul_nt(i, t)?;
    let out = tape.scale(s, 1.0 / temperature);
    Ok(tape.value(out).clone())
}

/// Similarity logits `[classes]` for one image.
pub fn clip_forward(image: &Tensor, params: &ParamSet, cfg: &DualEncoderConfig, hooks: &Hooks) -> Result<Tensor> {
    ModelConfig::DualEncoder(cfg.clone()).logits(params, hooks, image)
}

/// Accuracy of the untuned encoder; an empty dataset scores 0 with a warning.
pub fn zero_shot_eval(params: &ParamSet, cfg: &DualEncoderConfig, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        warn!("zero-shot evaluation on an empty dataset; reporting accuracy 0");
        return Ok(0.0);
    }
    let model = ModelConfig::DualEncoder(cfg.clone());
    Ok(model.evaluate(params, &Hooks::default(), data)?.accuracy())
}
