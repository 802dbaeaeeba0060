//! Differentiable backbones: a patch transformer (ViT), a dual image/text
//! encoder scored by cosine similarity, and a small CNN trained from scratch.

pub mod cnn;
pub mod dual;
pub mod pretrain;
pub mod vit;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub use cnn::{cnn_forward, CnnConfig};
pub use dual::{clip_forward, zero_shot_eval, DualEncoderConfig};
pub use pretrain::{pretrain_backbone, PretrainOptions, PretrainOutcome};
pub use vit::{patchify, vit_forward, ViTConfig};

/// Where tuning modules plug into a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Hooks {
    /// Learnable tokens inserted after the class token (`prompt.visual`).
    pub visual_prompt_len: usize,
    /// Learnable text-context tokens replacing the fixed context (`prompt.text`).
    pub text_prompt_len: usize,
    /// Per-block bottleneck adapters (plus a post-encoder adapter on the dual encoder).
    pub adapters: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Vit(ViTConfig),
    DualEncoder(DualEncoderConfig),
    Cnn(CnnConfig),
}

impl ModelConfig {
    pub fn num_classes(&self) -> usize {
        match self {
            ModelConfig::Vit(c) => c.num_classes,
            ModelConfig::DualEncoder(c) => c.num_classes,
            ModelConfig::Cnn(c) => c.num_classes,
        }
    }

    /// `[height, width, channels]` of accepted images.
    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            ModelConfig::Vit(c) => [c.image_side, c.image_side, c.channels],
            ModelConfig::DualEncoder(c) => [c.vision.image_side, c.vision.image_side, c.vision.channels],
            ModelConfig::Cnn(c) => [c.image_side, c.image_side, c.channels],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Vit(c) => c.validate(),
            ModelConfig::DualEncoder(c) => c.validate(),
            ModelConfig::Cnn(c) => c.validate(),
        }
    }

    /// Freshly initialized parameters, all trainable.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<ParamSet> {
        self.validate()?;
        Ok(match self {
            ModelConfig::Vit(c) => vit::init_params(c, rng),
            ModelConfig::DualEncoder(c) => dual::init_params(c, rng),
            ModelConfig::Cnn(c) => cnn::init_params(c, rng),
        })
    }

    /// Logits `[batch, classes]` for a batch of images.
    pub fn forward<'p>(
        &self,
        tape: &mut Tape<'p>,
        params: &'p ParamSet,
        hooks: &Hooks,
        images: &[&Tensor],
    ) -> Result<Var> {
        match self {
            ModelConfig::Vit(c) => vit::forward_batch(tape, params, c, hooks, images),
            ModelConfig::DualEncoder(c) => dual::forward_batch(tape, params, c, hooks, images),
            ModelConfig::Cnn(c) => {
                if *hooks != Hooks::default() {
                    return Err(Error::Config("the CNN baseline takes no tuning modules".into()));
                }
                cnn::forward_batch(tape, params, c, images)
            }
        }
    }

    /// Class logits for a single image, shape `[classes]`.
    pub fn logits(&self, params: &ParamSet, hooks: &Hooks, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, params, hooks, &[image])?;
        tape.value(out).clone().reshape(&[self.num_classes()])
    }

    /// Argmax predictions; ties resolve to the lowest class index.
    pub fn predict(&self, params: &ParamSet, hooks: &Hooks, images: &[&Tensor]) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_BATCH) {
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, params, hooks, chunk)?;
            let c = self.num_classes();
            preds.extend(tape.value(out).data().chunks_exact(c).map(argmax));
        }
        Ok(preds)
    }

    /// `(correct, total, predictions)` on a dataset.
    pub fn evaluate(&self, params: &ParamSet, hooks: &Hooks, data: &Dataset) -> Result<Evaluation> {
        let predictions = self.predict(params, hooks, &data.image_refs())?;
        let correct = predictions
            .iter()
            .zip(&data.labels)
            .filter(|(p, l)| p == l)
            .count();
        Ok(Evaluation {
            correct,
            total: data.len(),
            predictions,
        })
    }

    /// Mean cross-entropy of a batch and its gradients w.r.t. every
    /// trainable parameter.
    pub fn loss_and_grads(
        &self,
        params: &ParamSet,
        hooks: &Hooks,
        images: &[&Tensor],
        labels: &[usize],
    ) -> Result<(f64, Gradients)> {
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, params, hooks, images)?;
        let loss = tape.softmax_cross_entropy(logits, labels)?;
        let grads = tape.backward(loss)?;
        Ok((tape.value(loss).data()[0], grads))
    }
}

const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub correct: usize,
    pub total: usize,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    /// Fraction correct; 0 for an empty dataset.
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

/// Index of the largest value; the first one wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks `[h, w, c]` images into one `[batch, h, w, c]` tensor.
pub(crate) fn stack_images(images: &[&Tensor], shape: [usize; 3]) -> Result<Tensor> {
    if images.is_empty() {
        return Err(Error::Config("empty image batch".into()));
    }
    let mut data = Vec::with_capacity(images.len() * shape.iter().product::<usize>());
    for im in images {
        if im.shape() != shape {
            return Err(Error::Config(format!(
                "image shape {:?} does not match model input {shape:?}",
                im.shape()
            )));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(vec![images.len(), shape[0], shape[1], shape[2]], data)
}
