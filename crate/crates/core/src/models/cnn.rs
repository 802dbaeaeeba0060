//! Two-conv / two-fc CNN baseline trained from scratch.
//!
//! `conv3x3(pad 1) → ReLU → maxpool2 → conv3x3(pad 1) → ReLU → maxpool2 →
//! fc → ReLU → fc`. Convolution weights are stored as `[9·c_in, c_out]`
//! matrices applied to im2col rows ordered (row, column, channel).

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{stack_images, Hooks, ModelConfig};
use crate::autodiff::{Im2ColGeometry, Tape, Var};
use crate::error::{Error, Result};
use crate::nn;
use crate::params::ParamSet;
use crate::tensor::Tensor;

const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub image_side: usize,
    pub channels: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl Default for CnnConfig {
    fn default() -> Self {
        Self {
            image_side: 16,
            channels: 1,
            conv1_channels: 8,
            conv2_channels: 16,
            hidden: 64,
            num_classes: 10,
        }
    }
}

impl CnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_side == 0 || self.image_side % 4 != 0 {
            return Err(Error::Config(format!(
                "CNN image side {} must be a positive multiple of 4",
                self.image_side
            )));
        }
        if [self.channels, self.conv1_channels, self.conv2_channels, self.hidden, self.num_classes]
            .contains(&0)
        {
            return Err(Error::Config("CNN widths must be positive".into()));
        }
        Ok(())
    }

    fn flat_features(&self) -> usize {
        (self.image_side / 4).pow(2) * self.conv2_channels
    }
}

pub(crate) fn init_params<R: Rng + ?Sized>(cfg: &CnnConfig, rng: &mut R) -> ParamSet {
    let mut p = ParamSet::new();
    let k2 = KERNEL * KERNEL;
    nn::init_linear(&mut p, "conv1", k2 * cfg.channels, cfg.conv1_channels, rng);
    nn::init_linear(&mut p, "conv2", k2 * cfg.conv1_channels, cfg.conv2_channels, rng);
    nn::init_linear(&mut p, "fc1", cfg.flat_features(), cfg.hidden, rng);
    nn::init_linear(&mut p, "fc2", cfg.hidden, cfg.num_classes, rng);
    p
}

fn conv_block<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    prefix: &str,
    x: Var,
    batch: usize,
    side: usize,
    channels: usize,
    out_channels: usize,
) -> Result<Var> {
    let geom = Im2ColGeometry {
        batch,
        height: side,
        width: side,
        channels,
        kernel: KERNEL,
        stride: 1,
        padding: 1,
    };
    let cols = tape.im2col(x, geom)?;
    let conv = nn::linear(tape, params, prefix, cols)?;
    let conv = tape.reshape(conv, &[batch, side, side, out_channels])?;
    let act = tape.relu(conv);
    tape.max_pool2(act)
}

pub(crate) fn forward_batch<'p>(
    tape: &mut Tape<'p>,
    params: &'p ParamSet,
    cfg: &CnnConfig,
    images: &[&Tensor],
) -> Result<Var> {
    let b = images.len();
    let s = cfg.image_side;
    let x = tape.input(stack_images(images, [s, s, cfg.channels])?);
    let h = conv_block(tape, params, "conv1", x, b, s, cfg.channels, cfg.conv1_channels)?;
    let h = conv_block(tape, params, "conv2", h, b, s / 2, cfg.conv1_channels, cfg.conv2_channels)?;
    let flat = tape.reshape(h, &[b, cfg.flat_features()])?;
    let h = nn::linear(tape, params, "fc1", flat)?;
    let h = tape.relu(h);
    nn::linear(tape, params, "fc2", h)
}

/// Logits `[classes]` for one image.
pub fn cnn_forward(image: &Tensor, params: &ParamSet, cfg: &CnnConfig) -> Result<Tensor> {
    ModelConfig::Cnn(cfg.clone()).logits(params, &Hooks::default(), image)
}
