//! Supervised pretraining of a backbone on a source task.

use log::info;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Hooks, ModelConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::params::ParamSet;
use crate::rng::{seeded, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainOptions {
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Held-out source accuracy at which training stops.
    pub target_accuracy: f64,
    pub seed: u64,
}

impl Default for PretrainOptions {
    fn default() -> Self {
        Self {
            max_epochs: 40,
            batch_size: 16,
            lr: 3e-3,
            target_accuracy: 0.95,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    /// Trained weights, all frozen.
    pub params: ParamSet,
    pub source_accuracy: f64,
    pub epochs: usize,
}

/// Trains every parameter with Adam until the held-out accuracy reaches the
/// target, or fails with [`Error::PretrainFailed`] after `max_epochs`.
pub fn pretrain_backbone(
    model: &ModelConfig,
    source: &Dataset,
    holdout: &Dataset,
    opts: &PretrainOptions,
) -> Result<PretrainOutcome> {
    if source.is_empty() || holdout.is_empty() {
        return Err(Error::Config("pretraining needs non-empty source and holdout sets".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }
    let mut params = model.init_params(&mut seeded(opts.seed, streams::BACKBONE_INIT))?;
    let mut adam = Adam::new(opts.lr);
    let mut shuffle = seeded(opts.seed, streams::PRETRAIN_SHUFFLE);
    let hooks = Hooks::default();
    let mut order: Vec<usize> = (0..source.len()).collect();
    let mut accuracy = 0.0;
    for epoch in 1..=opts.max_epochs {
        order.shuffle(&mut shuffle);
        for batch in order.chunks(opts.batch_size) {
            let images: Vec<_> = batch.iter().map(|&i| &source.images[i]).collect();
            let labels: Vec<_> = batch.iter().map(|&i| source.labels[i]).collect();
            let (_, grads) = model.loss_and_grads(&params, &hooks, &images, &labels)?;
            adam.step(&mut params, &grads)?;
        }
        accuracy = model.evaluate(&params, &hooks, holdout)?.accuracy();
        info!("pretrain epoch {epoch}: holdout accuracy {accuracy:.4}");
        if accuracy >= opts.target_accuracy {
            params.freeze_all();
            return Ok(PretrainOutcome {
                params,
                source_accuracy: accuracy,
                epochs: epoch,
            });
        }
    }
    Err(Error::PretrainFailed {
        seed: opts.seed,
        accuracy,
        target: opts.target_accuracy,
        epochs: opts.max_epochs,
        config: serde_json::to_string(model)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic_task, SyntheticSpec};
    use crate::models::ViTConfig;

    fn task() -> (Dataset, Dataset) {
        let spec = SyntheticSpec {
            classes: 3,
            image_side: 8,
            per_class: 20,
            noise_std: 0.2,
            ..SyntheticSpec::default()
        };
        let train = gen_synthetic_task(&spec, 1).unwrap();
        let test = gen_synthetic_task(&spec, 2).unwrap();
        (train, test)
    }

    fn model() -> ModelConfig {
        ModelConfig::Vit(ViTConfig {
            image_side: 8,
            embed_dim: 8,
            layers: 1,
            heads: 2,
            num_classes: 3,
            ..ViTConfig::default()
        })
    }

    #[test]
    fn unreachable_target_reports_failure() {
        let (train, test) = task();
        let opts = PretrainOptions {
            max_epochs: 1,
            target_accuracy: 1.01,
            ..PretrainOptions::default()
        };
        match pretrain_backbone(&model(), &train, &test, &opts) {
            Err(Error::PretrainFailed { epochs, target, .. }) => {
                assert_eq!(epochs, 1);
                assert_eq!(target, 1.01);
            }
            other => panic!("expected failure, got {other:?}"),
        }
    }

    #[test]
    fn easy_task_converges_and_freezes() {
        let (train, test) = task();
        let out = pretrain_backbone(&model(), &train, &test, &PretrainOptions::default()).unwrap();
        assert!(out.source_accuracy >= 0.95);
        assert_eq!(out.params.trainable_scalars(), 0);
    }
}
