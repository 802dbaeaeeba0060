//! Evaluation metrics and convergence detection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `Σ correct / Σ total` over `(correct, total)` pairs.
pub fn weighted_accuracy(per_client: &[(usize, usize)]) -> Result<f64> {
    let (c, t) = per_client
        .iter()
        .fold((0usize, 0usize), |(c, t), &(ci, ti)| (c + ci, t + ti));
    if t == 0 {
        return Err(Error::UndefinedMetric("weighted accuracy over zero samples".into()));
    }
    Ok(c as f64 / t as f64)
}

/// Unweighted mean of per-class F1. A class with no true positives scores 0,
/// which also covers classes that are neither predicted nor present.
pub fn macro_f1(predictions: &[usize], labels: &[usize], classes: usize) -> f64 {
    assert_eq!(predictions.len(), labels.len(), "predictions and labels differ in length");
    if classes == 0 {
        return 0.0;
    }
    let mut tp = vec![0usize; classes];
    let mut fp = vec![0usize; classes];
    let mut fn_ = vec![0usize; classes];
    for (&p, &l) in predictions.iter().zip(labels) {
        if p == l {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[l] += 1;
        }
    }
    let total: f64 = (0..classes)
        .map(|c| {
            let denom = 2 * tp[c] + fp[c] + fn_[c];
            if tp[c] == 0 {
                0.0
            } else {
                2.0 * tp[c] as f64 / denom as f64
            }
        })
        .sum();
    total / classes as f64
}

/// Federated minus local accuracy.
pub fn relative_metric(fed: f64, local: f64) -> f64 {
    fed - local
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvergenceRule {
    pub target: f64,
    pub plateau: f64,
}

impl Default for ConvergenceRule {
    fn default() -> Self {
        Self {
            target: 0.99,
            plateau: 0.005,
        }
    }
}

impl ConvergenceRule {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("target", self.target), ("plateau", self.plateau)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("convergence {name} must lie in (0, 1), got {v}")));
            }
        }
        Ok(())
    }
}

/// 1-based round at which the rule first fires on a training-accuracy history.
pub fn convergence_round(history: &[f64], rule: &ConvergenceRule) -> Option<usize> {
    (0..history.len())
        .find(|&i| history[i] >= rule.target || (i >= 1 && (history[i] - history[i - 1]).abs() < rule.plateau))
        .map(|i| i + 1)
}
