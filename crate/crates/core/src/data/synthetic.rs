//! Class-conditional synthetic image tasks.
//!
//! Each class owns a smooth prototype pattern built from a few Gaussian
//! blobs. Samples are `prototype + brightness offset + N(0, noise²)` pixel
//! noise. Prototypes depend only on `prototype_seed`, so a source task and a
//! downstream task generated from the same family share class identities.
//!
//! `domain_shift ∈ [0, 1]` moves the downstream task away from the source:
//! each prototype is rotated towards a second, independent pattern of the
//! same class by an angle of `shift · π/4`, and a uniform brightness offset
//! of `shift · brightness` is added to every pixel.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{seeded, streams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub image_side: usize,
    pub channels: usize,
    pub per_class: usize,
    pub noise_std: f64,
    pub domain_shift: f64,
    pub brightness: f64,
    pub prototype_seed: u64,
    /// First sample id; lets a train pool and a test pool carry disjoint ids.
    pub id_offset: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            image_side: 16,
            channels: 1,
            per_class: 100,
            noise_std: 1.0,
            domain_shift: 0.0,
            brightness: 1.0,
            prototype_seed: 0,
            id_offset: 0,
        }
    }
}

const BLOBS_PER_PATTERN: usize = 4;

fn blob_pattern<R: Rng + ?Sized>(side: usize, channels: usize, rng: &mut R) -> Vec<f64> {
    let mut img = vec![0.0; side * side * channels];
    let s = side as f64;
    for ch in 0..channels {
        for _ in 0..BLOBS_PER_PATTERN {
            let cy = rng.random_range(0.0..s);
            let cx = rng.random_range(0.0..s);
            let width = rng.random_range(s / 8.0..s / 3.0);
            let amp = rng.random_range(0.5..1.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            for y in 0..side {
                for x in 0..side {
                    let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                    img[(y * side + x) * channels + ch] += amp * (-d2 / (2.0 * width * width)).exp();
                }
            }
        }
    }
    // zero mean, unit RMS
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    img.iter_mut().for_each(|v| *v -= mean);
    let rms = (img.iter().map(|v| v * v).sum::<f64>() / n).sqrt().max(1e-12);
    img.iter_mut().for_each(|v| *v /= rms);
    img
}

/// Class prototypes of the family, after applying `domain_shift`.
pub fn prototypes(spec: &SyntheticSpec) -> Vec<Vec<f64>> {
    let mut rng = seeded(spec.prototype_seed, streams::PROTOTYPES);
    let base: Vec<_> = (0..spec.classes)
        .map(|_| blob_pattern(spec.image_side, spec.channels, &mut rng))
        .collect();
    let alt: Vec<_> = (0..spec.classes)
        .map(|_| blob_pattern(spec.image_side, spec.channels, &mut rng))
        .collect();
    let angle = spec.domain_shift * std::f64::consts::FRAC_PI_4;
    let (c, s) = (angle.cos(), angle.sin());
    let offset = spec.domain_shift * spec.brightness;
    base.iter()
        .zip(&alt)
        .map(|(p, q)| p.iter().zip(q).map(|(a, b)| c * a + s * b + offset).collect())
        .collect()
}

/// Generates `per_class` samples of every class, interleaved by class so any
/// prefix of length divisible by `classes` is exactly balanced.
pub fn gen_synthetic_task(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config(format!(
            "synthetic task needs at least 2 classes, got {}",
            spec.classes
        )));
    }
    if spec.image_side == 0 || spec.channels == 0 {
        return Err(Error::Config("image side and channels must be positive".into()));
    }
    if !(spec.noise_std >= 0.0 && spec.noise_std.is_finite()) {
        return Err(Error::Config(format!("noise_std must be >= 0, got {}", spec.noise_std)));
    }
    let protos = prototypes(spec);
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
    let mut rng = seeded(seed, streams::SYNTHETIC);
    let shape = vec![spec.image_side, spec.image_side, spec.channels];
    let total = spec.per_class * spec.classes;
    let mut images = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for i in 0..total {
        let label = i % spec.classes;
        let px = protos[label]
            .iter()
            .map(|&p| p + noise.sample(&mut rng))
            .collect();
        images.push(Tensor::new(shape.clone(), px)?);
        labels.push(label);
    }
    let ids = (0..total as u64).map(|i| spec.id_offset + i).collect();
    Dataset::new(images, labels, ids, spec.classes)
}
