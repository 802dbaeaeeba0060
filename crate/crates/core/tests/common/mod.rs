#![allow(dead_code)]

use fedpeft::data::partition::{partition, PartitionSpec};
use fedpeft::data::synthetic::{gen_synthetic_task, SyntheticSpec};
use fedpeft::data::ClientDataset;
use fedpeft::models::{CnnConfig, DualEncoderConfig, ModelConfig, ViTConfig};
use fedpeft::rng::seeded;
use fedpeft::tuning::{build_tuning, TuningAttachment, TuningKind, TuningStrategy};
use fedpeft::{ParamSet, Tensor};
use rand::Rng;

pub const CLASSES: usize = 3;

pub fn tiny_vit() -> ViTConfig {
    ViTConfig {
        image_side: 4,
        patch_side: 2,
        channels: 1,
        embed_dim: 4,
        layers: 1,
        heads: 2,
        mlp_ratio: 2.0,
        num_classes: CLASSES,
    }
}

pub fn tiny_dual() -> DualEncoderConfig {
    DualEncoderConfig {
        vision: tiny_vit(),
        class_embed_dim: 4,
        text_heads: 2,
        joint_dim: 4,
        num_classes: CLASSES,
        context_len: 2,
        temperature: 0.5,
    }
}

pub fn tiny_cnn() -> CnnConfig {
    CnnConfig {
        image_side: 4,
        channels: 1,
        conv1_channels: 2,
        conv2_channels: 2,
        hidden: 4,
        num_classes: CLASSES,
    }
}

/// Every (backbone, strategy) pair the tuning builder accepts.
pub fn combinations() -> Vec<(&'static str, ModelConfig, TuningKind)> {
    let vit = ModelConfig::Vit(tiny_vit());
    let dual = ModelConfig::DualEncoder(tiny_dual());
    let cnn = ModelConfig::Cnn(tiny_cnn());
    let mut out = Vec::new();
    for kind in [TuningKind::Head, TuningKind::PromptVisual, TuningKind::Adapter, TuningKind::Bias] {
        out.push(("vit", vit.clone(), kind));
    }
    for kind in [TuningKind::PromptVisual, TuningKind::PromptText, TuningKind::Adapter, TuningKind::Bias] {
        out.push(("dual_encoder", dual.clone(), kind));
    }
    out.push(("cnn", cnn, TuningKind::Full));
    out
}

pub fn strategy(kind: TuningKind) -> TuningStrategy {
    TuningStrategy {
        kind,
        prompt_len: 2,
        bottleneck_dim: 2,
    }
}

/// A random network with the strategy attached; trainable entries are
/// redrawn so zero-initialized adapters do not hide gradient paths.
pub fn random_network(model: &ModelConfig, kind: TuningKind, seed: u64) -> (ParamSet, TuningAttachment) {
    let backbone = model.init_params(&mut seeded(seed, 11)).unwrap();
    let att = build_tuning(strategy(kind), model, seed).unwrap();
    let mut params = att.attach(&backbone).unwrap();
    let mut rng = seeded(seed, 12);
    for name in &att.trainable {
        let t = &mut params.get_mut(name).unwrap().tensor;
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    (params, att)
}

pub fn random_batch(model: &ModelConfig, n: usize, seed: u64) -> (Vec<Tensor>, Vec<usize>) {
    let mut rng = seeded(seed, 13);
    let shape = model.image_shape();
    let images = (0..n).map(|_| Tensor::randn(&shape, 1.0, &mut rng)).collect();
    let labels = (0..n).map(|_| rng.random_range(0..model.num_classes())).collect();
    (images, labels)
}

/// Largest relative error between autodiff and central differences over
/// every trainable scalar.
pub fn max_gradient_error(model: &ModelConfig, kind: TuningKind, seed: u64) -> f64 {
    const H: f64 = 1e-5;
    const FLOOR: f64 = 1e-6;
    let (params, att) = random_network(model, kind, seed);
    let (images, labels) = random_batch(model, 2, seed);
    let refs: Vec<&Tensor> = images.iter().collect();
    let (_, grads) = model.loss_and_grads(&params, &att.hooks, &refs, &labels).unwrap();
    let loss_at = |p: &ParamSet| model.loss_and_grads(p, &att.hooks, &refs, &labels).unwrap().0;
    let mut worst = 0.0f64;
    for name in &att.trainable {
        let g = &grads[name];
        for i in 0..g.numel() {
            let mut plus = params.clone();
            plus.get_mut(name).unwrap().tensor.data_mut()[i] += H;
            let mut minus = params.clone();
            minus.get_mut(name).unwrap().tensor.data_mut()[i] -= H;
            let numeric = (loss_at(&plus) - loss_at(&minus)) / (2.0 * H);
            let analytic = g.data()[i];
            let scale = analytic.abs().max(numeric.abs()).max(FLOOR);
            worst = worst.max((analytic - numeric).abs() / scale);
        }
    }
    worst
}

/// `n` IID clients on a small synthetic task for the tiny models.
pub fn toy_clients(n: usize, shots: usize, seed: u64) -> Vec<ClientDataset> {
    let spec = SyntheticSpec {
        classes: CLASSES,
        image_side: 4,
        per_class: n * shots + 4,
        noise_std: 0.3,
        ..SyntheticSpec::default()
    };
    let data = gen_synthetic_task(&spec, seed).unwrap();
    let mut clients = partition(&data, &PartitionSpec::iid(n, shots, seed)).unwrap();
    let test = gen_synthetic_task(&SyntheticSpec { per_class: 4, id_offset: 1 << 30, ..spec }, seed + 1).unwrap();
    for c in clients.iter_mut() {
        c.test = test.clone();
    }
    clients
}
