//! Parameter-efficient tuning strategies: which parameters a client trains,
//! which extra modules it adds to the frozen backbone, and the deltas it
//! ships to the server.

use std::collections::BTreeSet;
use std::fmt;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::dual::{POST_ADAPTER, TEXT_PROMPT};
use crate::models::vit::VISUAL_PROMPT;
use crate::models::{Hooks, ModelConfig};
use crate::params::{ParamSet, Reader};
use crate::rng::{seeded, streams};
use crate::tensor::Tensor;

pub const PROMPT_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningKind {
    Head,
    PromptVisual,
    PromptText,
    Adapter,
    Bias,
    /// Every parameter trainable; only for the CNN trained from scratch.
    Full,
}

impl TuningKind {
    pub const ALL: [TuningKind; 6] = [
        TuningKind::Head,
        TuningKind::PromptVisual,
        TuningKind::PromptText,
        TuningKind::Adapter,
        TuningKind::Bias,
        TuningKind::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TuningKind::Head => "head",
            TuningKind::PromptVisual => "prompt_visual",
            TuningKind::PromptText => "prompt_text",
            TuningKind::Adapter => "adapter",
            TuningKind::Bias => "bias",
            TuningKind::Full => "full",
        }
    }
}

impl fmt::Display for TuningKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TuningStrategy {
    pub kind: TuningKind,
    #[serde(default = "default_prompt_len")]
    pub prompt_len: usize,
    #[serde(default = "default_bottleneck")]
    pub bottleneck_dim: usize,
}

fn default_prompt_len() -> usize {
    4
}

fn default_bottleneck() -> usize {
    8
}

impl TuningStrategy {
    pub fn new(kind: TuningKind) -> Self {
        Self {
            kind,
            prompt_len: default_prompt_len(),
            bottleneck_dim: default_bottleneck(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TuningKind::PromptVisual | TuningKind::PromptText if self.prompt_len == 0 => {
                Err(Error::Config(format!("{} needs prompt_len >= 1", self.kind)))
            }
            TuningKind::Adapter if self.bottleneck_dim == 0 => {
                Err(Error::Config("adapter needs bottleneck_dim >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Extra modules and trainability flags a strategy adds to a frozen backbone.
#[derive(Debug, Clone)]
pub struct TuningAttachment {
    pub strategy: TuningStrategy,
    /// New entries (prompts, adapters); empty for head, bias and full.
    pub extra: ParamSet,
    /// Exactly the names trained by this strategy.
    pub trainable: BTreeSet<String>,
    pub hooks: Hooks,
}

fn is_bias(name: &str) -> bool {
    name.ends_with(".bias")
}

pub fn build_tuning(strategy: TuningStrategy, model: &ModelConfig, seed: u64) -> Result<TuningAttachment> {
    strategy.validate()?;
    model.validate()?;
    let incompatible = || {
        Error::Config(format!(
            "strategy {} is not available on this backbone",
            strategy.kind
        ))
    };
    let mut rng = seeded(seed, streams::TUNING_INIT);
    let mut extra = ParamSet::new();
    let mut hooks = Hooks::default();
    // Names of the backbone itself, generated with a throwaway init.
    let backbone_names = || -> Result<Vec<String>> {
        let p = model.init_params(&mut seeded(0, 0))?;
        Ok(p.names().map(String::from).collect())
    };
    let mut trainable: BTreeSet<String> = BTreeSet::new();
    match (strategy.kind, model) {
        (TuningKind::Full, ModelConfig::Cnn(_)) => trainable.extend(backbone_names()?),
        (_, ModelConfig::Cnn(_)) | (TuningKind::Full, _) => return Err(incompatible()),
        (TuningKind::Head, ModelConfig::Vit(_)) => {
            trainable.extend(["head.bias".to_string(), "head.weight".to_string()]);
        }
        (TuningKind::Head, _) => return Err(incompatible()),
        (TuningKind::PromptText, ModelConfig::DualEncoder(c)) => {
            let normal = Normal::new(0.0, PROMPT_INIT_STD).expect("finite std");
            let data = (0..strategy.prompt_len * c.class_embed_dim)
                .map(|_| normal.sample(&mut rng))
                .collect();
            extra.insert(
                TEXT_PROMPT,
                Tensor::new(vec![strategy.prompt_len, c.class_embed_dim], data)?,
                true,
            );
            hooks.text_prompt_len = strategy.prompt_len;
        }
        (TuningKind::PromptText, _) => return Err(incompatible()),
        (TuningKind::PromptVisual, m) => {
            let d = vision(m).embed_dim;
            extra.insert(
                VISUAL_PROMPT,
                Tensor::randn(&[strategy.prompt_len, d], PROMPT_INIT_STD, &mut rng),
                true,
            );
            hooks.visual_prompt_len = strategy.prompt_len;
        }
        (TuningKind::Adapter, m) => {
            let (prefix, v) = match m {
                ModelConfig::Vit(v) => ("encoder", v),
                ModelConfig::DualEncoder(c) => ("image", &c.vision),
                ModelConfig::Cnn(_) => unreachable!(),
            };
            for i in 0..v.layers {
                crate::nn::init_adapter(
                    &mut extra,
                    &format!("{prefix}.blocks.{i}.adapter"),
                    v.embed_dim,
                    strategy.bottleneck_dim,
                    &mut rng,
                );
            }
            if let ModelConfig::DualEncoder(c) = m {
                crate::nn::init_adapter(&mut extra, POST_ADAPTER, c.joint_dim, strategy.bottleneck_dim, &mut rng);
            }
            hooks.adapters = true;
        }
        (TuningKind::Bias, _) => {
            trainable.extend(backbone_names()?.into_iter().filter(|n| is_bias(n)));
        }
    }
    trainable.extend(extra.names().map(String::from));
    Ok(TuningAttachment {
        strategy,
        extra,
        trainable,
        hooks,
    })
}

fn vision(model: &ModelConfig) -> &crate::models::ViTConfig {
    match model {
        ModelConfig::Vit(v) => v,
        ModelConfig::DualEncoder(c) => &c.vision,
        ModelConfig::Cnn(_) => unreachable!("CNN rejected before"),
    }
}

impl TuningAttachment {
    /// Backbone plus extra modules, with exactly the strategy's names trainable.
    pub fn attach(&self, backbone: &ParamSet) -> Result<ParamSet> {
        let mut params = backbone.clone();
        params.freeze_all();
        for (name, p) in self.extra.iter() {
            if params.contains(name) {
                return Err(Error::Contract(format!("backbone already has an entry '{name}'")));
            }
            params.insert(name, p.tensor.clone(), true);
        }
        for name in &self.trainable {
            params.set_trainable(name, true)?;
        }
        Ok(params)
    }
}

/// Trainable-parameter differences shipped from a client, with its sample count.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaUpdate {
    pub entries: ParamSet,
    pub weight: u64,
    pub byte_size: usize,
}

impl DeltaUpdate {
    pub fn new(entries: ParamSet, weight: u64) -> Self {
        let byte_size = entries.encoded_len();
        Self {
            entries,
            weight,
            byte_size,
        }
    }

    /// All-zero delta over the trainable names of `params`.
    pub fn zeros_like(params: &ParamSet, weight: u64) -> Self {
        let mut entries = ParamSet::new();
        for (name, p) in params.iter().filter(|(_, p)| p.trainable) {
            entries.insert(name, Tensor::zeros(p.tensor.shape()), true);
        }
        Self::new(entries, weight)
    }

    /// FTPS encoding of the entries followed by the little-endian u64 weight.
    /// `byte_size` counts the FTPS part only, matching [`tuned_param_bytes`].
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.entries.to_bytes();
        out.extend_from_slice(&self.weight.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (entries, used) = ParamSet::decode_prefix(bytes)?;
        let mut r = Reader { bytes, pos: used };
        let weight = r.u64()?;
        if r.pos != bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes after delta weight",
                bytes.len() - r.pos
            )));
        }
        Ok(Self::new(entries, weight))
    }
}

/// `after − before` over the trainable names; every frozen entry must be
/// bitwise unchanged.
pub fn extract_delta(before: &ParamSet, after: &ParamSet, weight: u64) -> Result<DeltaUpdate> {
    if before.len() != after.len() || before.names().zip(after.names()).any(|(a, b)| a != b) {
        return Err(Error::Contract("before/after parameter sets differ in names".into()));
    }
    let mut entries = ParamSet::new();
    for ((name, b), (_, a)) in before.iter().zip(after.iter()) {
        if a.trainable != b.trainable {
            return Err(Error::Contract(format!("trainable flag of '{name}' changed")));
        }
        if a.tensor.shape() != b.tensor.shape() {
            return Err(Error::dim("extract_delta", format!("shape of '{name}' changed")));
        }
        if !b.trainable {
            if !a.tensor.bitwise_eq(&b.tensor) {
                return Err(Error::FreezingViolation(name.to_string()));
            }
            continue;
        }
        let diff = a.tensor.data().iter().zip(b.tensor.data()).map(|(x, y)| x - y).collect();
        entries.insert(name, Tensor::new(b.tensor.shape().to_vec(), diff)?, true);
    }
    Ok(DeltaUpdate::new(entries, weight))
}

/// Adds `delta` onto the trainable entries of `params`.
pub fn apply_delta(params: &mut ParamSet, delta: &DeltaUpdate) -> Result<()> {
    for (name, d) in delta.entries.iter() {
        let p = params
            .get(name)
            .map_err(|_| Error::Contract(format!("delta names unknown parameter '{name}'")))?;
        if !p.trainable {
            return Err(Error::Contract(format!("delta targets frozen parameter '{name}'")));
        }
        if p.tensor.shape() != d.tensor.shape() {
            return Err(Error::dim("apply_delta", format!("shape mismatch on '{name}'")));
        }
    }
    for (name, d) in delta.entries.iter() {
        let p = params.get_mut(name)?;
        for (w, x) in p.tensor.data_mut().iter_mut().zip(d.tensor.data()) {
            *w += x;
        }
    }
    Ok(())
}

/// Serialized size in bytes of the trainable subset (the per-round payload `s`).
pub fn tuned_param_bytes(params: &ParamSet) -> usize {
    params.trainable_subset().encoded_len()
}
