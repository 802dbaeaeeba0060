//! TOML experiment configuration.
//!
//! Every table is optional and falls back to the defaults below; unknown keys
//! are rejected with their name and line.

use serde::{Deserialize, Serialize};

use crate::data::PartitionScheme;
use crate::error::{Error, Result};
use crate::metrics::ConvergenceRule;
use crate::tuning::{TuningKind, TuningStrategy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    Vit,
    VitSmall,
    DualEncoder,
    DualEncoderWeak,
    CnnScratch,
}

impl Backbone {
    pub fn as_str(self) -> &'static str {
        match self {
            Backbone::Vit => "vit",
            Backbone::VitSmall => "vit_small",
            Backbone::DualEncoder => "dual_encoder",
            Backbone::DualEncoderWeak => "dual_encoder_weak",
            Backbone::CnnScratch => "cnn_scratch",
        }
    }

    pub fn is_dual(self) -> bool {
        matches!(self, Backbone::DualEncoder | Backbone::DualEncoderWeak)
    }

    pub fn is_pretrained(self) -> bool {
        self != Backbone::CnnScratch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Federated,
    LocalOnly,
    Perfedavg,
    ZeroShot,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Federated => "federated",
            Mode::LocalOnly => "local_only",
            Mode::Perfedavg => "perfedavg",
            Mode::ZeroShot => "zero_shot",
        }
    }
}

/// Model sizes: `desk` is the 16×16 / d=32 / 4-layer configuration, `compact`
/// an 8×8 / d=16 / 2-layer one for quick trend runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scale {
    Desk,
    Compact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub classes: usize,
    pub scale: Scale,
    pub prototype_seed: u64,
    /// Pixel noise of the pre-training (source) task.
    pub source_noise: f64,
    pub source_per_class: usize,
    /// Pixel noise of the downstream task.
    pub noise: f64,
    pub domain_shift: f64,
    pub brightness: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            scale: Scale::Desk,
            prototype_seed: 0,
            source_noise: 0.5,
            source_per_class: 100,
            noise: 0.7,
            domain_shift: 0.05,
            brightness: 10.0,
            train_per_class: 200,
            test_per_class: 60,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub target_accuracy: f64,
    /// Gate for `dual_encoder_weak`.
    pub weak_target_accuracy: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            max_epochs: 60,
            batch_size: 16,
            lr: 3e-3,
            target_accuracy: 0.95,
            weak_target_accuracy: 0.80,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FedSection {
    pub clients: usize,
    pub sample_rate: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub test_per_client: usize,
    pub perfedavg_rounds: usize,
    pub convergence: ConvergenceRule,
}

impl Default for FedSection {
    fn default() -> Self {
        Self {
            clients: 10,
            sample_rate: 1.0,
            rounds: 50,
            local_epochs: 5,
            lr: 0.05,
            batch_size: 8,
            test_per_client: 50,
            perfedavg_rounds: 25,
            convergence: ConvergenceRule::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TuningSection {
    pub prompt_len: usize,
    pub bottleneck_dim: usize,
}

impl Default for TuningSection {
    fn default() -> Self {
        Self {
            prompt_len: 4,
            bottleneck_dim: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    pub backbones: Vec<Backbone>,
    pub strategies: Vec<TuningKind>,
    pub partitions: Vec<PartitionScheme>,
    pub shots: Vec<usize>,
    pub alphas: Vec<f64>,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
    pub shards_per_client: usize,
    pub per_class_pool: usize,
}

impl Default for GridSection {
    fn default() -> Self {
        Self {
            backbones: vec![Backbone::Vit],
            strategies: vec![TuningKind::Head, TuningKind::Bias],
            partitions: vec![PartitionScheme::IidKshot],
            shots: vec![16],
            alphas: vec![1.0],
            modes: vec![Mode::Federated],
            seeds: vec![0],
            shards_per_client: 2,
            per_class_pool: 80,
        }
    }
}

/// A full experiment grid: task, pre-training, federation and the cartesian
/// axes to sweep.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub task: TaskConfig,
    pub pretrain: PretrainConfig,
    pub fed: FedSection,
    pub tuning: TuningSection,
    pub grid: GridSection,
}

impl ExperimentGrid {
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        let empty = [
            ("backbones", g.backbones.is_empty()),
            ("strategies", g.strategies.is_empty()),
            ("partitions", g.partitions.is_empty()),
            ("shots", g.shots.is_empty()),
            ("alphas", g.alphas.is_empty()),
            ("modes", g.modes.is_empty()),
            ("seeds", g.seeds.is_empty()),
        ];
        if let Some((name, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(Error::Config(format!("grid.{name} must not be empty")));
        }
        if let Some(a) = g.alphas.iter().find(|a| !(**a > 0.0 && a.is_finite())) {
            return Err(Error::Config(format!("grid.alphas: alpha must be > 0, got {a}")));
        }
        if g.shots.contains(&0) {
            return Err(Error::Config("grid.shots: k must be >= 1".into()));
        }
        if self.task.classes < 2 {
            return Err(Error::Config("task.classes must be >= 2".into()));
        }
        if self.fed.clients == 0 {
            return Err(Error::Config("fed.clients must be >= 1".into()));
        }
        for kind in &g.strategies {
            self.strategy(*kind).validate()?;
        }
        self.fed_config(0).validate()
    }

    pub fn strategy(&self, kind: TuningKind) -> TuningStrategy {
        TuningStrategy {
            kind,
            prompt_len: self.tuning.prompt_len,
            bottleneck_dim: self.tuning.bottleneck_dim,
        }
    }

    pub fn fed_config(&self, seed: u64) -> crate::fed::FedConfig {
        crate::fed::FedConfig {
            sample_rate: self.fed.sample_rate,
            rounds: self.fed.rounds,
            local_epochs: self.fed.local_epochs,
            lr: self.fed.lr,
            batch_size: self.fed.batch_size,
            seed,
            stop_at_convergence: false,
            convergence: self.fed.convergence,
            jobs: 1,
        }
    }
}

pub fn parse_config(text: &str) -> Result<ExperimentGrid> {
    let grid: ExperimentGrid = toml::from_str(text).map_err(|e| {
        let line = e
            .span()
            .map(|s| text[..s.start.min(text.len())].matches('\n').count() + 1)
            .unwrap_or(0);
        let message = e.message().to_string();
        let key = message
            .split('`')
            .nth(1)
            .map(String::from)
            .unwrap_or_else(|| key_at(text, line));
        Error::Parse { key, line, message }
    })?;
    grid.validate()?;
    Ok(grid)
}

/// Best-effort `table.key` name for a line, used when the message names none.
fn key_at(text: &str, line: usize) -> String {
    let mut table = String::new();
    for (i, l) in text.lines().enumerate() {
        let t = l.trim();
        if t.starts_with('[') {
            table = t.trim_matches(|c| c == '[' || c == ']').to_string();
        }
        if i + 1 == line {
            let key = t.split('=').next().unwrap_or("").trim();
            return if table.is_empty() { key.to_string() } else { format!("{table}.{key}") };
        }
    }
    "<document>".to_string()
}

pub fn load_config(path: &std::path::Path) -> Result<ExperimentGrid> {
    parse_config(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_gets_defaults() {
        let g = parse_config("").unwrap();
        assert_eq!(g, ExperimentGrid::default());
        let g = parse_config("[fed]\nrounds = 3\n").unwrap();
        assert_eq!(g.fed.rounds, 3);
        assert_eq!(g.fed.local_epochs, 5);
    }

    #[test]
    fn unknown_key_is_named_with_line() {
        let err = parse_config("[fed]\nrounds = 3\nsutdent_lr = 0.1\n").unwrap_err();
        match err {
            Error::Parse { key, line, .. } => {
                assert_eq!(key, "sutdent_lr");
                assert_eq!(line, 3);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn type_errors_carry_the_line() {
        match parse_config("[grid]\nseeds = [1]\nshots = \"many\"\n").unwrap_err() {
            Error::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn nonpositive_alpha_is_rejected() {
        let err = parse_config("[grid]\nalphas = [0.5, 0.0]\n").unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(parse_config("[grid]\nseeds = []\n").is_err());
    }

    #[test]
    fn enums_parse_from_snake_case() {
        let g = parse_config(
            "[grid]\nbackbones = [\"dual_encoder_weak\", \"cnn_scratch\"]\nstrategies = [\"prompt_text\"]\npartitions = [\"shard_noniid\", \"dirichlet\"]\nmodes = [\"zero_shot\", \"perfedavg\"]\n",
        )
        .unwrap();
        assert_eq!(g.grid.backbones, [Backbone::DualEncoderWeak, Backbone::CnnScratch]);
        assert_eq!(g.grid.modes, [Mode::ZeroShot, Mode::Perfedavg]);
    }
}
