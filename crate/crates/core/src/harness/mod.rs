//! Experiment grid execution and artifact emission.
//!
//! A grid expands into cells (backbone × strategy × partition × mode × seed).
//! Each cell writes `cells/<id>/manifest.json` and `cells/<id>/metrics.csv`;
//! the grid writes `summary.csv` and `cost.csv` after sorting cells by id.

pub mod config;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use config::{
    load_config, parse_config, Backbone, ExperimentGrid, FedSection, GridSection, Mode, PretrainConfig, Scale,
    TaskConfig, TuningSection,
};

use crate::cost::comm_cost;
use crate::data::{
    allocate_test, gen_synthetic_task, heterogeneity_metrics, partition, ClientDataset, Dataset,
    HeterogeneityMetrics, PartitionScheme, PartitionSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::fed::{evaluate_global, personalize_perfedavg, run_federated, run_local_only, Learner, RoundRecord};
use crate::models::{
    pretrain_backbone, CnnConfig, DualEncoderConfig, Hooks, ModelConfig, PretrainOptions, ViTConfig,
};
use crate::nn::LAYER_NORM_EPS;
use crate::params::ParamSet;
use crate::rng::{derive_seed, seeded, streams};
use crate::tuning::{build_tuning, tuned_param_bytes, TuningKind, PROMPT_INIT_STD};

/// Offset separating test-pool sample ids from training-pool ids.
const TEST_ID_OFFSET: u64 = 1 << 40;

pub fn model_for(backbone: Backbone, task: &TaskConfig) -> ModelConfig {
    let c = task.classes;
    let (side, d, layers, heads) = match task.scale {
        Scale::Desk => (16, 32, 4, 4),
        Scale::Compact => (8, 16, 2, 2),
    };
    let vit = |d: usize, layers: usize, heads: usize| ViTConfig {
        image_side: side,
        patch_side: 4,
        channels: 1,
        embed_dim: d,
        layers,
        heads,
        mlp_ratio: 2.0,
        num_classes: c,
    };
    let dual = |d: usize, layers: usize, heads: usize| DualEncoderConfig {
        vision: vit(d, layers, heads),
        class_embed_dim: d,
        text_heads: heads,
        joint_dim: d,
        num_classes: c,
        ..DualEncoderConfig::default()
    };
    let halved_heads = (heads / 2).max(1);
    match backbone {
        Backbone::Vit => ModelConfig::Vit(vit(d, layers, heads)),
        Backbone::VitSmall => ModelConfig::Vit(vit(d / 2, (layers / 2).max(1), halved_heads)),
        Backbone::DualEncoder => ModelConfig::DualEncoder(dual(d, layers, heads)),
        Backbone::DualEncoderWeak => ModelConfig::DualEncoder(dual(d / 2, (layers / 2).max(1), halved_heads)),
        Backbone::CnnScratch => ModelConfig::Cnn(CnnConfig {
            image_side: side,
            num_classes: c,
            ..CnnConfig::default()
        }),
    }
}

fn image_side(task: &TaskConfig) -> usize {
    match task.scale {
        Scale::Desk => 16,
        Scale::Compact => 8,
    }
}

fn task_spec(task: &TaskConfig) -> SyntheticSpec {
    SyntheticSpec {
        classes: task.classes,
        image_side: image_side(task),
        channels: 1,
        per_class: task.train_per_class,
        noise_std: task.noise,
        domain_shift: task.domain_shift,
        brightness: task.brightness,
        prototype_seed: task.prototype_seed,
        id_offset: 0,
    }
}

/// Pre-training data: `(train, holdout)` of the unshifted source task.
pub fn source_task(task: &TaskConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = SyntheticSpec {
        per_class: task.source_per_class,
        noise_std: task.source_noise,
        domain_shift: 0.0,
        ..task_spec(task)
    };
    let train = gen_synthetic_task(&spec, derive_seed(seed, 1))?;
    let holdout = SyntheticSpec {
        per_class: (task.source_per_class / 2).max(1),
        id_offset: TEST_ID_OFFSET,
        ..spec
    };
    Ok((train, gen_synthetic_task(&holdout, derive_seed(seed, 2))?))
}

/// Downstream `(train pool, test pool)` for an experiment seed.
pub fn downstream_task(task: &TaskConfig, seed: u64) -> Result<(Dataset, Dataset)> {
    let spec = task_spec(task);
    let train = gen_synthetic_task(&spec, derive_seed(seed, 101))?;
    let test = SyntheticSpec {
        per_class: task.test_per_class,
        id_offset: TEST_ID_OFFSET,
        ..spec
    };
    Ok((train, gen_synthetic_task(&test, derive_seed(seed, 102))?))
}

/// Pre-trains a backbone on the source task, or initializes the CNN.
pub fn prepare_backbone(grid: &ExperimentGrid, backbone: Backbone) -> Result<ParamSet> {
    let model = model_for(backbone, &grid.task);
    let p = &grid.pretrain;
    if !backbone.is_pretrained() {
        return model.init_params(&mut seeded(p.seed, streams::BACKBONE_INIT));
    }
    let (source, holdout) = source_task(&grid.task, p.seed)?;
    let opts = PretrainOptions {
        max_epochs: p.max_epochs,
        batch_size: p.batch_size,
        lr: p.lr,
        target_accuracy: if backbone == Backbone::DualEncoderWeak {
            p.weak_target_accuracy
        } else {
            p.target_accuracy
        },
        seed: p.seed,
    };
    let out = pretrain_backbone(&model, &source, &holdout, &opts)?;
    info!(
        "pre-trained {} to {:.4} in {} epochs",
        backbone.as_str(),
        out.source_accuracy,
        out.epochs
    );
    Ok(out.params)
}

pub fn backbone_path(dir: &Path, backbone: Backbone) -> PathBuf {
    dir.join(format!("{}.ftps", backbone.as_str()))
}

/// Loads cached backbones from `cache` when present, otherwise builds them.
pub fn prepare_backbones(
    grid: &ExperimentGrid,
    cache: Option<&Path>,
) -> BTreeMap<Backbone, std::result::Result<ParamSet, String>> {
    let mut wanted = grid.grid.backbones.clone();
    wanted.sort();
    wanted.dedup();
    wanted
        .into_iter()
        .map(|b| {
            let cached = cache.map(|d| backbone_path(d, b)).filter(|p| p.exists());
            let built = match cached {
                Some(path) => ParamSet::load(&path),
                None => prepare_backbone(grid, b),
            };
            (b, built.map_err(|e| e.to_string()))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub backbone: Backbone,
    /// `None` for zero-shot cells.
    pub strategy: Option<TuningKind>,
    pub partition: PartitionScheme,
    /// Shots for IID and shard partitions.
    pub shots: Option<usize>,
    /// Concentration for Dirichlet partitions.
    pub alpha: Option<f64>,
    pub mode: Mode,
    pub seed: u64,
}

impl Cell {
    pub fn id(&self) -> String {
        format!(
            "{}__{}__{}__{}__s{}",
            self.backbone.as_str(),
            self.strategy.map_or("none", TuningKind::as_str),
            self.setting(),
            self.mode.as_str(),
            self.seed
        )
    }

    /// Partition label, e.g. `iid_kshot-k16` or `dirichlet-a0.1`.
    pub fn setting(&self) -> String {
        match (self.shots, self.alpha) {
            (Some(k), _) => format!("{}-k{k}", self.partition.as_str()),
            (_, Some(a)) => format!("{}-a{a}", self.partition.as_str()),
            _ => self.partition.as_str().to_string(),
        }
    }

    /// Same cell in another mode; used to pair federated with local-only.
    pub fn with_mode(&self, mode: Mode) -> Cell {
        Cell { mode, ..self.clone() }
    }

    pub fn partition_spec(&self, grid: &ExperimentGrid) -> PartitionSpec {
        let n = grid.fed.clients;
        let seed = derive_seed(self.seed, 201);
        match self.partition {
            PartitionScheme::IidKshot => PartitionSpec::iid(n, self.shots.unwrap_or(1), seed),
            PartitionScheme::ShardNoniid => {
                PartitionSpec::shards(n, grid.grid.shards_per_client, self.shots.unwrap_or(1), seed)
            }
            PartitionScheme::Dirichlet => {
                PartitionSpec::dirichlet(n, self.alpha.unwrap_or(1.0), grid.grid.per_class_pool, seed)
            }
        }
    }
}

fn mode_allowed(backbone: Backbone, mode: Mode) -> bool {
    match backbone {
        Backbone::CnnScratch => matches!(mode, Mode::Federated | Mode::LocalOnly),
        _ => true,
    }
}

/// Cartesian product of the grid axes, minus incompatible combinations,
/// sorted by cell id.
pub fn expand_cells(grid: &ExperimentGrid) -> Vec<Cell> {
    let g = &grid.grid;
    let mut settings: Vec<(PartitionScheme, Option<usize>, Option<f64>)> = Vec::new();
    for &p in &g.partitions {
        match p {
            PartitionScheme::Dirichlet => settings.extend(g.alphas.iter().map(|&a| (p, None, Some(a)))),
            _ => settings.extend(g.shots.iter().map(|&k| (p, Some(k), None))),
        }
    }
    let mut cells = Vec::new();
    for &backbone in &g.backbones {
        let model = model_for(backbone, &grid.task);
        let mut strategies: Vec<Option<TuningKind>> = if backbone == Backbone::CnnScratch {
            vec![Some(TuningKind::Full)]
        } else {
            g.strategies
                .iter()
                .filter(|&&k| build_tuning(grid.strategy(k), &model, 0).is_ok())
                .map(|&k| Some(k))
                .collect()
        };
        strategies.dedup();
        for &mode in &g.modes {
            if !mode_allowed(backbone, mode) {
                continue;
            }
            let per_mode: Vec<Option<TuningKind>> = if mode == Mode::ZeroShot {
                vec![None]
            } else {
                strategies.clone()
            };
            for strategy in per_mode {
                for &(partition, shots, alpha) in &settings {
                    for &seed in &g.seeds {
                        cells.push(Cell {
                            backbone,
                            strategy,
                            partition,
                            shots,
                            alpha,
                            mode,
                            seed,
                        });
                    }
                }
            }
        }
    }
    cells.sort_by_key(Cell::id);
    cells.dedup_by_key(|c| c.id());
    cells
}

/// Client datasets for a cell: partitioned training data plus test sets
/// allocated by each client's label distribution.
pub fn build_clients(grid: &ExperimentGrid, cell: &Cell) -> Result<Vec<ClientDataset>> {
    let (train, test) = downstream_task(&grid.task, cell.seed)?;
    let spec = cell.partition_spec(grid);
    let mut clients = partition(&train, &spec)?;
    allocate_test(&test, &mut clients, grid.fed.test_per_client, derive_seed(cell.seed, 202))?;
    Ok(clients)
}

/// One row of `summary.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub cell_id: String,
    pub backbone: String,
    pub strategy: String,
    pub setting: String,
    pub mode: String,
    pub seed: u64,
    pub status: String,
    /// Weighted test accuracy of the cell's final models.
    pub final_acc: Option<f64>,
    pub final_f1: Option<f64>,
    /// Global-model accuracy before personalization (perfedavg cells).
    pub global_acc: Option<f64>,
    /// Federated minus local-only accuracy, when both cells ran.
    pub relative_acc: Option<f64>,
    pub rounds_run: Option<usize>,
    pub convergence_round: Option<usize>,
    pub clients_per_round: Option<usize>,
    pub payload_bytes: Option<usize>,
    pub cost_bytes: Option<u64>,
}

/// One row of `cost.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub method: String,
    pub setting: String,
    pub seed: u64,
    pub r: u64,
    pub n: u64,
    pub s_bytes: u64,
    pub c_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub round: usize,
    pub train_acc: Option<f64>,
    pub test_acc: f64,
    pub f1: f64,
    pub bytes_up: u64,
    pub converged: bool,
}

/// Everything a cell produced; serialized as its manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: Cell,
    pub summary: SummaryRow,
    pub metrics: Vec<MetricsRow>,
    pub records: Vec<RoundRecord>,
    pub per_client: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    cell_id: String,
    seed: u64,
    code_version: String,
    config: ExperimentGrid,
    model: ModelConfig,
    defaults: BTreeMap<String, serde_json::Value>,
    outputs: BTreeMap<String, String>,
    wall_time_secs: f64,
    outcome: CellOutcome,
}

fn decided_defaults(model: &ModelConfig, grid: &ExperimentGrid, stop: bool) -> BTreeMap<String, serde_json::Value> {
    let temperature = match model {
        ModelConfig::DualEncoder(c) => serde_json::json!(c.temperature),
        _ => serde_json::Value::Null,
    };
    BTreeMap::from([
        ("layer_norm_eps".into(), serde_json::json!(LAYER_NORM_EPS)),
        ("temperature".into(), temperature),
        ("batch_size".into(), serde_json::json!(grid.fed.batch_size)),
        ("prompt_init_std".into(), serde_json::json!(PROMPT_INIT_STD)),
        ("adapter_init".into(), serde_json::json!("down ~ N(0, 1/d), up = 0")),
        ("linear_init".into(), serde_json::json!("weight ~ N(0, 1/fan_in), bias = 0")),
        ("f1".into(), serde_json::json!("macro")),
        ("convergence_signal".into(), serde_json::json!("global weighted train accuracy")),
        ("stop_at_convergence".into(), serde_json::json!(stop)),
        ("optimizer".into(), serde_json::json!("sgd")),
    ])
}

fn empty_row(cell: &Cell) -> SummaryRow {
    SummaryRow {
        cell_id: cell.id(),
        backbone: cell.backbone.as_str().into(),
        strategy: cell.strategy.map_or("none", TuningKind::as_str).into(),
        setting: cell.setting(),
        mode: cell.mode.as_str().into(),
        seed: cell.seed,
        status: "ok".into(),
        final_acc: None,
        final_f1: None,
        global_acc: None,
        relative_acc: None,
        rounds_run: None,
        convergence_round: None,
        clients_per_round: None,
        payload_bytes: None,
        cost_bytes: None,
    }
}

/// Runs one cell against a prepared backbone.
pub fn run_cell(grid: &ExperimentGrid, cell: &Cell, backbone: &ParamSet, stop_at_convergence: bool) -> Result<CellOutcome> {
    let model = model_for(cell.backbone, &grid.task);
    let clients = build_clients(grid, cell)?;
    let mut row = empty_row(cell);
    let mut cfg = grid.fed_config(cell.seed);
    cfg.stop_at_convergence = stop_at_convergence;

    let Some(kind) = cell.strategy else {
        let hooks = Hooks::default();
        let learner = Learner { model: &model, hooks: &hooks };
        let scores = evaluate_global(learner, &clients, backbone)?;
        row.final_acc = Some(scores.test_acc);
        row.final_f1 = Some(scores.f1);
        let metrics = vec![MetricsRow {
            round: 0,
            train_acc: None,
            test_acc: scores.test_acc,
            f1: scores.f1,
            bytes_up: 0,
            converged: false,
        }];
        return Ok(CellOutcome {
            cell: cell.clone(),
            summary: row,
            metrics,
            records: Vec::new(),
            per_client: scores.per_client,
        });
    };

    let attachment = build_tuning(grid.strategy(kind), &model, cell.seed)?;
    let mut initial = attachment.attach(backbone)?;
    if kind == TuningKind::Full {
        // From-scratch training: per-seed initialization rather than the shared one.
        initial = attachment.attach(&model.init_params(&mut seeded(cell.seed, streams::BACKBONE_INIT))?)?;
    }
    let learner = Learner {
        model: &model,
        hooks: &attachment.hooks,
    };
    let s = tuned_param_bytes(&initial);
    row.payload_bytes = Some(s);

    match cell.mode {
        Mode::LocalOnly => {
            let local = run_local_only(learner, &cfg, &clients, &initial)?;
            row.final_acc = Some(local.scores.test_acc);
            row.final_f1 = Some(local.scores.f1);
            row.rounds_run = Some(cfg.rounds);
            let metrics = vec![MetricsRow {
                round: cfg.rounds,
                train_acc: None,
                test_acc: local.scores.test_acc,
                f1: local.scores.f1,
                bytes_up: 0,
                converged: false,
            }];
            Ok(CellOutcome {
                cell: cell.clone(),
                summary: row,
                metrics,
                records: Vec::new(),
                per_client: local.scores.per_client,
            })
        }
        Mode::Federated | Mode::Perfedavg => {
            let run = run_federated(learner, &cfg, &clients, &initial)?;
            let rounds_run = run.records.len();
            let n_per_round = run.final_record().sampled.len();
            let r = run.convergence_round.unwrap_or(rounds_run);
            row.rounds_run = Some(rounds_run);
            row.convergence_round = run.convergence_round;
            row.clients_per_round = Some(n_per_round);
            row.cost_bytes = Some(comm_cost(r as u64, n_per_round as u64, s as u64).total_bytes);
            let metrics = run
                .records
                .iter()
                .map(|rec| MetricsRow {
                    round: rec.round,
                    train_acc: Some(rec.train_acc),
                    test_acc: rec.test_acc,
                    f1: rec.f1,
                    bytes_up: rec.delta_bytes,
                    converged: rec.converged,
                })
                .collect();
            let mut per_client = run.scores.per_client.clone();
            if cell.mode == Mode::Perfedavg {
                let pers = personalize_perfedavg(learner, &cfg, &clients, &run.params, grid.fed.perfedavg_rounds)?;
                row.global_acc = Some(run.scores.test_acc);
                row.final_acc = Some(pers.scores.test_acc);
                row.final_f1 = Some(pers.scores.f1);
                per_client = pers.scores.per_client;
            } else {
                row.final_acc = Some(run.scores.test_acc);
                row.final_f1 = Some(run.scores.f1);
            }
            Ok(CellOutcome {
                cell: cell.clone(),
                summary: row,
                metrics,
                records: run.records,
                per_client,
            })
        }
        Mode::ZeroShot => unreachable!("zero-shot cells carry no strategy"),
    }
}

/// Fills `relative_acc` on federated rows that have a local-only partner.
fn pair_relative(rows: &mut [SummaryRow], cells: &[Cell]) {
    let local: BTreeMap<String, f64> = rows
        .iter()
        .zip(cells)
        .filter(|(r, c)| c.mode == Mode::LocalOnly && r.final_acc.is_some())
        .map(|(r, c)| (c.with_mode(Mode::Federated).id(), r.final_acc.unwrap()))
        .collect();
    for row in rows.iter_mut() {
        if let (Some(acc), Some(l)) = (row.final_acc, local.get(&row.cell_id)) {
            row.relative_acc = Some(crate::metrics::relative_metric(acc, *l));
        }
    }
}

#[derive(Debug, Clone)]
pub struct GridReport {
    pub outcomes: Vec<CellOutcome>,
    pub summary: Vec<SummaryRow>,
    pub failures: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub out: Option<PathBuf>,
    pub jobs: usize,
    pub stop_at_convergence: bool,
    /// Directory of cached `<backbone>.ftps` files.
    pub backbone_cache: Option<PathBuf>,
    /// Replaces `grid.seeds` when set.
    pub seed: Option<u64>,
}

/// Executes every cell; failures are recorded and the grid continues.
pub fn run_grid(grid: &ExperimentGrid, opts: &RunOptions) -> Result<GridReport> {
    let mut grid = grid.clone();
    if let Some(seed) = opts.seed {
        grid.grid.seeds = vec![seed];
    }
    grid.validate()?;
    let backbones = prepare_backbones(&grid, opts.backbone_cache.as_deref());
    let cells = expand_cells(&grid);
    let stop = opts.stop_at_convergence;
    let run_one = |cell: &Cell| -> (Cell, std::result::Result<CellOutcome, String>, f64) {
        let start = Instant::now();
        let res = match &backbones[&cell.backbone] {
            Ok(p) => run_cell(&grid, cell, p, stop).map_err(|e| e.to_string()),
            Err(e) => Err(format!("backbone unavailable: {e}")),
        };
        (cell.clone(), res, start.elapsed().as_secs_f64())
    };
    let results: Vec<_> = if opts.jobs > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(opts.jobs)
            .build()
            .map_err(|e| Error::Config(format!("cannot start {} workers: {e}", opts.jobs)))?;
        pool.install(|| cells.par_iter().map(run_one).collect())
    } else {
        cells.iter().map(run_one).collect()
    };

    let mut outcomes = Vec::new();
    let mut rows = Vec::new();
    let mut failures = 0;
    let mut times = Vec::new();
    for (cell, res, secs) in results {
        match res {
            Ok(o) => {
                rows.push(o.summary.clone());
                outcomes.push(o);
            }
            Err(e) => {
                warn!("cell {} failed: {e}", cell.id());
                failures += 1;
                let mut row = empty_row(&cell);
                row.status = format!("failed: {e}");
                rows.push(row);
            }
        }
        times.push(secs);
    }
    pair_relative(&mut rows, &cells);
    for o in outcomes.iter_mut() {
        if let Some(r) = rows.iter().find(|r| r.cell_id == o.summary.cell_id) {
            o.summary = r.clone();
        }
    }
    if let Some(out) = &opts.out {
        write_grid(out, &grid, &outcomes, &rows, &cells, &times, stop)?;
    }
    Ok(GridReport {
        outcomes,
        summary: rows,
        failures,
    })
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Cost rows of the federated cells that ran, in cell-id order.
pub fn cost_rows(rows: &[SummaryRow]) -> Vec<CostRow> {
    rows.iter()
        .filter_map(|r| {
            let (n, s, c) = (r.clients_per_round?, r.payload_bytes?, r.cost_bytes?);
            let rounds = r.convergence_round.or(r.rounds_run)?;
            Some(CostRow {
                method: format!("{}/{}", r.backbone, r.strategy),
                setting: r.setting.clone(),
                seed: r.seed,
                r: rounds as u64,
                n: n as u64,
                s_bytes: s as u64,
                c_bytes: c,
            })
        })
        .collect()
}

fn write_grid(
    out: &Path,
    grid: &ExperimentGrid,
    outcomes: &[CellOutcome],
    rows: &[SummaryRow],
    cells: &[Cell],
    times: &[f64],
    stop: bool,
) -> Result<()> {
    let cell_dir = out.join("cells");
    fs::create_dir_all(&cell_dir)?;
    for o in outcomes {
        let id = o.summary.cell_id.clone();
        let dir = cell_dir.join(&id);
        fs::create_dir_all(&dir)?;
        write_csv(&dir.join("metrics.csv"), &o.metrics)?;
        let model = model_for(o.cell.backbone, &grid.task);
        let idx = cells.iter().position(|c| c.id() == id).unwrap_or(0);
        let manifest = Manifest {
            cell_id: id,
            seed: o.cell.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            config: grid.clone(),
            defaults: decided_defaults(&model, grid, stop),
            model,
            outputs: BTreeMap::from([
                ("metrics".into(), "metrics.csv".into()),
                ("manifest".into(), "manifest.json".into()),
            ]),
            wall_time_secs: times.get(idx).copied().unwrap_or(0.0),
            outcome: o.clone(),
        };
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    }
    write_csv(&out.join("summary.csv"), rows)?;
    write_csv(&out.join("cost.csv"), &cost_rows(rows))?;
    Ok(())
}

/// Rebuilds `summary.csv` and `cost.csv` from the manifests under `out/cells`.
pub fn summarize(out: &Path) -> Result<Vec<SummaryRow>> {
    let mut manifests = Vec::new();
    for entry in fs::read_dir(out.join("cells"))? {
        let path = entry?.path().join("manifest.json");
        if path.exists() {
            let m: Manifest = serde_json::from_str(&fs::read_to_string(&path)?)?;
            manifests.push(m);
        }
    }
    manifests.sort_by(|a, b| a.cell_id.cmp(&b.cell_id));
    let cells: Vec<Cell> = manifests.iter().map(|m| m.outcome.cell.clone()).collect();
    let mut rows: Vec<SummaryRow> = manifests.into_iter().map(|m| m.outcome.summary).collect();
    pair_relative(&mut rows, &cells);
    write_csv(&out.join("summary.csv"), &rows)?;
    write_csv(&out.join("cost.csv"), &cost_rows(&rows))?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionReport {
    pub setting: String,
    pub seed: u64,
    pub histograms: Vec<Vec<usize>>,
    pub metrics: HeterogeneityMetrics,
}

/// Per-client label histograms plus heterogeneity statistics, written as
/// `<stem>.json` and `<stem>.csv` (client, class, count) under `dir`.
pub fn emit_distribution_report(
    clients: &[ClientDataset],
    setting: &str,
    seed: u64,
    dir: &Path,
) -> Result<DistributionReport> {
    let histograms: Vec<Vec<usize>> = clients.iter().map(|c| c.label_histogram.clone()).collect();
    let report = DistributionReport {
        setting: setting.to_string(),
        seed,
        metrics: heterogeneity_metrics(&histograms),
        histograms,
    };
    fs::create_dir_all(dir)?;
    let stem = format!("{setting}__s{seed}");
    fs::write(dir.join(format!("{stem}.json")), serde_json::to_string_pretty(&report)?)?;
    let mut w = csv::Writer::from_path(dir.join(format!("{stem}.csv")))?;
    w.write_record(["client", "class", "count"])?;
    for (c, h) in report.histograms.iter().enumerate() {
        for (k, n) in h.iter().enumerate() {
            w.write_record([c.to_string(), k.to_string(), n.to_string()])?;
        }
    }
    w.flush()?;
    Ok(report)
}

/// Distribution reports for every partition setting and seed of the grid.
pub fn partition_reports(grid: &ExperimentGrid, dir: &Path) -> Result<Vec<DistributionReport>> {
    let mut probe = grid.clone();
    probe.grid.backbones = vec![Backbone::Vit];
    probe.grid.modes = vec![Mode::Federated];
    probe.grid.strategies = vec![TuningKind::Head];
    let mut out = Vec::new();
    for cell in expand_cells(&probe) {
        let clients = build_clients(grid, &cell)?;
        out.push(emit_distribution_report(&clients, &cell.setting(), cell.seed, dir)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ExperimentGrid {
        let mut g = ExperimentGrid::default();
        g.task.scale = Scale::Compact;
        g.task.classes = 3;
        g.task.train_per_class = 40;
        g.task.test_per_class = 20;
        g.fed.clients = 2;
        g.fed.rounds = 2;
        g.fed.local_epochs = 1;
        g.fed.test_per_client = 6;
        g.grid.shots = vec![2];
        g
    }

    #[test]
    fn expansion_filters_incompatible_pairs() {
        let mut g = tiny();
        g.grid.backbones = vec![Backbone::Vit, Backbone::DualEncoder, Backbone::CnnScratch];
        g.grid.strategies = vec![TuningKind::Head, TuningKind::PromptText];
        g.grid.modes = vec![Mode::Federated, Mode::ZeroShot];
        let ids: Vec<String> = expand_cells(&g).iter().map(Cell::id).collect();
        assert!(ids.contains(&"vit__head__iid_kshot-k2__federated__s0".to_string()));
        assert!(ids.contains(&"dual_encoder__prompt_text__iid_kshot-k2__federated__s0".to_string()));
        assert!(ids.contains(&"cnn_scratch__full__iid_kshot-k2__federated__s0".to_string()));
        assert!(!ids.iter().any(|i| i.starts_with("vit__prompt_text")));
        assert!(!ids.iter().any(|i| i.starts_with("dual_encoder__head")));
        assert!(!ids.iter().any(|i| i.starts_with("cnn_scratch__none")));
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn cell_ids_name_the_setting() {
        let c = Cell {
            backbone: Backbone::DualEncoderWeak,
            strategy: None,
            partition: PartitionScheme::Dirichlet,
            shots: None,
            alpha: Some(0.1),
            mode: Mode::ZeroShot,
            seed: 3,
        };
        assert_eq!(c.id(), "dual_encoder_weak__none__dirichlet-a0.1__zero_shot__s3");
    }

    #[test]
    fn test_and_train_ids_are_disjoint() {
        let g = tiny();
        let cell = &expand_cells(&g)[0];
        let clients = build_clients(&g, cell).unwrap();
        for c in &clients {
            assert!(c.test.ids.iter().all(|id| *id >= TEST_ID_OFFSET));
            assert!(c.train.ids.iter().all(|id| *id < TEST_ID_OFFSET));
        }
    }
}
