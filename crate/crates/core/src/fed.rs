//! Federated orchestration: client sampling, local fine-tuning, weighted delta
//! aggregation, plus the local-only baseline and post-hoc personalization.

use log::debug;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ClientDataset;
use crate::error::{Error, Result};
use crate::metrics::{convergence_round, macro_f1, weighted_accuracy, ConvergenceRule};
use crate::models::{Hooks, ModelConfig};
use crate::optim::sgd_step;
use crate::params::ParamSet;
use crate::rng::{derive_seed, seeded, streams};
use crate::tensor::Tensor;
use crate::tuning::{apply_delta, extract_delta, DeltaUpdate};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedConfig {
    pub sample_rate: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Stop once the convergence rule fires instead of running all rounds.
    pub stop_at_convergence: bool,
    pub convergence: ConvergenceRule,
    /// Worker threads for client updates; 1 runs sequentially.
    pub jobs: usize,
}

impl Default for FedConfig {
    fn default() -> Self {
        Self {
            sample_rate: 1.0,
            rounds: 50,
            local_epochs: 5,
            lr: 0.05,
            batch_size: 8,
            seed: 0,
            stop_at_convergence: false,
            convergence: ConvergenceRule::default(),
            jobs: 1,
        }
    }
}

impl FedConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate > 0.0 && self.sample_rate <= 1.0) {
            return Err(Error::Config(format!("sample_rate must lie in (0, 1], got {}", self.sample_rate)));
        }
        if self.rounds == 0 || self.local_epochs == 0 {
            return Err(Error::Config("rounds and local_epochs must be >= 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        self.convergence.validate()
    }
}

/// Uniform subset of `round(n · rate)` (at least one) client ids, ascending.
pub fn sample_clients<R: Rng + ?Sized>(n: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    let k = ((n as f64 * rate).round() as usize).clamp(1, n.max(1));
    if k >= n {
        return (0..n).collect();
    }
    let mut ids = index::sample(rng, n, k).into_vec();
    ids.sort_unstable();
    ids
}

/// A model plus the tuning hooks it runs with.
#[derive(Debug, Clone, Copy)]
pub struct Learner<'a> {
    pub model: &'a ModelConfig,
    pub hooks: &'a Hooks,
}

#[derive(Debug, Clone)]
pub struct ClientOutcome {
    pub delta: DeltaUpdate,
    /// Mean mini-batch loss of the last local epoch; NaN for an empty client.
    pub last_loss: f64,
}

/// `epochs` of mini-batch SGD from `global` on the client's training set.
/// The shuffle stream depends on (seed, round, client) only.
pub fn client_update(
    learner: Learner<'_>,
    client: &ClientDataset,
    global: &ParamSet,
    cfg: &FedConfig,
    epochs: usize,
    round: usize,
) -> Result<ClientOutcome> {
    let data = &client.train;
    if data.is_empty() {
        return Ok(ClientOutcome {
            delta: DeltaUpdate::zeros_like(global, 0),
            last_loss: f64::NAN,
        });
    }
    let mut local = global.clone();
    let mut rng = seeded(
        derive_seed(cfg.seed, round as u64),
        streams::LOCAL_TRAINING + client.id as u64,
    );
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut last_loss = f64::NAN;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for batch in order.chunks(cfg.batch_size) {
            let images: Vec<&Tensor> = batch.iter().map(|&i| &data.images[i]).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();
            let (loss, grads) = learner.model.loss_and_grads(&local, learner.hooks, &images, &labels)?;
            sgd_step(&mut local, &grads, cfg.lr)?;
            total += loss;
            batches += 1;
        }
        last_loss = total / batches as f64;
    }
    Ok(ClientOutcome {
        delta: extract_delta(global, &local, data.len() as u64)?,
        last_loss,
    })
}

/// `Σ (w_c / Σw) Δ_c`, accumulated in the given (ascending client id) order.
pub fn aggregate(deltas: &[DeltaUpdate]) -> Result<DeltaUpdate> {
    let first = deltas
        .first()
        .ok_or_else(|| Error::Contract("aggregate needs at least one delta".into()))?;
    for d in &deltas[1..] {
        let same = d.entries.len() == first.entries.len()
            && d.entries.iter().zip(first.entries.iter()).all(|((a, x), (b, y))| {
                a == b && x.tensor.shape() == y.tensor.shape()
            });
        if !same {
            return Err(Error::Contract("deltas carry different parameter sets".into()));
        }
    }
    let total: u64 = deltas.iter().map(|d| d.weight).sum();
    let mut entries = ParamSet::new();
    for (name, p) in first.entries.iter() {
        let mut acc = vec![0.0; p.tensor.numel()];
        if total > 0 {
            for d in deltas {
                let w = d.weight as f64 / total as f64;
                for (a, x) in acc.iter_mut().zip(d.entries.tensor(name)?.data()) {
                    *a += w * x;
                }
            }
        }
        entries.insert(name, Tensor::new(p.tensor.shape().to_vec(), acc)?, true);
    }
    Ok(DeltaUpdate::new(entries, total))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub sampled: Vec<usize>,
    pub client_loss: Vec<f64>,
    pub client_train_acc: Vec<f64>,
    pub train_acc: f64,
    pub test_acc: f64,
    pub f1: f64,
    pub delta_bytes: u64,
    pub converged: bool,
}

/// Weighted scores of one parameter set (or one per client) over all clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    /// `(correct, total)` per client on its test set.
    pub per_client: Vec<(usize, usize)>,
    pub test_acc: f64,
    pub f1: f64,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub records: Vec<RoundRecord>,
    pub params: ParamSet,
    pub convergence_round: Option<usize>,
    pub scores: Scores,
}

impl RunResult {
    pub fn final_record(&self) -> &RoundRecord {
        self.records.last().expect("at least one round")
    }

    pub fn total_upload_bytes(&self) -> u64 {
        self.records.iter().map(|r| r.delta_bytes).sum()
    }
}

fn pool(jobs: usize) -> Result<Option<rayon::ThreadPool>> {
    if jobs <= 1 {
        return Ok(None);
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map(Some)
        .map_err(|e| Error::Config(format!("cannot start {jobs} workers: {e}")))
}

/// Maps `f` over `ids`, keeping the input order whatever the schedule.
fn map_ordered<T, F>(pool: Option<&rayon::ThreadPool>, ids: &[usize], f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    match pool {
        Some(p) => p.install(|| ids.par_iter().map(|&i| f(i)).collect()),
        None => ids.iter().map(|&i| f(i)).collect(),
    }
}

fn check_ids(clients: &[ClientDataset]) -> Result<()> {
    if clients.is_empty() {
        return Err(Error::Config("no clients".into()));
    }
    if clients.iter().enumerate().any(|(i, c)| c.id != i) {
        return Err(Error::Contract("client ids must be 0..n in order".into()));
    }
    Ok(())
}

/// Scores each client's test set under `params_of(client)`.
fn score<'a, F>(
    learner: Learner<'_>,
    pool: Option<&rayon::ThreadPool>,
    clients: &[ClientDataset],
    params_of: F,
) -> Result<Scores>
where
    F: Fn(usize) -> &'a ParamSet + Sync + Send,
{
    let ids: Vec<usize> = (0..clients.len()).collect();
    let evals = map_ordered(pool, &ids, |c| {
        learner.model.evaluate(params_of(c), learner.hooks, &clients[c].test)
    })?;
    let per_client: Vec<(usize, usize)> = evals.iter().map(|e| (e.correct, e.total)).collect();
    let preds: Vec<usize> = evals.iter().flat_map(|e| e.predictions.iter().copied()).collect();
    let labels: Vec<usize> = clients.iter().flat_map(|c| c.test.labels.iter().copied()).collect();
    Ok(Scores {
        test_acc: weighted_accuracy(&per_client)?,
        f1: macro_f1(&preds, &labels, learner.model.num_classes()),
        per_client,
    })
}

/// Test scores of one shared parameter set over every client.
pub fn evaluate_global(learner: Learner<'_>, clients: &[ClientDataset], params: &ParamSet) -> Result<Scores> {
    score(learner, None, clients, |_| params)
}

/// FedAvg over `rounds`: sample, train locally, aggregate, apply.
pub fn run_federated(
    learner: Learner<'_>,
    cfg: &FedConfig,
    clients: &[ClientDataset],
    initial: &ParamSet,
) -> Result<RunResult> {
    cfg.validate()?;
    check_ids(clients)?;
    let pool = pool(cfg.jobs)?;
    let pool = pool.as_ref();
    let mut global = initial.clone();
    let mut sampler = seeded(cfg.seed, streams::CLIENT_SAMPLING);
    let mut records = Vec::new();
    let mut history = Vec::new();
    let mut converged_at = None;
    let all: Vec<usize> = (0..clients.len()).collect();
    for t in 1..=cfg.rounds {
        let sampled = sample_clients(clients.len(), cfg.sample_rate, &mut sampler);
        let outcomes = map_ordered(pool, &sampled, |c| {
            client_update(learner, &clients[c], &global, cfg, cfg.local_epochs, t)
        })?;
        let deltas: Vec<DeltaUpdate> = outcomes.iter().map(|o| o.delta.clone()).collect();
        let delta_bytes = deltas.iter().map(|d| d.byte_size as u64).sum();
        apply_delta(&mut global, &aggregate(&deltas)?)?;

        let train = map_ordered(pool, &all, |c| learner.model.evaluate(&global, learner.hooks, &clients[c].train))?;
        let train_pairs: Vec<(usize, usize)> = train.iter().map(|e| (e.correct, e.total)).collect();
        let train_acc = weighted_accuracy(&train_pairs)?;
        history.push(train_acc);
        if converged_at.is_none() {
            converged_at = convergence_round(&history, &cfg.convergence);
        }
        let scores = score(learner, pool, clients, |_| &global)?;
        debug!("round {t}: train {train_acc:.4} test {:.4}", scores.test_acc);
        records.push(RoundRecord {
            round: t,
            client_loss: outcomes.iter().map(|o| o.last_loss).collect(),
            client_train_acc: sampled.iter().map(|&c| train[c].accuracy()).collect(),
            sampled,
            train_acc,
            test_acc: scores.test_acc,
            f1: scores.f1,
            delta_bytes,
            converged: converged_at.is_some(),
        });
        if cfg.stop_at_convergence && converged_at.is_some() {
            break;
        }
    }
    let scores = score(learner, pool, clients, |_| &global)?;
    Ok(RunResult {
        records,
        params: global,
        convergence_round: converged_at,
        scores,
    })
}

#[derive(Debug, Clone)]
pub struct LocalResult {
    pub params: Vec<ParamSet>,
    pub scores: Scores,
}

/// Each client trains alone with the same compute as the federated run:
/// `rounds` segments of `local_epochs` epochs, each applied as its own delta.
pub fn run_local_only(
    learner: Learner<'_>,
    cfg: &FedConfig,
    clients: &[ClientDataset],
    initial: &ParamSet,
) -> Result<LocalResult> {
    cfg.validate()?;
    check_ids(clients)?;
    let pool = pool(cfg.jobs)?;
    let ids: Vec<usize> = (0..clients.len()).collect();
    let params = map_ordered(pool.as_ref(), &ids, |c| {
        let mut p = initial.clone();
        for t in 1..=cfg.rounds {
            let out = client_update(learner, &clients[c], &p, cfg, cfg.local_epochs, t)?;
            apply_delta(&mut p, &out.delta)?;
        }
        Ok(p)
    })?;
    let scores = score(learner, pool.as_ref(), clients, |c| &params[c])?;
    Ok(LocalResult { params, scores })
}

/// Continues training each client from the global model for `local_rounds`
/// epochs on its own data and scores the personalized models.
pub fn personalize_perfedavg(
    learner: Learner<'_>,
    cfg: &FedConfig,
    clients: &[ClientDataset],
    global: &ParamSet,
    local_rounds: usize,
) -> Result<LocalResult> {
    check_ids(clients)?;
    let pool = pool(cfg.jobs)?;
    let ids: Vec<usize> = (0..clients.len()).collect();
    let params = map_ordered(pool.as_ref(), &ids, |c| {
        let mut p = global.clone();
        if local_rounds > 0 {
            let out = client_update(learner, &clients[c], &p, cfg, local_rounds, cfg.rounds + 1)?;
            apply_delta(&mut p, &out.delta)?;
        }
        Ok(p)
    })?;
    let scores = score(learner, pool.as_ref(), clients, |c| &params[c])?;
    Ok(LocalResult { params, scores })
}
