//! Client partitioning: IID k-shot, label-shard non-IID and Dirichlet.

use std::collections::BTreeSet;

use log::warn;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::Dataset;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, seeded, streams, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionScheme {
    IidKshot,
    ShardNoniid,
    Dirichlet,
}

impl PartitionScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            PartitionScheme::IidKshot => "iid_kshot",
            PartitionScheme::ShardNoniid => "shard_noniid",
            PartitionScheme::Dirichlet => "dirichlet",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSpec {
    pub scheme: PartitionScheme,
    pub clients: usize,
    /// Samples per class per client (IID and shard schemes).
    pub shots: usize,
    pub shards_total: usize,
    pub shards_per_client: usize,
    pub alpha: f64,
    pub per_class_pool: usize,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn iid(clients: usize, shots: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::IidKshot,
            clients,
            shots,
            shards_total: 2 * clients,
            shards_per_client: 2,
            alpha: 1.0,
            per_class_pool: 80,
            seed,
        }
    }

    pub fn shards(clients: usize, shards_per_client: usize, shots: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::ShardNoniid,
            shards_total: clients * shards_per_client,
            shards_per_client,
            ..Self::iid(clients, shots, seed)
        }
    }

    pub fn dirichlet(clients: usize, alpha: f64, per_class_pool: usize, seed: u64) -> Self {
        Self {
            scheme: PartitionScheme::Dirichlet,
            alpha,
            per_class_pool,
            ..Self::iid(clients, 1, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.clients == 0 {
            return Err(Error::Partition("at least one client is required".into()));
        }
        match self.scheme {
            PartitionScheme::IidKshot | PartitionScheme::ShardNoniid if self.shots == 0 => {
                Err(Error::Partition("shots must be >= 1".into()))
            }
            PartitionScheme::ShardNoniid
                if self.shards_total != self.clients * self.shards_per_client =>
            {
                Err(Error::Partition(format!(
                    "shards_total {} != clients {} x shards_per_client {}",
                    self.shards_total, self.clients, self.shards_per_client
                )))
            }
            PartitionScheme::Dirichlet if !(self.alpha > 0.0 && self.alpha.is_finite()) => {
                Err(Error::Partition(format!("alpha must be > 0, got {}", self.alpha)))
            }
            PartitionScheme::Dirichlet if self.per_class_pool == 0 => {
                Err(Error::Partition("per_class_pool must be >= 1".into()))
            }
            _ => Ok(()),
        }
    }
}

/// One client's private data.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub id: usize,
    pub train: Dataset,
    pub test: Dataset,
    pub label_histogram: Vec<usize>,
}

impl ClientDataset {
    pub fn new(id: usize, train: Dataset) -> Self {
        let label_histogram = train.histogram();
        let test = Dataset::empty(train.classes);
        Self { id, train, test, label_histogram }
    }
}

fn shuffled_by_class(data: &Dataset, rng: &mut SimRng) -> Vec<Vec<usize>> {
    let mut by = data.indices_by_class();
    for idx in by.iter_mut() {
        idx.shuffle(rng);
    }
    by
}

/// Disjoint per-client slices of every class, then `shots` samples per class
/// drawn without replacement from each client's slice.
pub fn partition_iid_kshot(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, streams::PARTITION);
    let by_class = shuffled_by_class(data, &mut rng);
    let n = spec.clients;
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, idx) in by_class.iter().enumerate() {
        let slice = idx.len() / n;
        if slice < spec.shots {
            return Err(Error::Partition(format!(
                "class {class} has {} samples: {n} clients x {} shots needs at least {}",
                idx.len(),
                spec.shots,
                n * spec.shots
            )));
        }
        for (c, chunk) in idx.chunks_exact(slice).take(n).enumerate() {
            let mut chunk = chunk.to_vec();
            chunk.shuffle(&mut rng);
            picks[c].extend_from_slice(&chunk[..spec.shots]);
        }
    }
    Ok(build_clients(data, picks))
}

/// Label-sorted data cut into `shards_total` equal shards; each client owns
/// `shards_per_client` random shards, subsampled to `shots` per owned class.
pub fn partition_shard_noniid(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    if data.len() % spec.shards_total != 0 || data.len() < spec.shards_total {
        return Err(Error::Partition(format!(
            "{} samples cannot be cut into {} equal shards",
            data.len(),
            spec.shards_total
        )));
    }
    let mut rng = seeded(spec.seed, streams::PARTITION);
    let sorted: Vec<usize> = shuffled_by_class(data, &mut rng).concat();
    let shard_size = data.len() / spec.shards_total;
    let shards: Vec<&[usize]> = sorted.chunks_exact(shard_size).collect();
    let mut order: Vec<usize> = (0..spec.shards_total).collect();
    order.shuffle(&mut rng);
    let mut picks = Vec::with_capacity(spec.clients);
    for c in 0..spec.clients {
        let owned = &order[c * spec.shards_per_client..(c + 1) * spec.shards_per_client];
        let mut by_class = vec![Vec::new(); data.classes];
        for &s in owned {
            for &i in shards[s] {
                by_class[data.labels[i]].push(i);
            }
        }
        let mut mine = Vec::new();
        for (class, mut idx) in by_class.into_iter().enumerate() {
            if idx.is_empty() {
                continue;
            }
            if idx.len() < spec.shots {
                return Err(Error::Partition(format!(
                    "client {c} holds {} samples of class {class}, fewer than {} shots",
                    idx.len(),
                    spec.shots
                )));
            }
            idx.shuffle(&mut rng);
            mine.extend_from_slice(&idx[..spec.shots]);
        }
        picks.push(mine);
    }
    Ok(build_clients(data, picks))
}

/// Symmetric Dirichlet draw. Samples `Gamma(α)` in log space as
/// `ln Gamma(α + 1) + ln(U) / α`, which stays finite for tiny α.
pub fn sample_dirichlet<R: Rng + ?Sized>(alpha: f64, n: usize, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha + 1.0, 1.0).expect("alpha must be positive");
    let logs: Vec<f64> = (0..n)
        .map(|_| {
            let g: f64 = gamma.sample(rng);
            let u: f64 = 1.0 - rng.random::<f64>();
            g.ln() + u.ln() / alpha
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|v| v / z).collect()
}

/// For every class, `per_class_pool` random samples are split across clients
/// by cumulative Dirichlet proportions `p ~ Dir(α·1ₙ)`. Clients may end up
/// empty.
pub fn partition_dirichlet(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    spec.validate()?;
    let mut rng = seeded(spec.seed, streams::PARTITION);
    let by_class = shuffled_by_class(data, &mut rng);
    let n = spec.clients;
    let pool = spec.per_class_pool;
    let mut picks: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (class, idx) in by_class.iter().enumerate() {
        if idx.len() < pool {
            return Err(Error::Partition(format!(
                "class {class} has {} samples, per_class_pool is {pool}",
                idx.len()
            )));
        }
        let p = sample_dirichlet(spec.alpha, n, &mut rng);
        let mut cum = 0.0;
        let mut start = 0;
        for (c, pc) in p.iter().enumerate() {
            cum += pc;
            let end = if c + 1 == n {
                pool
            } else {
                ((cum * pool as f64).floor() as usize).min(pool)
            };
            let end = end.max(start);
            picks[c].extend_from_slice(&idx[start..end]);
            start = end;
        }
    }
    Ok(build_clients(data, picks))
}

pub fn partition(data: &Dataset, spec: &PartitionSpec) -> Result<Vec<ClientDataset>> {
    match spec.scheme {
        PartitionScheme::IidKshot => partition_iid_kshot(data, spec),
        PartitionScheme::ShardNoniid => partition_shard_noniid(data, spec),
        PartitionScheme::Dirichlet => partition_dirichlet(data, spec),
    }
}

fn build_clients(data: &Dataset, picks: Vec<Vec<usize>>) -> Vec<ClientDataset> {
    picks
        .into_iter()
        .enumerate()
        .map(|(c, mut idx)| {
            idx.sort_unstable();
            ClientDataset::new(c, data.subset(&idx))
        })
        .collect()
}

/// Largest-remainder apportionment of `budget` proportional to `weights`.
/// Ties in the fractional part go to the lower index.
pub fn largest_remainder(weights: &[usize], budget: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let mut counts: Vec<usize> = weights.iter().map(|&w| w * budget / total).collect();
    let mut rems: Vec<(usize, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| ((w * budget) % total, i))
        .collect();
    rems.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let short = budget - counts.iter().sum::<usize>();
    for &(_, i) in rems.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Gives every client `per_client` test samples whose label proportions follow
/// its training histogram. Samples are drawn without replacement within a
/// client; different clients draw independently from the same pool.
pub fn allocate_test(
    test_pool: &Dataset,
    clients: &mut [ClientDataset],
    per_client: usize,
    seed: u64,
) -> Result<()> {
    let pool_by_class = test_pool.indices_by_class();
    for client in clients.iter_mut() {
        let train_ids: BTreeSet<u64> = client.train.ids.iter().copied().collect();
        if let Some(dup) = test_pool.ids.iter().find(|id| train_ids.contains(id)) {
            return Err(Error::Partition(format!(
                "test pool sample {dup} also appears in client {} training data",
                client.id
            )));
        }
        if client.label_histogram.iter().sum::<usize>() == 0 {
            warn!("client {} has no training data; assigning an empty test set", client.id);
            client.test = Dataset::empty(test_pool.classes);
            continue;
        }
        let counts = largest_remainder(&client.label_histogram, per_client);
        let mut rng = seeded(derive_seed(seed, client.id as u64), streams::TEST_ALLOCATION);
        let mut picks = Vec::with_capacity(per_client);
        for (class, &k) in counts.iter().enumerate() {
            let avail = &pool_by_class[class];
            if avail.len() < k {
                return Err(Error::Partition(format!(
                    "test pool has {} samples of class {class}, client {} needs {k}",
                    avail.len(),
                    client.id
                )));
            }
            picks.extend(avail.choose_multiple(&mut rng, k).copied());
        }
        picks.sort_unstable();
        client.test = test_pool.subset(&picks);
    }
    Ok(())
}

/// Label-distribution heterogeneity across clients with nonempty training data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeterogeneityMetrics {
    pub mean_pairwise_tv: f64,
    pub max_pairwise_tv: f64,
    /// Mean Shannon entropy (nats) of each client's label distribution.
    pub mean_label_entropy: f64,
    pub empty_clients: usize,
}

pub fn heterogeneity_metrics(histograms: &[Vec<usize>]) -> HeterogeneityMetrics {
    let dists: Vec<Vec<f64>> = histograms
        .iter()
        .filter_map(|h| {
            let total: usize = h.iter().sum();
            (total > 0).then(|| h.iter().map(|&c| c as f64 / total as f64).collect())
        })
        .collect();
    let empty_clients = histograms.len() - dists.len();
    let (mut sum_tv, mut max_tv, mut pairs) = (0.0, 0.0f64, 0usize);
    for i in 0..dists.len() {
        for j in i + 1..dists.len() {
            let tv = 0.5
                * dists[i]
                    .iter()
                    .zip(&dists[j])
                    .map(|(a, b)| (a - b).abs())
                    .sum::<f64>();
            sum_tv += tv;
            max_tv = max_tv.max(tv);
            pairs += 1;
        }
    }
    let entropy = |p: &Vec<f64>| -> f64 {
        p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum()
    };
    let mean_label_entropy = if dists.is_empty() {
        0.0
    } else {
        dists.iter().map(entropy).sum::<f64>() / dists.len() as f64
    };
    HeterogeneityMetrics {
        mean_pairwise_tv: if pairs == 0 { 0.0 } else { sum_tv / pairs as f64 },
        max_pairwise_tv: max_tv,
        mean_label_entropy,
        empty_clients,
    }
}
