use std::collections::BTreeSet;

use fedpeft::data::{
    allocate_test, gen_synthetic_task, heterogeneity_metrics, partition, ClientDataset, Dataset, PartitionSpec,
    SyntheticSpec,
};
use proptest::prelude::*;

fn pool(per_class: usize, seed: u64) -> Dataset {
    let spec = SyntheticSpec {
        classes: 10,
        image_side: 4,
        per_class,
        ..SyntheticSpec::default()
    };
    gen_synthetic_task(&spec, seed).unwrap()
}

fn mean_tv(clients: &[ClientDataset]) -> f64 {
    let h: Vec<Vec<usize>> = clients.iter().map(|c| c.label_histogram.clone()).collect();
    heterogeneity_metrics(&h).mean_pairwise_tv
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Median mean-pairwise-TV over 20 seeds for each alpha.
pub fn dirichlet_heterogeneity(alphas: &[f64]) -> Vec<f64> {
    let data = pool(80, 0);
    alphas
        .iter()
        .map(|&a| {
            median(
                (0..20)
                    .map(|s| mean_tv(&partition(&data, &PartitionSpec::dirichlet(10, a, 80, s)).unwrap()))
                    .collect(),
            )
        })
        .collect()
}

#[test]
fn dirichlet_heterogeneity_decreases_with_alpha() {
    let tv = dirichlet_heterogeneity(&[0.01, 0.1, 1.0, 100.0]);
    assert!(tv.windows(2).all(|w| w[0] > w[1]), "{tv:?}");
}

#[test]
fn shards_give_at_most_two_labels() {
    let data = pool(40, 1);
    for seed in 0..20 {
        let clients = partition(&data, &PartitionSpec::shards(10, 2, 16, seed)).unwrap();
        for c in &clients {
            let labels = c.label_histogram.iter().filter(|&&n| n > 0).count();
            assert!((1..=2).contains(&labels), "client {} has {labels} labels", c.id);
        }
    }
}

#[test]
fn kshot_counts_are_exact_and_disjoint() {
    let data = pool(40, 2);
    for k in [1, 2, 4] {
        let clients = partition(&data, &PartitionSpec::iid(10, k, 3)).unwrap();
        let mut seen = BTreeSet::new();
        for c in &clients {
            assert!(c.label_histogram.iter().all(|&n| n == k));
            for id in &c.train.ids {
                assert!(seen.insert(*id), "sample {id} assigned twice");
            }
        }
    }
}

#[test]
fn kshot_that_cannot_fit_is_rejected() {
    assert!(partition(&pool(10, 0), &PartitionSpec::iid(10, 2, 0)).is_err());
}

#[test]
fn test_sets_follow_training_proportions() {
    let data = pool(60, 4);
    let test = gen_synthetic_task(
        &SyntheticSpec {
            classes: 10,
            image_side: 4,
            per_class: 60,
            id_offset: 1 << 40,
            ..SyntheticSpec::default()
        },
        5,
    )
    .unwrap();
    let mut clients = partition(&data, &PartitionSpec::shards(10, 2, 16, 6)).unwrap();
    allocate_test(&test, &mut clients, 50, 7).unwrap();
    for c in &clients {
        assert_eq!(c.test.len(), 50);
        let h = c.test.histogram();
        for (k, &n) in h.iter().enumerate() {
            if c.label_histogram[k] == 0 {
                assert_eq!(n, 0);
            }
        }
    }
    let mut leaking = clients.clone();
    assert!(allocate_test(&data, &mut leaking, 5, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dirichlet_assigns_each_pool_sample_once(alpha in 0.01f64..100.0, seed in 0u64..1000, clients in 1usize..12) {
        let data = pool(20, 9);
        let parts = partition(&data, &PartitionSpec::dirichlet(clients, alpha, 20, seed)).unwrap();
        let total: usize = parts.iter().map(|c| c.train.len()).sum();
        prop_assert_eq!(total, 200);
        let ids: BTreeSet<u64> = parts.iter().flat_map(|c| c.train.ids.iter().copied()).collect();
        prop_assert_eq!(ids.len(), 200);
    }

    #[test]
    fn partitions_are_reproducible(seed in 0u64..1000) {
        let data = pool(20, 9);
        let spec = PartitionSpec::shards(5, 2, 4, seed);
        prop_assert_eq!(partition(&data, &spec).unwrap(), partition(&data, &spec).unwrap());
    }
}
