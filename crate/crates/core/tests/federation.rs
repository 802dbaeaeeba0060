mod common;

use fedpeft::fed::{
    aggregate, client_update, evaluate_global, personalize_perfedavg, run_federated, run_local_only, FedConfig,
    Learner,
};
use fedpeft::models::ModelConfig;
use fedpeft::tuning::{apply_delta, build_tuning, DeltaUpdate, TuningKind};
use fedpeft::{ParamSet, Tensor};

fn cfg(rounds: usize, seed: u64) -> FedConfig {
    FedConfig {
        rounds,
        local_epochs: 2,
        lr: 0.1,
        batch_size: 4,
        seed,
        ..FedConfig::default()
    }
}

fn setup(model: &ModelConfig, kind: TuningKind) -> (ParamSet, fedpeft::tuning::TuningAttachment) {
    let backbone = model.init_params(&mut fedpeft::rng::seeded(3, 0)).unwrap();
    let att = build_tuning(common::strategy(kind), model, 3).unwrap();
    let params = att.attach(&backbone).unwrap();
    (params, att)
}

#[test]
fn single_client_fedavg_is_local_training() {
    for (_, model, kind) in common::combinations() {
        let (params, att) = setup(&model, kind);
        let learner = Learner { model: &model, hooks: &att.hooks };
        let clients = common::toy_clients(1, 4, 1);
        let c = cfg(3, 7);
        let fed = run_federated(learner, &c, &clients, &params).unwrap();
        let local = run_local_only(learner, &c, &clients, &params).unwrap();
        assert!(fed.params.bitwise_eq(&local.params[0]), "{kind}");

        let mut manual = params.clone();
        for t in 1..=c.rounds {
            let out = client_update(learner, &clients[0], &manual, &c, c.local_epochs, t).unwrap();
            apply_delta(&mut manual, &out.delta).unwrap();
        }
        assert!(fed.params.bitwise_eq(&manual));
    }
}

fn delta(values: &[f64], weight: u64) -> DeltaUpdate {
    let mut e = ParamSet::new();
    e.insert("a", Tensor::vector(values.to_vec()), true);
    e.insert("b", Tensor::scalar(values.iter().sum()), true);
    DeltaUpdate::new(e, weight)
}

#[test]
fn aggregate_hand_cases() {
    let cases: [(&[DeltaUpdate], [f64; 2]); 4] = [
        (&[delta(&[1.0, 2.0], 10), delta(&[5.0, 6.0], 30)], [4.0, 5.0]),
        (&[delta(&[1.0, -1.0], 1), delta(&[-1.0, 1.0], 1)], [0.0, 0.0]),
        (&[delta(&[0.3, 0.6], 7)], [0.3, 0.6]),
        (&[delta(&[2.0, 4.0], 1), delta(&[8.0, 8.0], 0), delta(&[5.0, 1.0], 2)], [4.0, 2.0]),
    ];
    for (deltas, want) in cases {
        let agg = aggregate(deltas).unwrap();
        let got = agg.entries.tensor("a").unwrap().data();
        for (g, w) in got.iter().zip(want) {
            assert!((g - w).abs() < 1e-12, "{got:?} vs {want:?}");
        }
        let b = agg.entries.tensor("b").unwrap().data()[0];
        assert!((b - want.iter().sum::<f64>()).abs() < 1e-12);
    }
    let zero = aggregate(&[delta(&[1.0, 1.0], 0), delta(&[3.0, 3.0], 0)]).unwrap();
    assert_eq!(zero.entries.tensor("a").unwrap().data(), [0.0, 0.0]);
}

#[test]
fn aggregation_is_invariant_to_weight_scale() {
    let a = aggregate(&[delta(&[1.0, 2.0], 1), delta(&[3.0, 5.0], 3)]).unwrap();
    let b = aggregate(&[delta(&[1.0, 2.0], 100), delta(&[3.0, 5.0], 300)]).unwrap();
    let (x, y) = (a.entries.tensor("a").unwrap(), b.entries.tensor("a").unwrap());
    assert!(x.max_abs_diff(y) < 1e-12);
}

#[test]
fn frozen_checksums_survive_every_run() {
    for (_, model, kind) in common::combinations() {
        let (params, att) = setup(&model, kind);
        let learner = Learner { model: &model, hooks: &att.hooks };
        let clients = common::toy_clients(3, 3, 2);
        let before = params.frozen_checksum();
        let c = cfg(2, 1);
        let fed = run_federated(learner, &c, &clients, &params).unwrap();
        assert_eq!(fed.params.frozen_checksum(), before, "{kind}");
        let local = run_local_only(learner, &c, &clients, &params).unwrap();
        let pfa = personalize_perfedavg(learner, &c, &clients, &fed.params, 2).unwrap();
        for p in local.params.iter().chain(&pfa.params) {
            assert_eq!(p.frozen_checksum(), before);
        }
        if kind != TuningKind::Full {
            assert!(!fed.params.bitwise_eq(&params), "{kind}: training changed nothing");
        }
    }
}

#[test]
fn parallel_rounds_equal_sequential_bitwise() {
    for (_, model, kind) in common::combinations() {
        let (params, att) = setup(&model, kind);
        let learner = Learner { model: &model, hooks: &att.hooks };
        let clients = common::toy_clients(4, 2, 3);
        let seq = run_federated(learner, &cfg(2, 5), &clients, &params).unwrap();
        let par = run_federated(learner, &FedConfig { jobs: 3, ..cfg(2, 5) }, &clients, &params).unwrap();
        assert!(seq.params.bitwise_eq(&par.params));
        assert_eq!(seq.records, par.records);
    }
}

#[test]
fn partial_participation_samples_the_configured_fraction() {
    let model = ModelConfig::Vit(common::tiny_vit());
    let (params, att) = setup(&model, TuningKind::Head);
    let learner = Learner { model: &model, hooks: &att.hooks };
    let clients = common::toy_clients(10, 1, 4);
    let c = FedConfig { sample_rate: 0.3, ..cfg(4, 2) };
    let run = run_federated(learner, &c, &clients, &params).unwrap();
    for r in &run.records {
        assert_eq!(r.sampled.len(), 3);
        assert!(r.sampled.windows(2).all(|w| w[0] < w[1]));
    }
    let again = run_federated(learner, &c, &clients, &params).unwrap();
    assert_eq!(run.records, again.records);
}

#[test]
fn empty_client_contributes_nothing() {
    let model = ModelConfig::Vit(common::tiny_vit());
    let (params, att) = setup(&model, TuningKind::Bias);
    let learner = Learner { model: &model, hooks: &att.hooks };
    let mut clients = common::toy_clients(2, 2, 5);
    clients[1].train = fedpeft::data::Dataset::empty(common::CLASSES);
    let out = client_update(learner, &clients[1], &params, &cfg(1, 0), 2, 1).unwrap();
    assert_eq!(out.delta.weight, 0);
    let alone = run_federated(learner, &cfg(2, 0), &clients[..1], &params).unwrap();
    let both = run_federated(learner, &cfg(2, 0), &clients, &params).unwrap();
    assert!(alone.params.bitwise_eq(&both.params));
}

#[test]
fn global_scores_weight_clients_by_test_size() {
    let model = ModelConfig::Vit(common::tiny_vit());
    let (params, att) = setup(&model, TuningKind::Head);
    let learner = Learner { model: &model, hooks: &att.hooks };
    let clients = common::toy_clients(3, 2, 6);
    let s = evaluate_global(learner, &clients, &params).unwrap();
    let (correct, total) = s.per_client.iter().fold((0, 0), |(a, b), (c, t)| (a + c, b + t));
    assert!((s.test_acc - correct as f64 / total as f64).abs() < 1e-15);
}
