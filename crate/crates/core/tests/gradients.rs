mod common;

use fedpeft::autodiff::Tape;
use fedpeft::rng::seeded;
use fedpeft::Tensor;

const NETWORKS: u64 = 20;
const TOLERANCE: f64 = 1e-4;

#[test]
fn autodiff_matches_central_differences_on_every_combination() {
    for (backbone, model, kind) in common::combinations() {
        for seed in 0..NETWORKS {
            let err = common::max_gradient_error(&model, kind, seed);
            assert!(err < TOLERANCE, "{backbone}/{kind} seed {seed}: relative error {err:e}");
        }
    }
}

#[test]
fn linear_layer_gradients_by_hand() {
    // loss = sum(x W + b) with x = [1, 2], W = [[3], [4]]
    let x = Tensor::matrix(&[&[1.0, 2.0]]).unwrap();
    let w = Tensor::matrix(&[&[3.0], &[4.0]]).unwrap();
    let b = Tensor::vector(vec![0.5]);
    let mut tape = Tape::new();
    let xv = tape.input_ref(&x);
    let wv = tape.param("w", &w, true);
    let bv = tape.param("b", &b, true);
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    let loss = tape.sum(y);
    assert_eq!(tape.value(loss).data(), [11.5]);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g["w"].data(), [1.0, 2.0]);
    assert_eq!(g["b"].data(), [1.0]);
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let w = Tensor::randn(&[3, 2], 1.0, &mut seeded(0, 0));
    let b = Tensor::zeros(&[2]);
    let x = Tensor::randn(&[4, 3], 1.0, &mut seeded(1, 0));
    let mut tape = Tape::new();
    let xv = tape.input_ref(&x);
    let wv = tape.param("w", &w, false);
    let bv = tape.param("b", &b, true);
    let y = tape.linear(xv, wv, Some(bv)).unwrap();
    let loss = tape.softmax_cross_entropy(y, &[0, 1, 1, 0]).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(!g.contains_key("w"));
    assert!(g.contains_key("b"));
}

#[test]
fn cross_entropy_gradient_is_softmax_minus_onehot() {
    let logits = Tensor::matrix(&[&[1.0, 2.0, 3.0]]).unwrap();
    let mut tape = Tape::new();
    let l = tape.param("l", &logits, true);
    let loss = tape.softmax_cross_entropy(l, &[2]).unwrap();
    let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
    assert!((tape.value(loss).data()[0] - (z.ln() - 3.0)).abs() < 1e-12);
    let g = tape.backward(loss).unwrap();
    let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z - 1.0];
    for (a, b) in g["l"].data().iter().zip(want) {
        assert!((a - b).abs() < 1e-12);
    }
}
