//! Tape gradients against central differences, across many seeds.

use mcgu::checks::{block_checks, layer_checks};
use mcgu::layers::{conv2d, relu, sigmoid};
use mcgu::numerics::{gradcheck, Rng, Tape, Tensor};

const TOL: f64 = 1e-4;

fn assert_all_pass(results: &[mcgu::checks::CheckResult]) {
    for r in results {
        assert!(r.pass, "{}", r.line());
        assert!(r.checked > 0, "{} compared nothing", r.name);
    }
}

#[test]
fn every_layer_op_passes_on_twenty_seeds() {
    for seed in 0..20 {
        assert_all_pass(&layer_checks(seed, TOL).unwrap());
    }
}

#[test]
fn every_block_passes_on_five_seeds() {
    for seed in 0..5 {
        assert_all_pass(&block_checks(seed, TOL).unwrap());
    }
}

#[test]
fn conv_relu_sum_on_one_channel_four_by_four() {
    let mut rng = Rng::new(9);
    let kernel = Tensor::uniform(&[2, 1, 3, 3], 1.0, &mut rng).unwrap();
    let bias = Tensor::uniform(&[2], 0.5, &mut rng).unwrap();
    let x = Tensor::uniform(&[1, 1, 4, 4], 1.0, &mut rng).unwrap();
    let report = gradcheck(
        |t, xv| {
            let k = t.constant(kernel.clone());
            let b = t.constant(bias.clone());
            let y = conv2d(t, xv, k, Some(b))?;
            let y = relu(t, y);
            Ok(t.sum(y))
        },
        &x,
        1e-6,
    )
    .unwrap();
    assert!(report.pass && report.max_rel_error < 1e-6, "{report:?}");
    assert_eq!(report.checked + report.skipped, 16);
}

#[test]
fn sigmoid_sum_at_zero() {
    let report = gradcheck(
        |t, xv| {
            let y = sigmoid(t, xv);
            Ok(t.sum(y))
        },
        &Tensor::zeros(&[3, 4]).unwrap(),
        1e-6,
    )
    .unwrap();
    assert!(report.pass);
    assert_eq!(report.skipped, 0);
}

#[test]
fn analytic_gradients_are_deterministic() {
    let mut rng = Rng::new(5);
    let x = Tensor::uniform(&[2, 3, 4, 4], 1.0, &mut rng).unwrap();
    let kernel = Tensor::uniform(&[2, 3, 3, 3], 1.0, &mut rng).unwrap();
    let grad = || {
        let mut t = Tape::new();
        let xv = t.variable(x.clone());
        let k = t.constant(kernel.clone());
        let y = conv2d(&mut t, xv, k, None).unwrap();
        let y = sigmoid(&mut t, y);
        let loss = t.sum(y);
        t.backward(loss).unwrap().wrt(xv)
    };
    let (a, b) = (grad(), grad());
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
