mod common;

use common::{gradcheck, op_cases, uniform_tensor};
use sweetexit::{GradientMap, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn matmul_identity() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), false);
    let b = tape.leaf(t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]), false);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[3.0, 4.0, 5.0, 6.0]);
}

#[test]
fn matmul_scalar_product_rule() {
    let mut tape = Tape::new();
    let a = tape.leaf(t(&[1, 1], &[2.0]), true);
    let b = tape.leaf(t(&[1, 1], &[3.0]), true);
    let c = tape.matmul(a, b).unwrap();
    assert_eq!(tape.value(c).data(), &[6.0]);
    let g = tape.backward(c).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[3.0]);
    assert_eq!(g.get(b).unwrap().data(), &[2.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let b = tape.leaf(Tensor::zeros(&[4, 2]), false);
    let err = tape.matmul(a, b).unwrap_err().to_string();
    assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
}

#[test]
fn matmul_random_3x4_by_4x2_matches_finite_differences() {
    let mut r = common::rng(11);
    let a = uniform_tensor(&mut r, &[3, 4], -2.0, 2.0);
    let b = uniform_tensor(&mut r, &[4, 2], -2.0, 2.0);
    let err = gradcheck(&[a, b], 3, |tape, v| tape.matmul(v[0], v[1]).unwrap());
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn softmax_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[0.0, 0.0]), false);
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

    let x = tape.leaf(t(&[2], &[1000.0, 0.0]), false);
    let y = tape.softmax(x, 0).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() <= 1e-12 && v[1].abs() <= 1e-12, "{v:?}");
}

#[test]
fn softmax_random_vector_sums_to_one_and_matches_finite_differences() {
    let mut r = common::rng(5);
    let x = uniform_tensor(&mut r, &[5], -2.0, 2.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), false);
    let y = tape.softmax(xv, 0).unwrap();
    let total: f64 = tape.value(y).data().iter().sum();
    assert!((total - 1.0).abs() <= 1e-12);
    let err = gradcheck(&[x], 8, |tape, v| tape.softmax(v[0], 0).unwrap());
    assert!(err <= 1e-6, "relative error {err}");
}

#[test]
fn layernorm_examples() {
    let mut tape = Tape::new();
    let ones = tape.leaf(Tensor::full(&[2], 1.0), false);
    let zeros = tape.leaf(Tensor::zeros(&[2]), false);
    let c = tape.leaf(t(&[1, 2], &[3.0, 3.0]), false);
    let y = tape.layernorm(c, ones, zeros, 1e-5).unwrap();
    assert_eq!(tape.value(y).data(), &[0.0, 0.0]);

    let x = tape.leaf(t(&[1, 2], &[1.0, -1.0]), false);
    let y = tape.layernorm(x, ones, zeros, 1e-5).unwrap();
    let v = tape.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-5 && (v[1] + 1.0).abs() < 1e-5, "{v:?}");
}

#[test]
fn layernorm_rows_are_standardized() {
    let mut r = common::rng(21);
    let x = uniform_tensor(&mut r, &[4, 8], -2.0, 2.0);
    let mut tape = Tape::new();
    let xv = tape.leaf(x, false);
    let g = tape.leaf(Tensor::full(&[8], 1.0), false);
    let b = tape.leaf(Tensor::zeros(&[8]), false);
    let y = tape.layernorm(xv, g, b, 1e-15).unwrap();
    let out = tape.value(y);
    for row in 0..4 {
        let v = out.row(row);
        let mean = v.iter().sum::<f64>() / 8.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9, "mean {mean} var {var}");
    }
}

#[test]
fn layernorm_random_2x8_matches_finite_differences() {
    let mut r = common::rng(2);
    let x = uniform_tensor(&mut r, &[2, 8], -2.0, 2.0);
    let g = uniform_tensor(&mut r, &[8], 0.5, 1.5);
    let b = uniform_tensor(&mut r, &[8], -1.0, 1.0);
    let err = gradcheck(&[x, g, b], 4, |tape, v| tape.layernorm(v[0], v[1], v[2], 1e-5).unwrap());
    assert!(err <= 1e-5, "relative error {err}");
}

#[test]
fn layernorm_rejects_mismatched_gain() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2, 3]), false);
    let g = tape.leaf(Tensor::zeros(&[2]), false);
    let b = tape.leaf(Tensor::zeros(&[3]), false);
    assert!(tape.layernorm(x, g, b, 1e-5).is_err());
}

#[test]
fn gelu_and_cross_entropy_examples() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(0.0), false);
    let y = tape.gelu(x);
    assert_eq!(tape.value(y).data(), &[0.0]);

    let logits = tape.leaf(t(&[1, 2], &[1e6, 0.0]), false);
    let ce = tape.cross_entropy(logits, &[0]).unwrap();
    assert!(tape.value(ce).data()[0].abs() < 1e-12);

    for n in 2..6 {
        let logits = tape.leaf(Tensor::full(&[3, n], 0.7), false);
        let ce = tape.cross_entropy(logits, &[0, n - 1, 1]).unwrap();
        assert!((tape.value(ce).data()[0] - (n as f64).ln()).abs() < 1e-12);
    }
}

#[test]
fn cross_entropy_rejects_out_of_range_label() {
    let mut tape = Tape::new();
    let logits = tape.leaf(Tensor::zeros(&[2, 3]), false);
    assert!(tape.cross_entropy(logits, &[0, 3]).is_err());
}

#[test]
fn gate_is_identity_forward_and_blocks_backward() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]), true);
    let gated = tape.gradient_gate(x);
    assert!(tape.value(gated).bit_eq(tape.value(x)));
    let seed = tape.constant(t(&[3], &[5.0, 5.0, 5.0]));
    let prod = tape.mul(gated, seed).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn gate_inside_product_rule() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.5, -2.0, 0.25]), true);
    let w = tape.leaf(t(&[3], &[0.3, 0.7, -1.1]), true);
    let gated = tape.gradient_gate(x);
    let prod = tape.mul(gated, w).unwrap();
    let loss = tape.sum(prod);
    let g = tape.backward(loss).unwrap();
    assert_eq!(g.get(w).unwrap().data(), &[1.5, -2.0, 0.25]);
    assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 0.0]);
}

#[test]
fn backward_basics() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(4.0), true);
    assert_eq!(tape.backward(x).unwrap().get(x).unwrap().data(), &[1.0]);

    let a = tape.leaf(Tensor::scalar(1.0), true);
    let b = tape.leaf(Tensor::scalar(2.0), true);
    let s = tape.add(a, b).unwrap();
    let g = tape.backward(s).unwrap();
    assert_eq!(g.get(a).unwrap().data(), &[1.0]);
    assert_eq!(g.get(b).unwrap().data(), &[1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    assert!(tape.backward(x).is_err());
}

#[test]
fn frozen_leaves_receive_nothing() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]), false);
    let w = tape.leaf(t(&[2], &[3.0, 4.0]), true);
    let p = tape.mul(x, w).unwrap();
    let l = tape.sum(p);
    let g = tape.backward(l).unwrap();
    assert!(g.get(x).is_none());
    assert_eq!(g.get(w).unwrap().data(), &[1.0, 2.0]);
}

#[test]
fn per_loss_accumulation_equals_summed_loss_exactly() {
    let mut r = common::rng(77);
    let mut tape = Tape::new();
    let x = tape.leaf(uniform_tensor(&mut r, &[3, 4], -2.0, 2.0), true);
    let w1 = tape.leaf(uniform_tensor(&mut r, &[4, 5], -2.0, 2.0), true);
    let w2 = tape.leaf(uniform_tensor(&mut r, &[5, 3], -2.0, 2.0), true);
    let h = tape.matmul(x, w1).unwrap();
    let h = tape.gelu(h);
    let l1 = tape.cross_entropy(h, &[0, 4, 2]).unwrap();
    let o = tape.matmul(h, w2).unwrap();
    let l2 = tape.cross_entropy(o, &[1, 1, 0]).unwrap();
    let l3 = tape.sum(o);

    let mut acc = GradientMap::new();
    acc.accumulate(&tape.backward(l1).unwrap()).unwrap();
    acc.accumulate(&tape.backward(l2).unwrap()).unwrap();
    acc.accumulate(&tape.backward(l3).unwrap()).unwrap();

    let total = tape.sum_losses(&[l1, l2, l3]).unwrap();
    let joint = tape.backward(total).unwrap();
    for leaf in [x, w1, w2] {
        assert!(acc.get(leaf).unwrap().bit_eq(joint.get(leaf).unwrap()));
    }
    let expected = tape.value(l1).data()[0] + tape.value(l2).data()[0] + tape.value(l3).data()[0];
    assert_eq!(tape.value(total).data()[0], expected);
}

#[test]
fn every_op_matches_finite_differences() {
    for seed in 0..4 {
        for (name, inputs, op) in op_cases(seed) {
            let err = gradcheck(&inputs, seed + 100, |t, v| op(t, v));
            assert!(err <= 1e-4, "{name} (seed {seed}): relative error {err}");
        }
    }
}

mod properties {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(
            xs in prop::collection::vec(-30.0f64..30.0, 1..12),
            shift in -50.0f64..50.0,
        ) {
            let n = xs.len();
            let mut tape = Tape::new();
            let a = tape.leaf(Tensor::new(vec![n], xs.clone()).unwrap(), false);
            let b = tape.leaf(Tensor::new(vec![n], xs.iter().map(|x| x + shift).collect()).unwrap(), false);
            let pa = tape.softmax(a, 0).unwrap();
            let pb = tape.softmax(b, 0).unwrap();
            let total: f64 = tape.value(pa).data().iter().sum();
            prop_assert!((total - 1.0).abs() <= 1e-12);
            prop_assert!(tape.value(pa).data().iter().all(|&p| p >= 0.0));
            prop_assert!(tape.value(pa).max_abs_diff(tape.value(pb)) <= 1e-12);
        }

        #[test]
        fn gate_forward_is_bit_identical(xs in prop::collection::vec(any::<f64>().prop_filter("finite", |x| x.is_finite()), 1..8)) {
            let n = xs.len();
            let mut tape = Tape::new();
            let x = tape.leaf(Tensor::new(vec![n], xs).unwrap(), true);
            let y = tape.gradient_gate(x);
            prop_assert!(tape.value(x).bit_eq(tape.value(y)));
        }
    }
}
