use dianet::ndcore::{grad_check, GradCheckOptions, Mode, Tape, Tensor};
use dianet::objective::{accuracy, argmax, consistency_loss, cross_entropy, total_loss};
use dianet::seed::rng_for;
use dianet::Error;
use proptest::prelude::*;
use rand::Rng;

fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn random(seed: u64, shape: &[usize], scale: f64) -> Tensor<f64> {
    let mut rng = rng_for(seed, "obj");
    let n = shape.iter().product();
    t(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

#[test]
fn ce_gradient_is_softmax_minus_onehot() {
    let logits = random(1, &[2, 4], 2.0);
    let labels = [3, 0];
    let mut tape = Tape::new(Mode::Eval);
    let l = tape.leaf(&logits.clone().requiring_grad()).unwrap();
    let ce = tape.cross_entropy(l, &labels).unwrap();
    tape.backward(ce).unwrap();
    let g = tape.grad(l).unwrap();
    for (r, row) in logits.data().chunks(4).enumerate() {
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        for k in 0..4 {
            let want = (row[k].exp() / z - if k == labels[r] { 1.0 } else { 0.0 }) / 2.0;
            assert!((g[r * 4 + k] - want).abs() < 1e-12);
        }
    }
    let report = grad_check(
        |tape, v| tape.cross_entropy(v, &labels),
        &logits,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn label_out_of_range() {
    assert!(matches!(
        cross_entropy(&t(&[1, 3], vec![0.0; 3]), &[3]),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn half_identical_half_opposite_is_one() {
    let f1 = t(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.5, 2.0]);
    let f2 = t(&[2, 3], vec![1.0, 2.0, 3.0, 1.0, -0.5, -2.0]);
    assert!((consistency_loss(&f1, &f2).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn total_matches_hand_arithmetic() {
    // ce = ln 2 for two equal logits; orthogonal features give cons = 1
    let logits = t(&[1, 2], vec![0.0, 0.0]);
    let f1 = t(&[1, 2], vec![1.0, 0.0]);
    let f2 = t(&[1, 2], vec![0.0, 3.0]);
    let b = total_loss(&logits, &[0], &f1, &f2, 0.5).unwrap();
    assert!((b.ce - 2f64.ln()).abs() < 1e-12);
    assert!((b.cons - 1.0).abs() < 1e-12);
    assert!((b.total - (b.ce + 0.5)).abs() < 1e-12);
}

#[test]
fn accuracy_rules() {
    assert_eq!(accuracy(&[1, 1, 1], &[1, 1, 1]).unwrap(), 1.0);
    assert!(accuracy(&[1], &[1, 2]).is_err());
    assert_eq!(argmax(&[0.5f32, 0.5, 0.1]), 0);
}

proptest! {
    #[test]
    fn consistency_within_bounds(seed in any::<u64>(), b in 1usize..5, d in 1usize..9, scale in 1e-6f64..1e3) {
        let f1 = random(seed, &[b, d], scale);
        let f2 = random(seed ^ 7, &[b, d], scale);
        let c = consistency_loss(&f1, &f2).unwrap();
        prop_assert!((0.0..=2.0).contains(&c));
        prop_assert!(consistency_loss(&f1, &f1).unwrap().abs() < 1e-7);
    }

    #[test]
    fn ce_is_shift_invariant(seed in any::<u64>(), shift in -50.0f64..50.0) {
        let logits = random(seed, &[3, 5], 4.0);
        let shifted = t(&[3, 5], logits.data().iter().map(|v| v + shift).collect());
        let a = cross_entropy(&logits, &[0, 2, 4]).unwrap();
        let b = cross_entropy(&shifted, &[0, 2, 4]).unwrap();
        prop_assert!((a - b).abs() < 1e-6);
    }

    #[test]
    fn total_is_monotone_in_lambda(seed in any::<u64>(), l1 in 0.0f64..2.0, dl in 0.0f64..2.0) {
        let logits = random(seed, &[2, 3], 1.0);
        let f1 = random(seed ^ 1, &[2, 4], 1.0);
        let f2 = random(seed ^ 2, &[2, 4], 1.0);
        let a = total_loss(&logits, &[0, 1], &f1, &f2, l1).unwrap();
        let b = total_loss(&logits, &[0, 1], &f1, &f2, l1 + dl).unwrap();
        prop_assert!(b.total >= a.total);
        // d total / d lambda == cons
        prop_assert!(((b.total - a.total) - dl * a.cons).abs() < 1e-9);
        prop_assert!((a.total - (a.ce + l1 * a.cons)).abs() < 1e-6);
    }
}
