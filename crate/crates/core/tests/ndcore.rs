use dianet::ndcore::{grad_check_many, AdamConfig, AdamState, GradCheckOptions, Mode, ParamSet, Tape, Tensor, Var};
use dianet::seed::rng_for;
use dianet::Result;
use proptest::prelude::*;
use rand::Rng;

fn rand_tensor(seed: u64, shape: &[usize]) -> Tensor<f64> {
    let mut rng = rng_for(seed, "t");
    let n = shape.iter().product();
    // keep clear of the ReLU kink
    let data = (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let r = rand_tensor(99, if shape.is_empty() { &[1] } else { &shape });
    let r = tape.constant(&shape, r.into_data())?;
    let p = tape.mul(out, r)?;
    tape.sum(p)
}

fn check(shapes: &[&[usize]], f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>) {
    let points: Vec<Tensor<f64>> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| rand_tensor(i as u64 + 1, s))
        .collect();
    let report = grad_check_many(
        |tape, vars| {
            let out = f(tape, vars)?;
            project(tape, out)
        },
        &points,
        GradCheckOptions::default(),
    )
    .unwrap();
    assert!(report.passed(), "{report:?}");
}

#[test]
fn grad_matmul_transpose() {
    check(&[&[3, 4], &[4, 2]], |t, v| t.matmul(v[0], v[1]));
    check(&[&[3, 4]], |t, v| t.transpose(v[0]));
}

#[test]
fn grad_conv2d() {
    check(&[&[2, 6, 5], &[3, 2, 3, 3]], |t, v| t.conv2d(v[0], v[1], 1, 1));
    check(&[&[1, 7, 7], &[2, 1, 3, 3]], |t, v| t.conv2d(v[0], v[1], 2, 0));
    check(&[&[2, 4, 4], &[2]], |t, v| t.add_channel_bias(v[0], v[1]));
}

#[test]
fn grad_elementwise() {
    check(&[&[2, 3], &[3]], |t, v| t.add_bias(v[0], v[1]));
    check(&[&[5], &[5]], |t, v| t.add(v[0], v[1]));
    check(&[&[5], &[5]], |t, v| t.sub(v[0], v[1]));
    check(&[&[5], &[5]], |t, v| t.mul(v[0], v[1]));
    check(&[&[5]], |t, v| t.scale(v[0], -1.7));
    check(&[&[5], &[]], |t, v| t.scale_by(v[0], v[1]));
    check(&[&[6]], |t, v| t.relu(v[0]));
    check(&[&[6]], |t, v| t.sigmoid(v[0]));
    check(&[&[3, 4]], |t, v| t.softmax(v[0]));
}

#[test]
fn grad_dropout_with_fixed_mask() {
    check(&[&[12]], |t, v| {
        let mut rng = rng_for(4, "mask");
        t.dropout(v[0], 0.4, &mut rng)
    });
}

#[test]
fn grad_reductions_and_shapes() {
    check(&[&[3, 4]], |t, v| t.mean_axis(v[0], 0));
    check(&[&[3, 4]], |t, v| t.mean_axis(v[0], 1));
    check(&[&[3, 4]], |t, v| t.sum(v[0]));
    check(&[&[4], &[4]], |t, v| t.dot(v[0], v[1]));
    check(&[&[2, 4, 6]], |t, v| t.avg_pool2(v[0]));
    check(&[&[2, 6]], |t, v| t.reshape(v[0], &[3, 4]));
    check(&[&[2, 3]], |t, v| t.flatten(v[0]));
    check(&[&[3], &[2]], |t, v| t.concat_last(&[v[0], v[1]]));
    check(&[&[3], &[3]], |t, v| t.stack(&[v[0], v[1]]));
}

#[test]
fn grad_losses() {
    check(&[&[3, 5], &[3, 5]], |t, v| t.cosine_rows(v[0], v[1]));
    check(&[&[4], &[4]], |t, v| t.cosine_rows(v[0], v[1]));
    check(&[&[3, 4]], |t, v| t.cross_entropy(v[0], &[0, 3, 1]));
}

#[test]
fn params_bind_and_adam_step() {
    let mut ps = ParamSet::<f64>::new();
    ps.insert("w", Tensor::from_slice(&[2], &[1.0, -2.0]).unwrap()).unwrap();
    let mut adam = AdamState::new(AdamConfig::default(), ps.tensors());
    let mut tape = Tape::new(Mode::Train);
    let bound = ps.bind(&mut tape).unwrap();
    let w = bound.get("w").unwrap();
    let sq = tape.mul(w, w).unwrap();
    let loss = tape.sum(sq).unwrap();
    tape.backward(loss).unwrap();
    ps.accumulate_grads(&tape, &bound).unwrap();
    assert_eq!(ps.get("w").unwrap().grad().unwrap(), &[2.0, -4.0]);
    adam.step(ps.tensors_mut()).unwrap();
    let w = ps.get("w").unwrap().data();
    assert!((w[0] - (1.0 - 1e-4)).abs() < 1e-9 && (w[1] - (-2.0 + 1e-4)).abs() < 1e-9);
    assert!(bound.get("missing").is_err());
}

proptest! {
    #[test]
    fn softmax_rows_are_stochastic(rows in 1usize..5, cols in 1usize..7, seed in any::<u64>()) {
        let mut rng = rng_for(seed, "sm");
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-30.0..30.0)).collect();
        let mut tape = Tape::new(Mode::Eval);
        let x = tape.constant(&[rows, cols], data).unwrap();
        let s = tape.softmax(x).unwrap();
        for row in tape.value(s).chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn dropout_keeps_expected_scale(seed in any::<u64>()) {
        let mut tape = Tape::new(Mode::Train);
        let x = tape.constant(&[4000], vec![1.0f64; 4000]).unwrap();
        let y = tape.dropout(x, 0.3, &mut rng_for(seed, "d")).unwrap();
        let mean = tape.value(y).iter().sum::<f64>() / 4000.0;
        prop_assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn matmul_matches_naive(m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in any::<u64>()) {
        let a = rand_tensor(seed, &[m, k]);
        let b = rand_tensor(seed ^ 1, &[k, n]);
        let mut tape = Tape::new(Mode::Eval);
        let (va, vb) = (tape.leaf(&a).unwrap(), tape.leaf(&b).unwrap());
        let c = tape.matmul(va, vb).unwrap();
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                prop_assert!((tape.value(c)[i * n + j] - want).abs() < 1e-12);
            }
        }
    }
}
