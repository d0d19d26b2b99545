use dianet::harness::gradcheck_model_f32;
use dianet::model::{
    load_checkpoint, save_checkpoint, BackboneConfig, ConvStage, CrossAttention, Dianet, FusionConfig, FusionRegistry,
    ModelConfig,
};
use dianet::ndcore::{GradCheckOptions, Mode, ParamSet, Tape, Tensor};
use dianet::objective::total_loss_var;
use dianet::seed::rng_for;
use dianet::{Error, Raster};
use rand::Rng;

fn config(kind: &str, n_tokens: usize) -> ModelConfig {
    ModelConfig {
        input_size: 16,
        backbone: BackboneConfig {
            stages: vec![
                ConvStage {
                    out_channels: 4,
                    kernel: 3,
                    stride: 1,
                },
                ConvStage {
                    out_channels: 6,
                    kernel: 3,
                    stride: 2,
                },
            ],
            feature_dim: 16,
            flatten: true,
        },
        fusion: FusionConfig {
            kind: kind.into(),
            n_tokens,
        },
        n_classes: 3,
        init_seed: 21,
        ..ModelConfig::default()
    }
}

fn random_raster(seed: u64, side: usize) -> Raster {
    let mut rng = rng_for(seed, "raster");
    Raster::new(1, side, side, (0..side * side).map(|_| rng.random::<f32>()).collect()).unwrap()
}

fn random_vec(tape: &mut Tape<f64>, seed: u64, d: usize) -> dianet::ndcore::Var {
    let mut rng = rng_for(seed, "vec");
    tape.constant(&[d], (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
        .unwrap()
}

#[test]
fn parameter_count_matches_formula() {
    let registry = FusionRegistry::<f32>::builtin();
    for (kind, tie) in [("cross", false), ("cross", true), ("simple", false), ("affine", false)] {
        let cfg = ModelConfig {
            tie_backbones: tie,
            hidden: Some(10),
            ..config(kind, 4)
        };
        let model = Dianet::<f32>::new(cfg.clone(), &registry).unwrap();
        assert_eq!(
            model.params().count(),
            Dianet::<f32>::param_count_formula(&cfg).unwrap(),
            "{kind} {tie}"
        );
    }
}

#[test]
fn bad_configs_are_rejected() {
    let registry = FusionRegistry::<f32>::builtin();
    assert!(matches!(
        Dianet::<f32>::new(config("cross", 5), &registry),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        Dianet::<f32>::new(config("gated", 4), &registry),
        Err(Error::UnknownStrategy { .. })
    ));
    let model = Dianet::<f32>::new(config("cross", 4), &registry).unwrap();
    assert!(model
        .predict_logits(&[&random_raster(1, 12), &random_raster(2, 12)])
        .is_err());
    assert!(model.predict_logits(&[&random_raster(1, 16)]).is_err());
}

#[test]
fn zero_input_gives_zero_features() {
    let model = Dianet::<f64>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    let mut tape = Tape::new(Mode::Eval);
    let bound = model.params().bind(&mut tape).unwrap();
    let x = tape.constant(&[1, 16, 16], vec![0.0; 256]).unwrap();
    let f = model.backbone_forward(&mut tape, &bound, "onset", x).unwrap();
    assert_eq!(tape.shape(f), &[16]);
    assert!(tape.value(f).iter().all(|&v| v == 0.0));
}

#[test]
fn single_token_attention_is_value_projection() {
    let model = Dianet::<f64>::new(config("cross", 1), &FusionRegistry::builtin()).unwrap();
    let mut tape = Tape::new(Mode::Eval);
    let bound = model.params().bind(&mut tape).unwrap();
    let (f1, f2) = (random_vec(&mut tape, 1, 16), random_vec(&mut tape, 2, 16));
    let att = CrossAttention::attend(&mut tape, &bound, f1, f2, &model.config().fusion).unwrap();
    let wv2 = model.params().get("fuse.wv2").unwrap().data();
    let v2 = tape.value(f2);
    for j in 0..16 {
        let want: f64 = (0..16).map(|i| v2[i] * wv2[i * 16 + j]).sum();
        assert!((tape.value(att.a12)[j] - want).abs() < 1e-12);
    }
    assert_eq!(tape.value(att.weights12), &[1.0]);
}

#[test]
fn attention_rows_are_stochastic() {
    let model = Dianet::<f64>::new(config("cross", 8), &FusionRegistry::builtin()).unwrap();
    let mut tape = Tape::new(Mode::Eval);
    let bound = model.params().bind(&mut tape).unwrap();
    let (f1, f2) = (random_vec(&mut tape, 3, 16), random_vec(&mut tape, 4, 16));
    let att = CrossAttention::attend(&mut tape, &bound, f1, f2, &model.config().fusion).unwrap();
    for w in [att.weights12, att.weights21] {
        assert_eq!(tape.shape(w), &[8, 8]);
        for row in tape.value(w).chunks(8) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn mirrored_parameters_swap_streams() {
    let model = Dianet::<f64>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    let d = 16;
    let mut mirrored = ParamSet::new();
    for (name, t) in model.params().iter() {
        let swapped = match name {
            "fuse.wq1" => "fuse.wq2",
            "fuse.wq2" => "fuse.wq1",
            "fuse.wk1" => "fuse.wk2",
            "fuse.wk2" => "fuse.wk1",
            "fuse.wv1" => "fuse.wv2",
            "fuse.wv2" => "fuse.wv1",
            other => other,
        };
        let mut tensor = model.params().get(swapped).unwrap().clone();
        if name == "fuse.proj.w" {
            let data = t.data();
            let rows: Vec<f64> = data[d * d..].iter().chain(&data[..d * d]).copied().collect();
            tensor = Tensor::new(t.shape().to_vec(), rows).unwrap();
        }
        mirrored.insert(name, tensor).unwrap();
    }
    let mirror = Dianet::from_params(model.config().clone(), mirrored, &FusionRegistry::builtin()).unwrap();
    let mut tape = Tape::new(Mode::Eval);
    let b = model.params().bind(&mut tape).unwrap();
    let bm = mirror.params().bind(&mut tape).unwrap();
    let (f1, f2) = (random_vec(&mut tape, 5, d), random_vec(&mut tape, 6, d));
    let a = model.fuse(&mut tape, &b, f1, Some(f2)).unwrap();
    let m = mirror.fuse(&mut tape, &bm, f2, Some(f1)).unwrap();
    for (x, y) in tape.value(a).iter().zip(tape.value(m)) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn simple_attention_with_zero_stream() {
    let model = Dianet::<f64>::new(config("simple", 4), &FusionRegistry::builtin()).unwrap();
    let mut tape = Tape::new(Mode::Eval);
    let bound = model.params().bind(&mut tape).unwrap();
    let f1 = random_vec(&mut tape, 7, 16);
    let zero = tape.constant(&[16], vec![0.0; 16]).unwrap();
    let out = model.fuse(&mut tape, &bound, f1, Some(zero)).unwrap();
    // 0.5 * ((f1 + g*0) + (0 + sigmoid(0) * f1)) = 0.75 f1
    for (o, x) in tape.value(out).iter().zip(tape.value(f1)) {
        assert!((o - 0.75 * x).abs() < 1e-12);
    }
}

#[test]
fn zero_head_gives_zero_logits() {
    let mut model = Dianet::<f64>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    for name in ["head.fc2.w", "head.fc2.b"] {
        model.params_mut().get_mut(name).unwrap().data_mut().fill(0.0);
    }
    let logits = model
        .predict_logits(&[&random_raster(1, 16), &random_raster(2, 16)])
        .unwrap();
    assert_eq!(logits, vec![0.0; 3]);
}

#[test]
fn eval_forward_is_deterministic() {
    let model = Dianet::<f32>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    let (a, b) = (random_raster(3, 16), random_raster(4, 16));
    let l1 = model.predict_logits(&[&a, &b]).unwrap();
    let l2 = model.predict_logits(&[&a, &b]).unwrap();
    assert_eq!(
        l1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        l2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

#[test]
fn every_parameter_receives_gradient() {
    let model = Dianet::<f64>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    let mut tape = Tape::new(Mode::Train);
    let bound = model.params().bind(&mut tape).unwrap();
    let mut rng = rng_for(0, "dropout");
    let (a, b) = (random_raster(5, 16), random_raster(6, 16));
    let out = model.forward(&mut tape, &bound, &[&a, &b], &mut rng).unwrap();
    let logits = tape.stack(&[out.logits]).unwrap();
    let f1 = tape.stack(&[out.f1]).unwrap();
    let f2 = tape.stack(&[out.f2.unwrap()]).unwrap();
    let loss = total_loss_var(&mut tape, logits, &[1], Some((f1, f2)), 0.1).unwrap();
    tape.backward(loss.total).unwrap();
    for (name, &v) in model.params().names().iter().zip(bound.vars()) {
        let g = tape.grad(v).unwrap();
        assert!(g.iter().any(|&x| x != 0.0), "no gradient reaches {name}");
    }
}

#[test]
fn checkpoint_roundtrip() {
    let model = Dianet::<f32>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let names = vec!["a".to_string(), "b".into(), "c".into()];
    save_checkpoint(dir.path(), &model, &names, 9).unwrap();
    let (meta, back) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(meta.class_names, names);
    assert_eq!(meta.seed, 9);
    assert_eq!(back.params(), model.params());

    let bin = dir.path().join("params.bin");
    let mut bytes = std::fs::read(&bin).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&bin, bytes).unwrap();
    assert!(matches!(load_checkpoint(dir.path()), Err(Error::Format { .. })));
}

#[test]
fn cast_roundtrip_is_exact() {
    let model = Dianet::<f32>::new(config("cross", 4), &FusionRegistry::builtin()).unwrap();
    let back = model.cast::<f64>().unwrap().cast::<f32>().unwrap();
    assert_eq!(back.params(), model.params());
}

#[test]
fn f32_backprop_matches_finite_differences() {
    let opts = GradCheckOptions {
        tolerance: 1e-3,
        floor: 1e-4,
        max_coords_per_input: Some(6),
        ..GradCheckOptions::default()
    };
    let report = gradcheck_model_f32(&config("cross", 4), 2, 0.1, 3, opts).unwrap();
    assert!(report.passed(), "{report:?}");
}
