use dianet::data::{loso_splits, synth_generate, Dataset, SynthConfig};
use dianet::dynimg::di_onset;
use dianet::harness::{
    emit_report, prepare, render_report, run_ablation, run_loso, train_fold, AblationTable, FoldContext, ReportFormat,
    RunOptions, StreamRegistry, TrainConfig,
};
use dianet::model::{BackboneConfig, ConvStage};
use dianet::Error;

fn tiny_data() -> Dataset {
    synth_generate(&SynthConfig {
        n_subjects: 3,
        samples_per_subject: 6,
        frame_size: 8,
        sequence_length: 8,
        seed: 3,
        ..SynthConfig::default()
    })
    .unwrap()
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        max_epochs: 3,
        batch_size: 4,
        lr: 1e-3,
        seed: 5,
        backbone: BackboneConfig {
            stages: vec![ConvStage {
                out_channels: 3,
                kernel: 3,
                stride: 1,
            }],
            feature_dim: 8,
            flatten: true,
        },
        n_tokens: 2,
        patience: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn train_fold_is_deterministic() {
    let ds = tiny_data();
    let fold = &loso_splits(&ds, 1).unwrap()[0];
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.sequences[i]).collect::<Vec<_>>();
    let cfg = tiny_config();
    let ctx = FoldContext {
        config: &cfg,
        n_classes: ds.n_classes(),
        seed: 17,
    };
    let (m1, h1) = train_fold(&pick(&fold.train), &pick(&fold.val), ctx).unwrap();
    let (m2, h2) = train_fold(&pick(&fold.train), &pick(&fold.val), ctx).unwrap();
    assert_eq!(h1, h2);
    for (a, b) in m1.params().tensors().iter().zip(m2.params().tensors()) {
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn zero_patience_stops_at_first_stale_epoch() {
    let ds = tiny_data();
    let fold = &loso_splits(&ds, 1).unwrap()[0];
    let pick = |idx: &[usize]| idx.iter().map(|&i| &ds.sequences[i]).collect::<Vec<_>>();
    let cfg = TrainConfig {
        patience: 0,
        max_epochs: 20,
        lr: 0.5,
        ..tiny_config()
    };
    let ctx = FoldContext {
        config: &cfg,
        n_classes: ds.n_classes(),
        seed: 2,
    };
    let (_, h) = train_fold(&pick(&fold.train), &pick(&fold.val), ctx).unwrap();
    let n = h.epochs.len();
    if h.best_epoch != n {
        assert_eq!(h.best_epoch, n - 1);
        assert!(h.epochs[n - 1].val_loss >= h.best_val_loss);
        assert_eq!(h.stopped_early, n < 20);
    }
    for w in h.epochs[..n - 1].windows(2) {
        assert!(w[1].val_loss < w[0].val_loss);
    }
}

#[test]
fn empty_training_set_is_an_error() {
    let cfg = tiny_config();
    let ctx = FoldContext {
        config: &cfg,
        n_classes: 3,
        seed: 0,
    };
    assert!(matches!(train_fold(&[], &[], ctx), Err(Error::EmptyTrainSet)));
}

#[test]
fn fold_order_and_threads_do_not_change_results() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let a = run_loso(&ds, "tiny", &cfg, &RunOptions::threads(1)).unwrap();
    let b = run_loso(
        &ds,
        "tiny",
        &cfg,
        &RunOptions {
            threads: Some(2),
            fold_order: Some(vec![2, 0, 1]),
        },
    )
    .unwrap();
    assert!(a.same_results(&b));
    a.check_invariants(ds.len()).unwrap();
    assert_eq!(a.total_samples, ds.len());
    for f in &a.folds {
        let rows: usize = f.confusion.iter().map(|r| r.iter().sum::<usize>()).sum();
        assert_eq!(rows, f.n_test);
        let diag: usize = (0..f.confusion.len()).map(|i| f.confusion[i][i]).sum();
        assert_eq!(diag, f.correct);
    }
    let subjects: Vec<&str> = a.folds.iter().map(|f| f.subject.as_str()).collect();
    assert_eq!(subjects, ["s01", "s02", "s03"]);
}

#[test]
fn reports_render_in_every_format() {
    let ds = tiny_data();
    let r = run_loso(&ds, "tiny", &tiny_config(), &RunOptions::threads(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    for format in [ReportFormat::Text, ReportFormat::Csv, ReportFormat::Json] {
        let path = dir.path().join(format!("r.{}", format.extension()));
        emit_report(&r, format, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, render_report(&r, format).unwrap());
        assert!(text.contains("s02"));
    }
    let json: serde_json::Value = serde_json::from_str(&render_report(&r, ReportFormat::Json).unwrap()).unwrap();
    assert_eq!(json["total_samples"], ds.len());
    let csv = render_report(&r, ReportFormat::Csv).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 + 1);
    assert!("yaml".parse::<ReportFormat>().is_err());
}

#[test]
fn stream_registry_knows_builtin_modes() {
    let reg = StreamRegistry::builtin();
    for name in [
        "dual-phase",
        "dual-full",
        "single-full",
        "single-onset",
        "single-offset",
    ] {
        assert_eq!(reg.create(name).unwrap().name(), name);
    }
    match reg.create("triple") {
        Err(Error::UnknownStrategy { available, .. }) => assert!(available.contains("dual-phase")),
        other => panic!("{:?}", other.err()),
    }
    let bad = TrainConfig {
        attention: "nope".into(),
        ..tiny_config()
    };
    assert!(bad.validate().is_err());
}

#[test]
fn dual_full_feeds_one_image_to_both_streams() {
    let ds = tiny_data();
    let reg = StreamRegistry::builtin();
    let seq = &ds.sequences[0];
    let full = reg.create("dual-full").unwrap().inputs(seq, None).unwrap();
    assert_eq!(full.len(), 2);
    assert_eq!(full[0], full[1]);
    let dual = reg.create("dual-phase").unwrap().inputs(seq, Some(12)).unwrap();
    assert_ne!(dual[0], dual[1]);
    assert_eq!(dual[0].shape(), [1, 12, 12]);
    let single = reg.create("single-onset").unwrap().inputs(seq, None).unwrap();
    assert_eq!(single, vec![prepare(&di_onset(seq).unwrap().raster, None)]);
}

#[test]
fn ablation_lays_out_both_tables() {
    let ds = tiny_data();
    let cfg = TrainConfig {
        max_epochs: 1,
        patience: 0,
        ..tiny_config()
    };
    let r = run_ablation(&ds, "tiny", &cfg, &RunOptions::threads(1)).unwrap();
    assert_eq!(r.runs.len(), 6);
    let att: Vec<_> = r.rows_of(AblationTable::Attention).collect();
    assert_eq!(att.len(), 2);
    assert!(att.iter().all(|row| row.streams == 2));
    let inp: Vec<_> = r.rows_of(AblationTable::Input).collect();
    assert_eq!(inp.iter().map(|row| row.streams).collect::<Vec<_>>(), [1, 1, 1, 2, 2]);
    for row in &r.rows {
        assert_eq!(row.accuracy, r.runs[row.run].micro_accuracy);
        assert!((0.0..=1.0).contains(&row.accuracy));
    }
    let text = render_report(&r, ReportFormat::Text).unwrap();
    assert!(text.contains("Cross Attention Fusion Block"));
}
