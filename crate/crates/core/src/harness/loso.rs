use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{check_fold, loso_splits, Dataset, Fold, FrameSequence, VAL_FRACTION};
use crate::error::{Error, Result};
use crate::model::Dianet;
use crate::seed::{derive_seed, rng_for};

use super::train::{evaluate, train_fold, FoldContext, Sample, TrainConfig, TrainHistory};

/// Execution knobs that do not affect results.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Worker threads for folds; `None` uses every core.
    pub threads: Option<usize>,
    /// Fold execution order as indices into the sorted subject list.
    pub fold_order: Option<Vec<usize>>,
}

impl RunOptions {
    pub fn threads(n: usize) -> Self {
        RunOptions {
            threads: Some(n),
            fold_order: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub subject: String,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub correct: usize,
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LosoReport {
    pub dataset: String,
    pub class_names: Vec<String>,
    pub config: TrainConfig,
    pub fusion: String,
    pub param_count: usize,
    pub folds: Vec<FoldResult>,
    pub total_correct: usize,
    pub total_samples: usize,
    /// Σ correct / Σ n_test over all folds.
    pub micro_accuracy: f64,
    /// Mean of per-fold accuracies.
    pub macro_accuracy: f64,
    pub confusion: Vec<Vec<usize>>,
    pub notes: Vec<String>,
    /// Excluded from [`LosoReport::same_results`].
    pub wall_clock_secs: f64,
}

impl LosoReport {
    /// Equality of everything except timing, with floats compared bitwise.
    pub fn same_results(&self, other: &LosoReport) -> bool {
        let strip = |r: &LosoReport| {
            let mut r = r.clone();
            r.wall_clock_secs = 0.0;
            serde_json::to_string(&r).expect("report serializes")
        };
        strip(self) == strip(other)
    }

    pub fn check_invariants(&self, dataset_len: usize) -> Result<()> {
        let n: usize = self.folds.iter().map(|f| f.n_test).sum();
        let c: usize = self.folds.iter().map(|f| f.correct).sum();
        if n != dataset_len || n != self.total_samples || c != self.total_correct {
            return Err(Error::InvalidArgument(format!(
                "report covers {n} test samples for a dataset of {dataset_len}"
            )));
        }
        if (self.micro_accuracy - c as f64 / n as f64).abs() > 1e-9 {
            return Err(Error::InvalidArgument("micro accuracy is not Σcorrect/Σn".into()));
        }
        Ok(())
    }
}

pub(crate) fn single_stream_note(cfg: &TrainConfig) -> Option<String> {
    let streams = cfg.stream_inputs().ok()?.streams();
    (streams == 1)
        .then(|| "single-stream mode: stream-1 backbone followed by an affine d→d map in place of fusion".to_string())
}

fn run_fold(dataset: &Dataset, fold: &Fold, cfg: &TrainConfig) -> Result<FoldResult> {
    check_fold(dataset, fold)?;
    let pick = |idx: &[usize]| -> Vec<&FrameSequence> { idx.iter().map(|&i| &dataset.sequences[i]).collect() };
    let (train, val, test) = (pick(&fold.train), pick(&fold.val), pick(&fold.test));
    if train.iter().chain(&val).any(|s| s.subject_id == fold.subject) {
        return Err(Error::InvalidArgument(format!(
            "fold {}: test subject in training data",
            fold.subject
        )));
    }
    let ctx = FoldContext {
        config: cfg,
        n_classes: dataset.n_classes(),
        seed: derive_seed(cfg.seed, &format!("fold/{}", fold.subject)),
    };
    let (mut model, history) = train_fold(&train, &val, ctx)?;
    let mode = cfg.stream_inputs()?;
    let side = Some(model.config().input_size);
    let samples: Vec<Sample> = test
        .iter()
        .map(|s| {
            Ok(Sample {
                inputs: mode.inputs(s, side)?,
                label: s.label,
            })
        })
        .collect::<Result<_>>()?;
    let (_, predictions) = evaluate(&mut model, &samples, cfg.lambda, cfg.batch_size)?;
    let k = dataset.n_classes();
    let mut confusion = vec![vec![0; k]; k];
    for (p, s) in predictions.iter().zip(&samples) {
        confusion[s.label][*p] += 1;
    }
    let correct = (0..k).map(|i| confusion[i][i]).sum();
    info!(
        "fold {}: {}/{} correct after {} epochs",
        fold.subject,
        correct,
        samples.len(),
        history.epochs.len()
    );
    Ok(FoldResult {
        subject: fold.subject.clone(),
        n_train: train.len(),
        n_val: val.len(),
        n_test: samples.len(),
        correct,
        accuracy: correct as f64 / samples.len() as f64,
        confusion,
        history,
    })
}

fn pool(threads: Option<usize>) -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        b = b.num_threads(n.max(1));
    }
    b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Leave-one-subject-out evaluation: one fresh model per subject, tested on
/// that subject only. Folds run in parallel; each owns its seed, so the
/// report does not depend on scheduling or `opts.fold_order`.
pub fn run_loso(dataset: &Dataset, name: &str, cfg: &TrainConfig, opts: &RunOptions) -> Result<LosoReport> {
    cfg.validate()?;
    let started = Instant::now();
    let folds = loso_splits(dataset, derive_seed(cfg.seed, "loso"))?;
    let order: Vec<usize> = match &opts.fold_order {
        Some(o) => {
            let mut sorted = o.clone();
            sorted.sort_unstable();
            if sorted != (0..folds.len()).collect::<Vec<_>>() {
                return Err(Error::Config(format!("fold order must permute 0..{}", folds.len())));
            }
            o.clone()
        }
        None => (0..folds.len()).collect(),
    };
    let results: Vec<(usize, FoldResult)> = pool(opts.threads)?.install(|| {
        order
            .par_iter()
            .map(|&i| run_fold(dataset, &folds[i], cfg).map(|r| (i, r)))
            .collect::<Result<Vec<_>>>()
    })?;
    let mut results = results;
    results.sort_by_key(|(i, _)| *i);
    let fold_results: Vec<FoldResult> = results.into_iter().map(|(_, r)| r).collect();

    let k = dataset.n_classes();
    let mut confusion = vec![vec![0; k]; k];
    for f in &fold_results {
        for (row, frow) in confusion.iter_mut().zip(&f.confusion) {
            for (c, v) in row.iter_mut().zip(frow) {
                *c += v;
            }
        }
    }
    let total_correct = fold_results.iter().map(|f| f.correct).sum();
    let total_samples = fold_results.iter().map(|f| f.n_test).sum();
    let first = dataset.sequences.first().ok_or(Error::EmptyTrainSet)?;
    let model_cfg = cfg.model_config(first.frames[0].channels, first.frames[0].height, k, 0)?;
    let report = LosoReport {
        dataset: name.to_string(),
        class_names: dataset.class_names.clone(),
        config: cfg.clone(),
        fusion: cfg.fusion_kind()?,
        param_count: Dianet::<f32>::param_count_formula(&model_cfg)?,
        micro_accuracy: total_correct as f64 / total_samples as f64,
        macro_accuracy: fold_results.iter().map(|f| f.accuracy).sum::<f64>() / fold_results.len() as f64,
        folds: fold_results,
        total_correct,
        total_samples,
        confusion,
        notes: single_stream_note(cfg).into_iter().collect(),
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    report.check_invariants(dataset.len())?;
    Ok(report)
}

/// One LOSO run per λ.
pub fn run_lambda_sweep(
    dataset: &Dataset,
    name: &str,
    cfg: &TrainConfig,
    lambdas: &[f64],
    opts: &RunOptions,
) -> Result<Vec<LosoReport>> {
    lambdas
        .iter()
        .map(|&lambda| {
            let cfg = TrainConfig { lambda, ..cfg.clone() };
            run_loso(dataset, name, &cfg, opts)
        })
        .collect()
}

/// Trains on every sample except a stratified validation share; used to
/// produce a deployable checkpoint.
pub fn train_all(dataset: &Dataset, cfg: &TrainConfig) -> Result<(Dianet<f32>, TrainHistory)> {
    cfg.validate()?;
    let mut rng = rng_for(cfg.seed, "train-all/val-split");
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in 0..dataset.n_classes() {
        let mut members: Vec<&FrameSequence> = dataset.sequences.iter().filter(|s| s.label == class).collect();
        members.shuffle(&mut rng);
        let n_val = (members.len() as f64 * VAL_FRACTION).round() as usize;
        val.extend_from_slice(&members[..n_val]);
        train.extend_from_slice(&members[n_val..]);
    }
    let ctx = FoldContext {
        config: cfg,
        n_classes: dataset.n_classes(),
        seed: derive_seed(cfg.seed, "train-all"),
    };
    train_fold(&train, &val, ctx)
}
