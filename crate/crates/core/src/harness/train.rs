use std::collections::HashMap;

use log::debug;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{AugmentDraw, FrameSequence};
use crate::error::{Error, Result};
use crate::model::{BackboneConfig, Dianet, FusionConfig, FusionRegistry, ModelConfig};
use crate::ndcore::{AdamConfig, AdamState, Mode, Tape};
use crate::objective::{argmax, total_loss_var, LossBreakdown, DEFAULT_LAMBDA};
use crate::raster::Raster;
use crate::seed::{derive_seed, rng_for};

use super::streams::{StreamInputs, StreamRegistry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub patience: usize,
    pub lambda: f64,
    pub seed: u64,
    /// Square network input side; `None` keeps the frame size.
    pub input_size: Option<usize>,
    pub augment: bool,
    pub stream_mode: String,
    /// Fusion block for two-stream modes; single-stream modes always use
    /// the affine bypass.
    pub attention: String,
    pub backbone: BackboneConfig,
    pub n_tokens: usize,
    pub hidden: Option<usize>,
    pub dropout: f64,
    pub tie_backbones: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 50,
            patience: 10,
            lambda: DEFAULT_LAMBDA,
            seed: 0,
            input_size: None,
            augment: true,
            stream_mode: "dual-phase".into(),
            attention: "cross".into(),
            backbone: BackboneConfig::default(),
            n_tokens: FusionConfig::default().n_tokens,
            hidden: None,
            dropout: 0.3,
            tie_backbones: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be >= 1".into());
        }
        if self.patience > self.max_epochs {
            return fail(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("learning rate {} must be positive", self.lr));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::NegativeLambda(self.lambda));
        }
        StreamRegistry::builtin().create(&self.stream_mode)?;
        FusionRegistry::<f32>::builtin().create(&self.attention)?;
        Ok(())
    }

    pub fn stream_inputs(&self) -> Result<Box<dyn StreamInputs>> {
        StreamRegistry::builtin().create(&self.stream_mode)
    }

    /// Name of the fusion block actually used by the stream mode.
    pub fn fusion_kind(&self) -> Result<String> {
        Ok(if self.stream_inputs()?.streams() == 2 {
            self.attention.clone()
        } else {
            "affine".into()
        })
    }

    pub fn model_config(
        &self,
        in_channels: usize,
        frame_side: usize,
        n_classes: usize,
        init_seed: u64,
    ) -> Result<ModelConfig> {
        Ok(ModelConfig {
            in_channels,
            input_size: self.input_size.unwrap_or(frame_side),
            backbone: self.backbone.clone(),
            fusion: FusionConfig {
                kind: self.fusion_kind()?,
                n_tokens: self.n_tokens,
            },
            hidden: self.hidden,
            n_classes,
            dropout: self.dropout,
            tie_backbones: self.tie_backbones,
            init_seed,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown,
    pub train_accuracy: f64,
    /// Loss used for early stopping (training loss when there is no
    /// validation data).
    pub val_loss: f64,
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Prepared network inputs for one sample.
#[derive(Debug, Clone)]
pub struct Sample {
    pub inputs: Vec<Raster>,
    pub label: usize,
}

/// Network inputs keyed by `(sequence, augmentation draw)`; identity draws
/// are kept for the whole fold, augmented ones for one epoch.
#[derive(Debug, Default)]
pub struct DiCache {
    entries: HashMap<(usize, (bool, u64)), Vec<Raster>>,
}

impl DiCache {
    pub fn get_or_build(
        &mut self,
        key: usize,
        seq: &FrameSequence,
        draw: AugmentDraw,
        mode: &dyn StreamInputs,
        side: Option<usize>,
    ) -> Result<&Vec<Raster>> {
        use std::collections::hash_map::Entry;
        match self.entries.entry((key, draw.key())) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => {
                let inputs = if draw.is_identity() {
                    mode.inputs(seq, side)?
                } else {
                    mode.inputs(&draw.apply(seq), side)?
                };
                Ok(e.insert(inputs))
            }
        }
    }

    pub fn end_epoch(&mut self) {
        self.entries.retain(|(_, k), _| *k == AugmentDraw::IDENTITY.key());
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Everything [`train_fold`] needs besides the data.
#[derive(Debug, Clone, Copy)]
pub struct FoldContext<'a> {
    pub config: &'a TrainConfig,
    pub n_classes: usize,
    /// Root of every random stream in the fold.
    pub seed: u64,
}

/// Loss and predictions of a batch run through the model.
struct BatchResult {
    loss: LossBreakdown,
    predictions: Vec<usize>,
}

fn run_batch(
    model: &mut Dianet<f32>,
    samples: &[&Sample],
    lambda: f64,
    mode: Mode,
    dropout_seed: u64,
) -> Result<BatchResult> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut tape = Tape::new(mode);
    let bound = model.params().bind(&mut tape)?;
    let mut rng = rng_for(dropout_seed, "dropout");
    let mut logits = Vec::with_capacity(samples.len());
    let mut f1s = Vec::with_capacity(samples.len());
    let mut f2s = Vec::with_capacity(samples.len());
    for s in samples {
        let refs: Vec<&Raster> = s.inputs.iter().collect();
        let out = model.forward(&mut tape, &bound, &refs, &mut rng)?;
        logits.push(out.logits);
        f1s.push(out.f1);
        if let Some(f2) = out.f2 {
            f2s.push(f2);
        }
    }
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    let logits = tape.stack(&logits)?;
    let features = if f2s.is_empty() {
        None
    } else {
        Some((tape.stack(&f1s)?, tape.stack(&f2s)?))
    };
    let vars = total_loss_var(&mut tape, logits, &labels, features, lambda)?;
    let k = tape.shape(logits)[1];
    let predictions = tape.value(logits).chunks(k).map(argmax).collect();
    if mode == Mode::Train {
        tape.backward(vars.total)?;
        model.params_mut().accumulate_grads(&tape, &bound)?;
    }
    Ok(BatchResult {
        loss: vars.breakdown(&tape, lambda),
        predictions,
    })
}

/// Mean loss and accuracy over `samples` in eval mode.
pub fn evaluate(
    model: &mut Dianet<f32>,
    samples: &[Sample],
    lambda: f64,
    batch: usize,
) -> Result<(LossBreakdown, Vec<usize>)> {
    let mut acc = Accumulator::default();
    let mut predictions = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let r = run_batch(model, &refs, lambda, Mode::Eval, 0)?;
        acc.add(&r.loss, chunk.len());
        predictions.extend(r.predictions);
    }
    Ok((acc.mean(lambda), predictions))
}

#[derive(Default)]
struct Accumulator {
    ce: f64,
    cons: f64,
    total: f64,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, l: &LossBreakdown, n: usize) {
        self.ce += l.ce * n as f64;
        self.cons += l.cons * n as f64;
        self.total += l.total * n as f64;
        self.n += n;
    }

    fn mean(&self, lambda: f64) -> LossBreakdown {
        let n = self.n.max(1) as f64;
        LossBreakdown {
            ce: self.ce / n,
            cons: self.cons / n,
            lambda,
            total: self.total / n,
        }
    }
}

fn prepare_all(seqs: &[&FrameSequence], mode: &dyn StreamInputs, side: Option<usize>) -> Result<Vec<Sample>> {
    seqs.iter()
        .map(|s| {
            Ok(Sample {
                inputs: mode.inputs(s, side)?,
                label: s.label,
            })
        })
        .collect()
}

fn correct(predictions: &[usize], samples: &[Sample]) -> usize {
    predictions.iter().zip(samples).filter(|(p, s)| **p == s.label).count()
}

/// Builds the fold's model from `ctx.seed`. Frame geometry comes from the
/// first training sequence.
pub fn init_model(train: &[&FrameSequence], ctx: FoldContext<'_>) -> Result<Dianet<f32>> {
    let shape = train
        .first()
        .and_then(|s| s.frame_shape())
        .ok_or(Error::EmptyTrainSet)?;
    if shape[1] != shape[2] && ctx.config.input_size.is_none() {
        return Err(Error::Config(format!(
            "frames are {}×{}; set input_size for non-square frames",
            shape[1], shape[2]
        )));
    }
    let mc = ctx
        .config
        .model_config(shape[0], shape[1], ctx.n_classes, derive_seed(ctx.seed, "init"))?;
    Dianet::new(mc, &FusionRegistry::builtin())
}

/// Trains one model with Adam on shuffled minibatches and early stopping on
/// validation loss; returns the parameters of the best epoch.
pub fn train_fold(
    train: &[&FrameSequence],
    val: &[&FrameSequence],
    ctx: FoldContext<'_>,
) -> Result<(Dianet<f32>, TrainHistory)> {
    let cfg = ctx.config;
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyTrainSet);
    }
    let mode = cfg.stream_inputs()?;
    let mut model = init_model(train, ctx)?;
    let side = Some(model.config().input_size);
    let mut adam = AdamState::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.params().tensors(),
    );
    let val_samples = prepare_all(val, mode.as_ref(), side)?;
    let mut cache = DiCache::default();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut best = model.params().clone();
    let mut stale = 0;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = derive_seed(ctx.seed, &format!("epoch/{epoch}"));
        order.shuffle(&mut rng_for(epoch_seed, "shuffle"));
        let mut aug_rng = rng_for(epoch_seed, "augment");
        let mut samples = Vec::with_capacity(train.len());
        for &i in &order {
            let draw = if cfg.augment {
                AugmentDraw::sample(&mut aug_rng)
            } else {
                AugmentDraw::IDENTITY
            };
            let inputs = cache.get_or_build(i, train[i], draw, mode.as_ref(), side)?.clone();
            samples.push(Sample {
                inputs,
                label: train[i].label,
            });
        }
        cache.end_epoch();

        let mut acc = Accumulator::default();
        let mut n_correct = 0;
        for (b, chunk) in samples.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&Sample> = chunk.iter().collect();
            model.params_mut().zero_grad();
            let r = run_batch(
                &mut model,
                &refs,
                cfg.lambda,
                Mode::Train,
                derive_seed(epoch_seed, &format!("batch/{b}")),
            )?;
            adam.step(model.params_mut().tensors_mut())?;
            acc.add(&r.loss, chunk.len());
            n_correct += r.predictions.iter().zip(chunk).filter(|(p, s)| **p == s.label).count();
        }
        let train_loss = acc.mean(cfg.lambda);

        let (val_loss, val_accuracy) = if val_samples.is_empty() {
            (train_loss.total, None)
        } else {
            let (l, p) = evaluate(&mut model, &val_samples, cfg.lambda, cfg.batch_size)?;
            (
                l.total,
                Some(correct(&p, &val_samples) as f64 / val_samples.len() as f64),
            )
        };
        debug!(
            "epoch {epoch}: train {:.4} acc {:.3} val {:.4}",
            train_loss.total,
            n_correct as f64 / train.len() as f64,
            val_loss
        );
        history.epochs.push(EpochRecord {
            epoch,
            train: train_loss,
            train_accuracy: n_correct as f64 / train.len() as f64,
            val_loss,
            val_accuracy,
        });
        if val_loss < history.best_val_loss {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best = model.params().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    let mut model = Dianet::from_params(model.config().clone(), best, &FusionRegistry::builtin())?;
    model.params_mut().zero_grad();
    Ok((model, history))
}
