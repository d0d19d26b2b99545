use rand::Rng;

use crate::error::Result;
use crate::model::{Dianet, FusionRegistry, ModelConfig};
use crate::ndcore::{grad_check_analytic, grad_check_many, Bound, GradCheckOptions, GradCheckReport, Real, Tape, Var};
use crate::objective::total_loss_var;
use crate::raster::Raster;
use crate::seed::{rng_for, Rng as SeededRng};

struct Probe {
    samples: Vec<Vec<Raster>>,
    labels: Vec<usize>,
    lambda: f64,
    seed: u64,
}

impl Probe {
    fn new(config: &ModelConfig, streams: usize, batch: usize, lambda: f64, seed: u64) -> Self {
        let mut rng = rng_for(seed, "gradcheck/data");
        let side = config.input_size;
        let mut samples = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..batch.max(1) {
            samples.push(
                (0..streams)
                    .map(|_| {
                        let data = (0..config.in_channels * side * side)
                            .map(|_| rng.random::<f32>())
                            .collect();
                        Raster::new(config.in_channels, side, side, data).expect("positive extents")
                    })
                    .collect(),
            );
            labels.push(rng.random_range(0..config.n_classes));
        }
        Probe {
            samples,
            labels,
            lambda,
            seed,
        }
    }

    /// Total loss of the batch. The dropout stream restarts on every call
    /// so training-mode checks see the same mask each time.
    fn loss<T: Real>(&self, model: &Dianet<T>, tape: &mut Tape<T>, bound: &Bound) -> Result<Var> {
        let mut rng: SeededRng = rng_for(self.seed, "gradcheck/dropout");
        let mut logits = Vec::new();
        let mut f1s = Vec::new();
        let mut f2s = Vec::new();
        for inputs in &self.samples {
            let refs: Vec<&Raster> = inputs.iter().collect();
            let out = model.forward(tape, bound, &refs, &mut rng)?;
            logits.push(out.logits);
            f1s.push(out.f1);
            f2s.extend(out.f2);
        }
        let logits = tape.stack(&logits)?;
        let features = if f2s.is_empty() {
            None
        } else {
            Some((tape.stack(&f1s)?, tape.stack(&f2s)?))
        };
        Ok(total_loss_var(tape, logits, &self.labels, features, self.lambda)?.total)
    }
}

/// Finite-difference check of the total loss with respect to every model
/// parameter, at 64-bit, on a random batch.
pub fn gradcheck_model(
    config: &ModelConfig,
    batch: usize,
    lambda: f64,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let model = Dianet::<f64>::new(config.clone(), &FusionRegistry::builtin())?;
    let probe = Probe::new(config, model.streams(), batch, lambda, seed);
    let names = model.params().names().to_vec();
    grad_check_many(
        |tape, vars| probe.loss(&model, tape, &Bound::new(names.clone(), vars.to_vec())?),
        model.params().tensors(),
        opts,
    )
}

/// Gradients from the 32-bit tape against 64-bit central differences.
pub fn gradcheck_model_f32(
    config: &ModelConfig,
    batch: usize,
    lambda: f64,
    seed: u64,
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let model = Dianet::<f32>::new(config.clone(), &FusionRegistry::builtin())?;
    let probe = Probe::new(config, model.streams(), batch, lambda, seed);
    let mut tape = Tape::new(opts.mode);
    let bound = model.params().bind(&mut tape)?;
    let root = probe.loss(&model, &mut tape, &bound)?;
    tape.backward(root)?;
    let analytic: Vec<Vec<f64>> = bound
        .vars()
        .iter()
        .zip(model.params().tensors())
        .map(|(&v, t)| match tape.grad(v) {
            Some(g) => g.iter().map(|&x| f64::from(x)).collect(),
            None => vec![0.0; t.numel()],
        })
        .collect();
    let wide = model.cast::<f64>()?;
    let names = wide.params().names().to_vec();
    grad_check_analytic(
        &analytic,
        |tape, vars| probe.loss(&wide, tape, &Bound::new(names.clone(), vars.to_vec())?),
        wide.params().tensors(),
        opts,
    )
}
