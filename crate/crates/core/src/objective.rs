//! Training objective: cross-entropy, cosine consistency between the two
//! streams' features and their weighted sum, plus accuracy.
//!
//! Each loss exists twice: a tape version used during training and a
//! value version for tensors, which records onto a throwaway tape so both
//! share one implementation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Mode, Real, Tape, Tensor, Var};

pub const DEFAULT_LAMBDA: f64 = 0.1;

/// The λ values swept by the harness.
pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.01, 0.1, 0.5, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cons: f64,
    pub lambda: f64,
    pub total: f64,
}

/// Tape handles for the three loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub ce: Var,
    /// `None` when the model has a single stream.
    pub cons: Option<Var>,
    pub total: Var,
}

impl LossVars {
    pub fn breakdown<T: Real>(&self, tape: &Tape<T>, lambda: f64) -> LossBreakdown {
        LossBreakdown {
            ce: tape.scalar(self.ce).as_f64(),
            cons: self.cons.map_or(0.0, |c| tape.scalar(c).as_f64()),
            lambda,
            total: tape.scalar(self.total).as_f64(),
        }
    }
}

pub fn cross_entropy_var<T: Real>(tape: &mut Tape<T>, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch);
    }
    tape.cross_entropy(logits, labels)
}

/// `mean(1 − cos(f1ᵢ, f2ᵢ))` over the rows of two `B×d` (or `d`) tensors.
pub fn consistency_var<T: Real>(tape: &mut Tape<T>, f1: Var, f2: Var) -> Result<Var> {
    let cos = tape.cosine_rows(f1, f2)?;
    let n = tape.value(cos).len();
    let s = tape.sum(cos)?;
    let mean = tape.scale(s, T::one() / T::lit(n as f64))?;
    let one = tape.constant(&[], vec![T::one()])?;
    tape.sub(one, mean)
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::NegativeLambda(lambda));
    }
    Ok(())
}

/// `ce + λ·cons`; with `features == None` the consistency term is absent.
pub fn total_loss_var<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[usize],
    features: Option<(Var, Var)>,
    lambda: f64,
) -> Result<LossVars> {
    check_lambda(lambda)?;
    let ce = cross_entropy_var(tape, logits, labels)?;
    let Some((f1, f2)) = features else {
        return Ok(LossVars {
            ce,
            cons: None,
            total: ce,
        });
    };
    let cons = consistency_var(tape, f1, f2)?;
    let total = if lambda == 0.0 {
        ce
    } else {
        let weighted = tape.scale(cons, T::lit(lambda))?;
        tape.add(ce, weighted)?
    };
    Ok(LossVars {
        ce,
        cons: Some(cons),
        total,
    })
}

/// Mean cross-entropy of `B×K` logits.
pub fn cross_entropy<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    let mut tape = Tape::new(Mode::Eval);
    let l = tape.leaf(logits)?;
    let ce = cross_entropy_var(&mut tape, l, labels)?;
    Ok(tape.scalar(ce))
}

pub fn consistency_loss<T: Real>(f1: &Tensor<T>, f2: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new(Mode::Eval);
    let a = tape.leaf(f1)?;
    let b = tape.leaf(f2)?;
    let c = consistency_var(&mut tape, a, b)?;
    Ok(tape.scalar(c))
}

pub fn total_loss<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    f1: &Tensor<T>,
    f2: &Tensor<T>,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new(Mode::Eval);
    let l = tape.leaf(logits)?;
    let a = tape.leaf(f1)?;
    let b = tape.leaf(f2)?;
    let vars = total_loss_var(&mut tape, l, labels, Some((a, b)), lambda)?;
    Ok(vars.breakdown(&tape, lambda))
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate().skip(1) {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of positions where prediction and label agree.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if predictions.len() != labels.len() {
        return Err(Error::ShapeMismatch {
            op: "accuracy",
            left: vec![predictions.len()],
            right: vec![labels.len()],
        });
    }
    let correct = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(correct as f64 / predictions.len() as f64)
}
