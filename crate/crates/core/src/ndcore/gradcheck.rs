use crate::error::{Error, Result};

use super::{Mode, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Pass threshold on the maximum relative error.
    pub tolerance: f64,
    /// Denominator floor: relative error is `|a-n| / max(|a|, |n|, floor)`,
    /// so coordinates whose true gradient is ~0 are judged absolutely.
    pub floor: f64,
    /// When set, check at most this many evenly spaced coordinates per input.
    pub max_coords_per_input: Option<usize>,
    pub mode: Mode,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: 1e-4,
            tolerance: 1e-5,
            floor: 1e-6,
            max_coords_per_input: None,
            mode: Mode::Eval,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Max relative error per input tensor.
    pub per_input: Vec<f64>,
    /// (input, coordinate, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    /// Coordinates left out of the error because the function is not smooth
    /// within one step of them (a ReLU kink between `x-h` and `x+h`).
    pub kinks: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Checks the tape gradient of a scalar function of one tensor against
/// central finite differences.
pub fn grad_check<F>(mut f: F, point: &Tensor<f64>, opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(point), opts)
}

/// Multi-input variant: `f` receives one leaf per entry of `points`.
pub fn grad_check_many<F>(mut f: F, points: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |pts: &[Tensor<f64>], want_grad: bool| -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new(opts.mode);
        let vars = pts
            .iter()
            .map(|p| {
                let leaf = p.clone().requiring_grad();
                tape.leaf(&leaf)
            })
            .collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NonScalarRoot(tape.shape(out).to_vec()));
        }
        let value = tape.scalar(out);
        let mut grads = Vec::new();
        if want_grad {
            tape.backward(out)?;
            for (v, p) in vars.iter().zip(pts) {
                grads.push(
                    tape.grad(*v)
                        .map(<[f64]>::to_vec)
                        .unwrap_or_else(|| vec![0.0; p.numel()]),
                );
            }
        }
        Ok((value, grads))
    };

    let (_, analytic) = eval(points, true)?;
    compare(&analytic, |pts| eval(pts, false).map(|r| r.0), points, opts)
}

/// Checks externally computed gradients (e.g. from a lower-precision tape)
/// against central differences of the 64-bit `f`.
pub fn grad_check_analytic<F>(
    analytic: &[Vec<f64>],
    mut f: F,
    points: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if analytic.len() != points.len() || analytic.iter().zip(points).any(|(a, p)| a.len() != p.numel()) {
        return Err(Error::InvalidArgument(
            "analytic gradients do not match the points".into(),
        ));
    }
    let eval = |pts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new(opts.mode);
        let vars = pts.iter().map(|p| tape.leaf(p)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        if tape.value(out).len() != 1 {
            return Err(Error::NonScalarRoot(tape.shape(out).to_vec()));
        }
        Ok(tape.scalar(out))
    };
    compare(analytic, eval, points, opts)
}

fn compare<E>(
    analytic: &[Vec<f64>],
    mut eval: E,
    points: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    E: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    let mut work: Vec<Tensor<f64>> = points.to_vec();
    let mut per_input = vec![0.0_f64; points.len()];
    let mut worst = None;
    let mut max_rel = 0.0_f64;
    let mut checked = 0;
    let mut kinks = 0;
    for i in 0..points.len() {
        let n = points[i].numel();
        let coords: Vec<usize> = match opts.max_coords_per_input {
            Some(m) if m < n => (0..m).map(|j| j * n / m).collect(),
            _ => (0..n).collect(),
        };
        for c in coords {
            let mut central = |h: f64| -> Result<f64> {
                let orig = work[i].data()[c];
                work[i].data_mut()[c] = orig + h;
                let fp = eval(&work)?;
                work[i].data_mut()[c] = orig - h;
                let fm = eval(&work)?;
                work[i].data_mut()[c] = orig;
                Ok((fp - fm) / (2.0 * h))
            };
            let rel_err = |x: f64, y: f64| (x - y).abs() / x.abs().max(y.abs()).max(opts.floor);
            let a = analytic[i][c];
            let mut numeric = central(opts.step)?;
            let mut rel = rel_err(a, numeric);
            checked += 1;
            if rel >= opts.tolerance {
                // a smooth function gives the same estimate at half the step
                let half = central(opts.step / 2.0)?;
                if rel_err(numeric, half) >= opts.tolerance {
                    if rel_err(a, half) >= opts.tolerance {
                        kinks += 1;
                        continue;
                    }
                    numeric = half;
                    rel = rel_err(a, half);
                }
            }
            per_input[i] = per_input[i].max(rel);
            if rel > max_rel || worst.is_none() {
                max_rel = max_rel.max(rel);
                worst = Some((i, c, a, numeric));
            }
        }
    }
    Ok(GradCheckReport {
        max_rel_error: max_rel,
        per_input,
        worst,
        coords_checked: checked,
        kinks,
        tolerance: opts.tolerance,
    })
}
