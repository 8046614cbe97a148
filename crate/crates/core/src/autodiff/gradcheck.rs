//! Central finite-difference gradient checks.

use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::{Tape, Var};

/// Finite-difference step at 64-bit precision.
pub const FD_STEP: f64 = 1e-5;

/// Denominator floor for the relative error. A central difference at
/// `FD_STEP` carries roundoff near `ε·|f|/h ≈ 1e-11·|f|`, so coordinates whose
/// true derivative is ~0 are judged on absolute error against this floor.
pub const GRADCHECK_ABS_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(parameter index, flat offset, analytic, numeric)` at the worst error.
    pub worst: Option<(usize, usize, f64, f64)>,
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_ABS_FLOOR)
}

/// Compares the tape gradient of `loss(params)` with central differences
/// at `samples` randomly drawn coordinates (all coordinates when there are
/// fewer).
pub fn check_gradients<F>(params: &[Tensor], loss: F, samples: usize, rng: &mut Rng) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[Var<'t>]) -> Result<Var<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = params.iter().map(|p| tape.leaf(p.clone())).collect();
        let l = loss(&tape, &vars)?;
        let grads = tape.backward(l)?;
        vars.iter().map(|&v| grads.get_or_zeros(v)).collect()
    };
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars: Vec<Var<'_>> = ps.iter().map(|p| tape.leaf(p.clone())).collect();
        Ok(loss(&tape, &vars)?.item())
    };
    let total: usize = params.iter().map(Tensor::numel).sum();
    let coords: Vec<(usize, usize)> = if total <= samples {
        params
            .iter()
            .enumerate()
            .flat_map(|(i, p)| (0..p.numel()).map(move |k| (i, k)))
            .collect()
    } else {
        (0..samples)
            .map(|_| {
                let mut flat = rng.int_in(0, total - 1);
                let mut i = 0;
                while flat >= params[i].numel() {
                    flat -= params[i].numel();
                    i += 1;
                }
                (i, flat)
            })
            .collect()
    };
    let mut work = params.to_vec();
    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        worst: None,
    };
    for (i, k) in coords {
        let orig = work[i].data()[k];
        work[i].data_mut()[k] = orig + FD_STEP;
        let up = eval(&work)?;
        work[i].data_mut()[k] = orig - FD_STEP;
        let down = eval(&work)?;
        work[i].data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * FD_STEP);
        let a = analytic[i].data()[k];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((i, k, a, numeric));
        }
    }
    Ok(report)
}
