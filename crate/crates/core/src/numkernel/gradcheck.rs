//! Central finite-difference checking of tape gradients.
//!
//! The numerical side only ever evaluates forward values, so it stays
//! independent of every backward rule it is used to verify.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Default central-difference step.
pub const FD_EPS: f64 = 1e-5;

/// Magnitude below which gradient errors are measured absolutely.
pub const REL_FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
}

/// Central difference of `f` with respect to every element of `point`.
pub fn finite_diff(f: impl Fn(&[f64]) -> f64, point: &[f64], eps: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + eps;
            let hi = f(&x);
            x[i] = point[i] - eps;
            let lo = f(&x);
            x[i] = point[i];
            (hi - lo) / (2.0 * eps)
        })
        .collect()
}

/// Compare tape gradients of the scalar built by `f` against central
/// differences for every element of every input.
pub fn check<F>(inputs: &[Tensor], f: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    check_subset(inputs, f, eps, &all)
}

/// Like [`check`] but only for the listed `(input, element)` coordinates.
pub fn check_subset<F>(
    inputs: &[Tensor],
    f: F,
    eps: f64,
    coords: &[(usize, usize)],
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ts.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
    };
    let mut work = inputs.to_vec();
    for &(i, j) in coords {
        if i >= inputs.len() || j >= inputs[i].len() {
            return Err(Error::IndexOutOfRange {
                what: "gradcheck coordinate",
                index: j,
                len: inputs.get(i).map_or(0, Tensor::len),
            });
        }
        let analytic = grads.get(vars[i]).map_or(0.0, |g| g.data()[j]);
        let x0 = inputs[i].data()[j];
        work[i].data_mut()[j] = x0 + eps;
        let hi = eval(&work)?;
        work[i].data_mut()[j] = x0 - eps;
        let lo = eval(&work)?;
        work[i].data_mut()[j] = x0;
        let numeric = (hi - lo) / (2.0 * eps);
        report.max_rel_err = report.max_rel_err.max(rel_err(analytic, numeric));
        report.max_abs_err = report.max_abs_err.max((analytic - numeric).abs());
        report.checked += 1;
    }
    Ok(report)
}

/// `sum(out * weights)`: reduces any output to a scalar that depends on every
/// element, so a gradient check exercises the full Jacobian.
pub fn weighted_sum(tape: &mut Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finite_diff_quadratic() {
        let g = finite_diff(|v| v[0] * v[0] + 3.0 * v[0] * v[1], &[1.0, 2.0], 1e-6);
        assert!((g[0] - 8.0).abs() < 1e-6);
        assert!((g[1] - 3.0).abs() < 1e-6);
    }

    #[test]
    fn rel_err_floor() {
        assert_eq!(rel_err(1.0, 1.0), 0.0);
        assert!((rel_err(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((rel_err(1e-9, 0.0) - 1e-5).abs() < 1e-15);
    }
}
