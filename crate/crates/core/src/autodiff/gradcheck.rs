//! Central finite-difference verification of tape gradients (F64 only).

use serde::Serialize;

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Worst per-input `|a - n|_2 / max(|a|_2, |n|_2, 1e-8)`.
    pub max_norm_rel_err: f64,
    /// (input index, element index) of the worst element.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Relative error with the `max(|a|, |n|, 1e-8)` denominator.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Step used for element value `x`.
pub fn fd_step(x: f64) -> f64 {
    1e-6 * x.abs().max(1.0)
}

fn eval<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t)).collect();
    let out = f(&tape, &vars)?;
    if out.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck function must return a scalar, got {:?}",
            out.shape()
        )));
    }
    Ok(out.item())
}

/// Compares the tape gradient of `f` w.r.t. every element of every input
/// against central differences.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], tol: f64) -> Result<GradcheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    for (i, t) in inputs.iter().enumerate() {
        if !t.all_finite() {
            return Err(Error::Contract(format!("gradcheck input {i} is not finite")));
        }
    }
    let first = eval(&f, inputs)?;
    let second = eval(&f, inputs)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!(
            "function is not deterministic: {first} vs {second}"
        )));
    }

    let tape = Tape::new();
    let vars: Vec<_> = inputs
        .iter()
        .map(|t| tape.leaf(&t.clone().with_requires_grad(true)))
        .collect();
    let out = f(&tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).expect("leaf requires grad"))
        .collect();

    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        max_norm_rel_err: 0.0,
        worst: None,
        checked: 0,
        tol,
        pass: true,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ii, input) in inputs.iter().enumerate() {
        let (mut diff2, mut a2, mut n2) = (0.0, 0.0, 0.0);
        for e in 0..input.numel() {
            let x = input.data()[e];
            let h = fd_step(x);
            work[ii].data_mut()[e] = x + h;
            let plus = eval(&f, &work)?;
            work[ii].data_mut()[e] = x - h;
            let minus = eval(&f, &work)?;
            work[ii].data_mut()[e] = x;
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic[ii].data()[e];
            let r = rel_err(a, numeric);
            diff2 += (a - numeric) * (a - numeric);
            a2 += a * a;
            n2 += numeric * numeric;
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - numeric).abs());
            if r > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = r.max(report.max_rel_err);
                report.worst = Some((ii, e));
            }
        }
        let norm_rel = diff2.sqrt() / a2.sqrt().max(n2.sqrt()).max(1e-8);
        report.max_norm_rel_err = report.max_norm_rel_err.max(norm_rel);
    }
    report.pass = report.max_rel_err <= tol;
    Ok(report)
}
