//! Central finite-difference verification of tape gradients.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numcore::{NodeId, Tape, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    pub step: f64,
    pub tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            tol: DEFAULT_TOL,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ParamReport {
    pub name: String,
    pub entries: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Row-major index of the worst entry.
    pub worst_index: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub step: f64,
    pub tol: f64,
    pub value: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub params: Vec<ParamReport>,
}

/// `|a - n| / max(1e-8, |a| + |n|)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(Tape, Vec<NodeId>, NodeId)>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let root = f(&mut tape, &ids)?;
    Ok((tape, ids, root))
}

fn forward_value<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    let (tape, _, root) = evaluate(f, params)?;
    tape.value(root).item()
}

/// Compare tape gradients of the scalar built by `f` against central
/// differences, entry by entry, for every named parameter.
///
/// `f` receives one leaf per parameter, in order, and returns the root.
pub fn finite_diff_check<F>(f: F, params: &[(String, Tensor)], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[NodeId]) -> Result<NodeId>,
{
    if !(opts.step > 0.0) {
        return Err(Error::Param(format!("finite-difference step must be > 0, got {}", opts.step)));
    }
    let base: Vec<Tensor> = params.iter().map(|(_, t)| t.clone()).collect();
    let (tape, ids, root) = evaluate(&f, &base)?;
    let value = tape.value(root).item()?;
    let again = forward_value(&f, &base)?;
    if value.to_bits() != again.to_bits() {
        return Err(Error::Determinism {
            first: value,
            second: again,
        });
    }
    let grads = tape.backward(root)?;

    let mut reports = Vec::with_capacity(params.len());
    let mut overall = 0.0f64;
    for (p, (name, tensor)) in params.iter().enumerate() {
        let analytic = grads.get_or_zeros(ids[p], tensor.shape());
        let mut report = ParamReport {
            name: name.clone(),
            entries: tensor.len(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_index: 0,
        };
        let mut probe = base.clone();
        for idx in 0..tensor.len() {
            let x0 = tensor.data()[idx];
            probe[p] = tensor.with_entry(idx, x0 + opts.step);
            let plus = forward_value(&f, &probe)?;
            probe[p] = tensor.with_entry(idx, x0 - opts.step);
            let minus = forward_value(&f, &probe)?;
            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = analytic.data()[idx];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst_index = idx;
            }
        }
        probe[p] = tensor.clone();
        overall = overall.max(report.max_rel_error);
        reports.push(report);
    }
    Ok(GradCheckReport {
        step: opts.step,
        tol: opts.tol,
        value,
        max_rel_error: overall,
        passed: overall <= opts.tol,
        params: reports,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::cell::Cell;

    fn named(ts: &[Tensor]) -> Vec<(String, Tensor)> {
        ts.iter().enumerate().map(|(i, t)| (format!("p{i}"), t.clone())).collect()
    }

    #[test]
    fn sum_of_squares() {
        let x = Tensor::row_vector(&[1.0, 2.0]).unwrap();
        let report = finite_diff_check(
            |tape, ids| {
                let sq = tape.hadamard(ids[0], ids[0])?;
                tape.sum_all(sq)
            },
            &named(&[x]),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert!(report.max_rel_error < 1e-9, "{report:?}");
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let x = Tensor::row_vector(&[1.0, 2.0, 3.0]).unwrap();
        let report = finite_diff_check(
            |tape, _ids| Ok(tape.constant(Tensor::scalar(7.0)?)),
            &named(&[x]),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.passed);
        assert_eq!(report.max_rel_error, 0.0);
    }

    #[test]
    fn detects_nondeterminism() {
        let counter = Cell::new(0.0);
        let x = Tensor::row_vector(&[1.0]).unwrap();
        let err = finite_diff_check(
            |tape, ids| {
                counter.set(counter.get() + 1.0);
                let c = tape.constant(Tensor::scalar(counter.get())?);
                let s = tape.sum_all(ids[0])?;
                tape.add(s, c)
            },
            &named(&[x]),
            GradCheckOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Determinism { .. }));
    }

    #[test]
    fn catches_a_wrong_gradient() {
        // relu at exactly zero has a kink the central difference straddles.
        let x = Tensor::row_vector(&[0.0]).unwrap();
        let report = finite_diff_check(
            |tape, ids| {
                let r = tape.relu(ids[0])?;
                tape.sum_all(r)
            },
            &named(&[x]),
            GradCheckOptions::default(),
        )
        .unwrap();
        assert!(!report.passed);
    }
}
