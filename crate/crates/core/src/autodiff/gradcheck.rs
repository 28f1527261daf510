//! Central finite differences against reverse-mode gradients.
//!
//! The numeric side only ever evaluates forward values, so it shares no code
//! path with [`Tape::backward`].

use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-4;

/// Gradients smaller than this (in absolute value) are compared absolutely.
pub const DEFAULT_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(floor);
    (analytic - numeric).abs() / denom
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    /// (input index, flat entry index) of the worst entry.
    pub worst: (usize, usize),
    pub worst_analytic: f64,
    pub worst_numeric: f64,
    pub entries_checked: usize,
}

impl GradCheckReport {
    pub fn merge(self, other: GradCheckReport) -> GradCheckReport {
        let entries = self.entries_checked + other.entries_checked;
        let mut best = if other.max_relative_error > self.max_relative_error {
            other
        } else {
            self
        };
        best.entries_checked = entries;
        best
    }
}

/// Which entries of each input to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// At most this many evenly spaced entries per input tensor.
    Strided(usize),
}

fn entries(len: usize, coverage: Coverage) -> Vec<usize> {
    match coverage {
        Coverage::All => (0..len).collect(),
        Coverage::Strided(max) if len > max && max > 0 => {
            (0..max).map(|i| i * len / max).collect()
        }
        Coverage::Strided(_) => (0..len).collect(),
    }
}

/// Central-difference gradient of `f` at `inputs` for the selected entries.
/// Entries not selected are left at zero.
pub fn numeric_gradient<F>(
    f: &mut F,
    inputs: &[Tensor],
    step: f64,
    coverage: Coverage,
) -> Result<Vec<Tensor>>
where
    F: FnMut(&[Tensor]) -> Result<f64>,
{
    let mut work = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for t in 0..inputs.len() {
        let mut grad = Tensor::zeros(inputs[t].shape());
        for e in entries(inputs[t].len(), coverage) {
            let orig = work[t].data()[e];
            work[t].data_mut()[e] = orig + step;
            let plus = f(&work)?;
            work[t].data_mut()[e] = orig - step;
            let minus = f(&work)?;
            work[t].data_mut()[e] = orig;
            grad.data_mut()[e] = (plus - minus) / (2.0 * step);
        }
        out.push(grad);
    }
    Ok(out)
}

/// Builds `loss(tape, leaves)` once for the reverse-mode gradient, then
/// re-evaluates it forward-only under perturbations.
pub fn check_gradients<F>(
    mut loss: F,
    inputs: &[Tensor],
    step: f64,
    floor: f64,
    coverage: Coverage,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let l = loss(&mut tape, &leaves)?;
    tape.backward(l)?;
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| tape.grad_or_zeros(v)).collect();

    let mut eval = |xs: &[Tensor]| -> Result<f64> {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.leaf(x.clone())).collect();
        let out = loss(&mut t, &vs)?;
        let v = t.item(out);
        if !v.is_finite() {
            return Err(Error::NonFinite("loss during finite differencing".into()));
        }
        Ok(v)
    };
    let numeric = numeric_gradient(&mut eval, inputs, step, coverage)?;

    let mut report = GradCheckReport {
        max_relative_error: 0.0,
        worst: (0, 0),
        worst_analytic: 0.0,
        worst_numeric: 0.0,
        entries_checked: 0,
    };
    for (t, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        for e in entries(a.len(), coverage) {
            let (av, nv) = (a.data()[e], n.data()[e]);
            let r = relative_error(av, nv, floor);
            report.entries_checked += 1;
            if r > report.max_relative_error {
                report.max_relative_error = r;
                report.worst = (t, e);
                report.worst_analytic = av;
                report.worst_numeric = nv;
            }
        }
    }
    Ok(report)
}
