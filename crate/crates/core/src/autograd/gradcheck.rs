//! Central finite-difference checking of analytic gradients.

use super::{DiffTensor, Tape};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Magnitudes below this are compared absolutely: relative error is taken
/// against `max(|analytic|, |numeric|, REL_ERR_FLOOR)`.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
    (analytic - numeric).abs() / denom
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// (input index, flat element index) of the worst entry.
    pub worst: Option<(usize, usize)>,
    pub checked: usize,
}

/// [`grad_check_with`] with `eps = 1e-5`, checking every element.
pub fn grad_check<F>(f: F, inputs: &[Tensor]) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[DiffTensor<'t>]) -> Result<DiffTensor<'t>>,
{
    grad_check_with(f, inputs, 1e-5, None)
}

/// Compares backward-pass gradients of the scalar `f(inputs)` with central
/// differences. `max_per_input` limits the check to an evenly strided subset
/// of each input's elements.
pub fn grad_check_with<F>(f: F, inputs: &[Tensor], eps: f64, max_per_input: Option<usize>) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &[DiffTensor<'t>]) -> Result<DiffTensor<'t>>,
{
    let analytic: Vec<Tensor> = {
        let tape = Tape::new();
        let leaves: Vec<DiffTensor<'_>> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&tape, &leaves)?;
        if !out.value().is_scalar() {
            return Err(invalid("grad_check needs a scalar-valued function"));
        }
        out.backward()?;
        leaves
            .iter()
            .map(|l| l.grad().unwrap_or_else(|| Tensor::zeros(l.shape())))
            .collect()
    };

    let eval = |values: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let leaves: Vec<DiffTensor<'_>> = values.iter().map(|t| tape.constant(t.clone())).collect();
        Ok(f(&tape, &leaves)?.item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        worst: None,
        checked: 0,
    };
    let mut values: Vec<Tensor> = inputs.to_vec();
    for (k, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let step = match max_per_input {
            Some(m) if m > 0 && n > m => n.div_ceil(m),
            _ => 1,
        };
        for i in (0..n).step_by(step) {
            let orig = input.data()[i];
            values[k].data_mut()[i] = orig + eps;
            let plus = eval(&values)?;
            values[k].data_mut()[i] = orig - eps;
            let minus = eval(&values)?;
            values[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].data()[i];
            let rel = relative_error(a, numeric);
            report.max_abs_error = report.max_abs_error.max((a - numeric).abs());
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some((k, i));
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
