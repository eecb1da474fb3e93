//! Central finite-difference verification of tape gradients.

use crate::error::Result;

use super::{Tape, Tensor, Var};

/// Denominator floor for the relative error, so that gradients that are
/// zero up to rounding do not produce spurious failures.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

/// Worst disagreement found for one input tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct InputReport {
    pub input: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub per_input: Vec<InputReport>,
    pub elements_checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares reverse-mode gradients of `f` at `inputs` against central
/// differences with step `h`. Every element of every input is perturbed.
///
/// `f` builds a scalar loss from one leaf per input tensor.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.input(t.clone())).collect();
    let loss = f(&mut tape, &leaves);
    let analytic = tape.grads_of(loss, &leaves)?;

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let mut tape = Tape::new();
        let leaves: Vec<Var> = perturbed.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &leaves);
        tape.value(loss).item()
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut per_input = Vec::with_capacity(inputs.len());
    let mut total = 0;
    for (i, grad) in analytic.iter().enumerate() {
        let mut rep = InputReport {
            input: i,
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for j in 0..inputs[i].len() {
            let orig = inputs[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let up = eval(&work);
            work[i].data_mut()[j] = orig - h;
            let down = eval(&work);
            work[i].data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let a = grad.data()[j];
            let err = relative_error(a, numeric);
            if err > rep.max_rel_error || err.is_nan() {
                rep.max_rel_error = err;
                rep.worst_index = j;
                rep.analytic = a;
                rep.numeric = numeric;
            }
            total += 1;
        }
        per_input.push(rep);
    }
    let max_rel_error = per_input
        .iter()
        .map(|r| r.max_rel_error)
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::NAN } else { a.max(b) });
    Ok(GradCheckReport {
        max_rel_error,
        per_input,
        elements_checked: total,
    })
}
