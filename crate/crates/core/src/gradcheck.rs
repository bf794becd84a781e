//! Central finite-difference gradient checking.
//!
//! The check only ever evaluates the forward function; analytic gradients
//! come from one `Tape::backward` call, numeric ones from perturbing each
//! input element by `±step`.

use crate::error::Result;
use crate::tensor::{Tape, Tensor, Var};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a floor on the denominator so that pairs of
/// near-zero gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Compares analytic and central-difference gradients of the scalar `f`
/// with respect to every element of every tensor in `inputs`.
///
/// `f` must be deterministic: it is called once on a tracked tape and
/// `2 · Σ len(inputs)` times on untracked tapes.
pub fn check_gradients<F>(inputs: &[Tensor], step: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let tape = Tape::new();
    let vars = inputs
        .iter()
        .map(|t| tape.var(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |perturbed: &[Tensor]| -> Result<f64> {
        let tape = Tape::new();
        let vars = perturbed
            .iter()
            .map(|t| tape.constant(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        let out = f(&tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, v) in vars.iter().enumerate() {
        let zero = Tensor::zeros(inputs[i].shape());
        let analytic = grads.get(*v).unwrap_or(&zero).clone();
        for e in 0..inputs[i].len() {
            let orig = inputs[i].data()[e];
            work[i].data_mut()[e] = orig + step;
            let plus = eval(&work)?;
            work[i].data_mut()[e] = orig - step;
            let minus = eval(&work)?;
            work[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic.data()[e], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

/// Reduces any tensor to a scalar through fixed random weights so that
/// every output element contributes to the checked gradient.
pub fn project(tape: &Tape, out: Var, weights: &Tensor) -> Result<Var> {
    let w = tape.constant(weights.clone())?;
    tape.sum(tape.mul(out, w)?)
}
