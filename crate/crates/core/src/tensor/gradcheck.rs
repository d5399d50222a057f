use super::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Worst coordinate found by [`grad_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Which input tensor and flat coordinate produced the maximum.
    pub worst_input: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` receives a fresh tape with every input registered as a trainable leaf,
/// in order, and must return a scalar. It is re-run on perturbed copies of the
/// inputs for the numeric side, so it should not depend on external state.
pub fn grad_check<F>(f: F, inputs: &[Tensor], step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    grad_check_scaled(f, inputs, step, 1.0)
}

/// Like [`grad_check`], but expects the analytic gradient to equal
/// `factor` times the numeric one. Used for ops whose backward rule
/// deliberately differs from the derivative of their forward pass.
pub fn grad_check_scaled<F>(f: F, inputs: &[Tensor], step: f64, factor: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::invalid(format!("step must be positive, got {step}")));
    }
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        tape.value(out).item()
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut probe: Vec<Tensor> = inputs.to_vec();
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*var, inputs[which].shape());
        for idx in 0..inputs[which].data().len() {
            let orig = inputs[which].data()[idx];
            probe[which].data_mut()[idx] = orig + step;
            let up = eval(&probe)?;
            probe[which].data_mut()[idx] = orig - step;
            let down = eval(&probe)?;
            probe[which].data_mut()[idx] = orig;
            let numeric = factor * (up - down) / (2.0 * step);
            let a = analytic.data()[idx];
            let err = relative_error(a, numeric);
            if err > report.max_rel_error || !err.is_finite() {
                report = GradCheckReport {
                    max_rel_error: err,
                    worst_input: which,
                    worst_index: idx,
                    analytic: a,
                    numeric,
                };
            }
        }
    }
    Ok(report)
}
