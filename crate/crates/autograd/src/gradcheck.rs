//! Central finite-difference gradient checking in double precision.

use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of [`check_gradients`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked coordinates.
    pub max_rel_error: f64,
    /// `(input index, element index)` where the maximum occurred.
    pub worst: (usize, usize),
    pub checked: usize,
}

/// Relative error with a small absolute floor in the denominator so exact
/// zeros on both sides compare equal.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-8);
    (analytic - numeric).abs() / denom
}

/// Compare the tape gradient of the scalar `f(inputs)` with central
/// differences of step `step` for every element of every input.
///
/// `f` is called with one fresh tape per evaluation; all inputs are bound as
/// gradient-tracking leaves.
pub fn check_gradients<F>(inputs: &[Tensor<f64>], step: f64, f: F) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let analytic: Vec<Tensor<f64>> = {
        let tape = Tape::new();
        let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let loss = f(&tape, &vars);
        let grads = tape.backward(loss);
        vars.iter()
            .map(|&v| {
                grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(v.shape()))
            })
            .collect()
    };

    let eval = |perturbed: &[Tensor<f64>]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<_> = perturbed.iter().map(|t| tape.param(t.clone())).collect();
        f(&tape, &vars).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        checked: 0,
    };
    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            work[ti].data_mut()[ei] = orig + step;
            let plus = eval(&work);
            work[ti].data_mut()[ei] = orig - step;
            let minus = eval(&work);
            work[ti].data_mut()[ei] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[ti].data()[ei], numeric);
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = (ti, ei);
            }
            report.checked += 1;
        }
    }
    report
}
