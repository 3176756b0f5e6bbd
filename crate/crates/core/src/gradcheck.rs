//! Central finite-difference validation of tape gradients.

use crate::autodiff::{Tape, Var};
use crate::params::{Bound, ParamSet};

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is zero are judged by their absolute error.
pub const REL_FLOOR: f64 = 1e-6;

/// Per-parameter outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub coordinates: usize,
}

/// Compares tape gradients of `f` against central differences over every
/// coordinate of every parameter, returning the maximum relative error.
pub fn check_gradient<F>(f: F, params: &ParamSet, h: f64) -> f64
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    check_gradient_sampled(f, params, h, usize::MAX).max_rel_error
}

/// Like [`check_gradient`] but probes at most `per_param` evenly strided
/// coordinates of each parameter.
pub fn check_gradient_sampled<F>(f: F, params: &ParamSet, h: f64, per_param: usize) -> GradCheckReport
where
    F: for<'t> Fn(&'t Tape, &Bound<'t>) -> Var<'t>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    let analytic = {
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = f(&tape, &bound);
        bound.grads(&tape.backward(loss))
    };
    let eval = |p: &ParamSet| -> f64 {
        let tape = Tape::new();
        let bound = p.bind_frozen(&tape);
        f(&tape, &bound).item()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut probe = params.clone();
    let names: Vec<String> = params.names().cloned().collect();
    for name in names {
        let len = params.tensor(&name).len();
        let step = (len / per_param.min(len).max(1)).max(1);
        for idx in (0..len).step_by(step).take(per_param) {
            let orig = params.tensor(&name).data()[idx];
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig + h;
            let up = eval(&probe);
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig - h;
            let down = eval(&probe);
            probe.get_mut(&name).unwrap().data_mut()[idx] = orig;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.get(&name).map_or(0.0, |t| t.data()[idx]);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
            report.coordinates += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((name.clone(), idx, a, numeric));
            }
        }
    }
    report
}
