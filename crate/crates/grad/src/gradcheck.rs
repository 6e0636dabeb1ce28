//! Central finite-difference oracle for checking tape gradients.
//!
//! The oracle only evaluates forward values, so it stays independent of the
//! backward rules it checks.

use crate::array::Array;
use crate::tape::{Tape, Var};

/// Outcome of a gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst_param: usize,
    pub worst_index: usize,
    pub checked: usize,
}

/// Relative error with a small absolute floor so exact zeros compare cleanly.
pub fn rel_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compares autodiff gradients of `build` against central differences with step `h`.
///
/// `build` receives the tape and one leaf per entry of `params` and must return a scalar.
pub fn check_gradients<F>(params: &[Array], h: f64, build: F) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Array]| -> f64 {
        let mut t = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| t.param(v.clone())).collect();
        let out = build(&mut t, &vars);
        t.value(out).data()[0]
    };
    let mut t = Tape::new();
    let vars: Vec<Var> = params.iter().map(|v| t.param(v.clone())).collect();
    let out = build(&mut t, &vars);
    let grads = t.backward(out).expect("scalar loss");
    let mut result = GradCheck {
        max_rel_error: 0.0,
        worst_param: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut work = params.to_vec();
    for (pi, v) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(*v, params[pi].len());
        for j in 0..params[pi].len() {
            let orig = work[pi].data()[j];
            work[pi].data_mut()[j] = orig + h;
            let plus = eval(&work);
            work[pi].data_mut()[j] = orig - h;
            let minus = eval(&work);
            work[pi].data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let e = rel_error(analytic[j], numeric);
            result.checked += 1;
            if e > result.max_rel_error {
                result.max_rel_error = e;
                result.worst_param = pi;
                result.worst_index = j;
            }
        }
    }
    result
}
