//! Central-difference verification of tape gradients.

use alloc::string::String;

use super::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Step is `1e-5 · (|x| + 1)` per coordinate.
pub const BASE_STEP: f64 = 1e-5;

/// Relative errors are taken against `max(|analytic|, |numeric|, REL_FLOOR)`
/// so that coordinates with vanishing gradient are compared absolutely.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coordinates: usize,
    pub rel_tol: f64,
    pub passed: bool,
}

fn eval(store: &ParamStore, f: &impl Fn(&mut Tape, &ParamStore) -> Result<Var>) -> Result<f64> {
    let mut tape = Tape::new().with_finite_checks(true);
    let out = f(&mut tape, store)?;
    tape.check()?;
    if tape.value(out).len() != 1 {
        return Err(Error::shape("finite_diff_check", "function must return a scalar"));
    }
    let v = tape.scalar(out);
    if !v.is_finite() {
        return Err(Error::NonFinite { op: "output", node: out.index() });
    }
    Ok(v)
}

/// Compares reverse-mode gradients of `f` with central differences for every
/// coordinate of every trainable parameter in `store`.
pub fn check_gradients(
    store: &ParamStore,
    f: impl Fn(&mut Tape, &ParamStore) -> Result<Var>,
    rel_tol: f64,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new().with_finite_checks(true);
    let out = f(&mut tape, store)?;
    let grads = tape.backward(out)?;

    let mut probe = store.clone();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst: None, coordinates: 0, rel_tol, passed: true };
    for (id, param) in store.iter() {
        if !param.trainable {
            continue;
        }
        let analytic = grads.param(id);
        for j in 0..param.value.len() {
            if param.zero_rows.contains(&(j / param.value.cols())) {
                continue;
            }
            let x = param.value.data()[j];
            let h = BASE_STEP * (x.abs() + 1.0);
            probe.get_mut(id).value.data_mut()[j] = x + h;
            let up = eval(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[j] = x - h;
            let down = eval(&probe, &f)?;
            probe.get_mut(id).value.data_mut()[j] = x;

            let numeric = (up - down) / (2.0 * h);
            let a = analytic.map_or(0.0, |g| g[j]);
            let denom = a.abs().max(numeric.abs()).max(REL_FLOOR);
            let err = (a - numeric).abs() / denom;
            report.coordinates += 1;
            if err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((param.name.clone(), j));
            }
        }
    }
    report.passed = report.max_rel_error <= rel_tol;
    Ok(report)
}

/// Single-tensor form: `f` receives `point` as a differentiable node.
pub fn finite_diff_check(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    rel_tol: f64,
) -> Result<GradCheckReport> {
    let mut store = ParamStore::new();
    store.add("x", point.clone());
    check_gradients(
        &store,
        |tape, s| {
            let x = tape.param(s, ParamId(0));
            f(tape, x)
        },
        rel_tol,
    )
}
