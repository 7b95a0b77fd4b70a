//! Central finite-difference checking of tape gradients.

use crate::error::{shape_err, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOL: f64 = 1e-4;

/// Outcome of one gradient check; `worst_*` describe the element with the
/// largest relative error.
#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub passed: bool,
    pub checked: usize,
    pub worst_index: usize,
    pub worst_rel_err: f64,
    pub analytic: f64,
    pub numeric: f64,
}

impl FdReport {
    fn merge(self, other: FdReport) -> FdReport {
        let checked = self.checked + other.checked;
        let passed = self.passed && other.passed;
        let mut out = if other.worst_rel_err > self.worst_rel_err { other } else { self };
        out.checked = checked;
        out.passed = passed;
        out
    }
}

/// `max(|g|, |fd|, 1e-8)`-normalized difference.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval_scalar<F>(f: &F, x: &Tensor) -> Result<f64>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x);
    let out = f(&tape, xv)?;
    if tape.shape(out).iter().product::<usize>() != 1 {
        return Err(shape_err("fd_check", format!("function must return a scalar, got {:?}", tape.shape(out))));
    }
    Ok(tape.scalar(out))
}

/// Compares the tape gradient of `f` at `x` against central differences
/// `(f(x + h e_i) - f(x - h e_i)) / 2h`, element by element.
pub fn fd_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&Tape, Var) -> Result<Var>,
{
    let tracked = x.clone().with_requires_grad(true);
    let tape = Tape::new();
    let xv = tape.leaf(&tracked);
    let out = f(&tape, xv)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<f64> = grads.get(xv).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; x.len()]);

    let mut report = FdReport {
        passed: true,
        checked: 0,
        worst_index: 0,
        worst_rel_err: 0.0,
        analytic: analytic[0],
        numeric: f64::NAN,
    };
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval_scalar(&f, &probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic[i], numeric);
        if i == 0 || err > report.worst_rel_err || err.is_nan() {
            report.worst_index = i;
            report.worst_rel_err = err;
            report.analytic = analytic[i];
            report.numeric = numeric;
        }
        if !(err <= tol) {
            report.passed = false;
        }
        report.checked += 1;
    }
    Ok(report)
}

/// Checks every tensor of a parameter list; `f` receives one var per tensor.
/// Returns one report per tensor, in order.
pub fn fd_check_all<F>(tensors: &[Tensor], f: F, h: f64, tol: f64) -> Result<Vec<FdReport>>
where
    F: Fn(&Tape, &[Var]) -> Result<Var>,
{
    let mut reports = Vec::with_capacity(tensors.len());
    for (j, target) in tensors.iter().enumerate() {
        let report = fd_check(
            |tape, xv| {
                let vars: Vec<Var> = tensors
                    .iter()
                    .enumerate()
                    .map(|(i, t)| if i == j { xv } else { tape.leaf(t) })
                    .collect();
                f(tape, &vars)
            },
            target,
            h,
            tol,
        )?;
        reports.push(report);
    }
    Ok(reports)
}

/// Folds per-tensor reports into one.
pub fn summarize(reports: Vec<FdReport>) -> Option<FdReport> {
    reports.into_iter().reduce(FdReport::merge)
}
