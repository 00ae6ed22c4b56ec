//! Central-difference verification of reverse-mode gradients.
//!
//! For each checked coordinate `i` the numeric slope is
//! `(f(x + h e_i) - f(x - h e_i)) / 2h` and the error against the analytic
//! value `a` is `|a - n| / max(|a|, |n|, floor)`.
//!
//! Piecewise-smooth functions (ReLU, max, hinge) have measure-zero kinks where
//! neither side is meaningful. With `skip_kinks` the checker also evaluates
//! `f(x)` and skips coordinates whose one-sided slopes disagree by more than
//! `kink_tol`; the number of skipped coordinates is reported.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Flat indices to check; `None` checks every coordinate.
    pub coords: Option<Vec<usize>>,
    pub skip_kinks: bool,
    /// One-sided slope disagreement (relative to `max(1, |slope|)`) treated as a kink.
    pub kink_tol: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: DEFAULT_STEP,
            floor: 1e-6,
            coords: None,
            skip_kinks: false,
            kink_tol: 1e-2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// Flat index with the largest relative error.
    pub worst: Option<usize>,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: &GradCheckReport) {
        if other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.max_abs_error = self.max_abs_error.max(other.max_abs_error);
        self.checked += other.checked;
        self.skipped_kinks += other.skipped_kinks;
    }
}

fn finite(what: impl FnOnce() -> String, v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite { what: what() })
    }
}

/// Compares an analytic gradient with central differences of `eval` around `point`.
pub fn compare_with_numeric(
    eval: impl Fn(&Tensor) -> Result<f64>,
    point: &Tensor,
    analytic: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if analytic.shape() != point.shape() {
        return Err(Error::shape(
            "check_gradients",
            format!("gradient {:?} vs point {:?}", analytic.shape(), point.shape()),
        ));
    }
    let h = opts.step;
    let all: Vec<usize>;
    let coords = match &opts.coords {
        Some(c) => c.as_slice(),
        None => {
            all = (0..point.len()).collect();
            &all
        }
    };
    let center = if opts.skip_kinks {
        Some(finite(|| "function value at the base point".into(), eval(point)?)?)
    } else {
        None
    };
    let mut report = GradCheckReport::default();
    let mut probe = point.clone();
    for &i in coords {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + h;
        let fp = finite(|| format!("function value at coordinate {i} + step"), eval(&probe)?)?;
        probe.data_mut()[i] = x0 - h;
        let fm = finite(|| format!("function value at coordinate {i} - step"), eval(&probe)?)?;
        probe.data_mut()[i] = x0;
        if let Some(f0) = center {
            let (right, left) = ((fp - f0) / h, (f0 - fm) / h);
            let scale = 1f64.max(right.abs()).max(left.abs());
            if (right - left).abs() > opts.kink_tol * scale {
                report.skipped_kinks += 1;
                continue;
            }
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(opts.floor);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some(i);
        }
    }
    Ok(report)
}

/// Evaluates `f` on a fresh tape with `point` as its only differentiable leaf.
pub fn value_and_grad(
    f: &impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let y = f(&mut tape, x)?;
    let value = finite(|| "function value".into(), tape.value(y).item())?;
    let mut grads = tape.backward(y)?;
    let g = grads
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape().to_vec()));
    Ok((value, g))
}

/// Maximum relative error between reverse-mode and central-difference gradients
/// of a scalar function built on a tape.
pub fn check_gradients(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    step: f64,
) -> Result<GradCheckReport> {
    let opts = GradCheckOptions {
        step,
        ..GradCheckOptions::default()
    };
    check_gradients_with(f, point, &opts)
}

pub fn check_gradients_with(
    f: impl Fn(&mut Tape, Var) -> Result<Var>,
    point: &Tensor,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let (_, analytic) = value_and_grad(&f, point)?;
    let eval = |p: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(p.clone());
        let y = f(&mut tape, x)?;
        Ok(tape.value(y).item())
    };
    compare_with_numeric(eval, point, &analytic, opts)
}
