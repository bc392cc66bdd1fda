//! Central finite-difference gradient checking.
//!
//! An operation under test is scalarised by the caller (usually as
//! `Σ out ⊙ R` for a fixed random `R`) and exposed as a closure over flat
//! parameter vectors. Every element of every parameter is perturbed by
//! `±step` and the resulting difference quotient compared with the analytic
//! gradient. Errors are relative in the 2-norm,
//! `‖a − n‖ / (‖a‖ + ‖n‖)`, per parameter.

use serde::Serialize;

use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const LAYER_TOLERANCE: f64 = 1e-6;
pub const END_TO_END_TOLERANCE: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_error: f64,
    pub per_param: Vec<(String, f64)>,
    pub tolerance: f64,
    pub pass: bool,
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} {:<24} max_rel_err={:.3e} tol={:.0e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.op,
            self.max_rel_error,
            self.tolerance
        )?;
        for (name, e) in &self.per_param {
            write!(f, " {name}={e:.2e}")?;
        }
        Ok(())
    }
}

/// One named parameter vector under test with its analytic gradient.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub values: Vec<f64>,
    pub analytic: Vec<f64>,
}

impl Probe {
    pub fn new(name: impl Into<String>, values: Vec<f64>, analytic: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            values,
            analytic,
        }
    }

    pub fn tensor(name: impl Into<String>, values: &Tensor, analytic: &Tensor) -> Self {
        Self::new(name, values.data().to_vec(), analytic.data().to_vec())
    }
}

fn rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    if analytic.len() != numeric.len() {
        return f64::INFINITY;
    }
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (a, n) in analytic.iter().zip(numeric) {
        if !a.is_finite() || !n.is_finite() {
            return f64::INFINITY;
        }
        diff += (a - n) * (a - n);
        na += a * a;
        nn += n * n;
    }
    let denom = na.sqrt() + nn.sqrt();
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Central differences of `loss` with respect to every element of every probe.
pub fn numeric_gradients<F>(probes: &[Probe], step: f64, mut loss: F) -> Vec<Vec<f64>>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut current: Vec<Vec<f64>> = probes.iter().map(|p| p.values.clone()).collect();
    let mut out = Vec::with_capacity(probes.len());
    for pi in 0..probes.len() {
        let mut grad = Vec::with_capacity(current[pi].len());
        for i in 0..current[pi].len() {
            let orig = current[pi][i];
            current[pi][i] = orig + step;
            let plus = loss(&current);
            current[pi][i] = orig - step;
            let minus = loss(&current);
            current[pi][i] = orig;
            grad.push((plus - minus) / (2.0 * step));
        }
        out.push(grad);
    }
    out
}

pub fn grad_check<F>(op: &str, probes: &[Probe], tolerance: f64, loss: F) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    grad_check_with_step(op, probes, tolerance, DEFAULT_STEP, loss)
}

pub fn grad_check_with_step<F>(op: &str, probes: &[Probe], tolerance: f64, step: f64, loss: F) -> GradCheckReport
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let numeric = numeric_gradients(probes, step, loss);
    let per_param: Vec<(String, f64)> = probes
        .iter()
        .zip(&numeric)
        .map(|(p, n)| (p.name.clone(), rel_error(&p.analytic, n)))
        .collect();
    let max_rel_error = per_param.iter().map(|(_, e)| *e).fold(0.0, f64::max);
    let max_rel_error = if per_param.iter().any(|(_, e)| e.is_nan()) {
        f64::INFINITY
    } else {
        max_rel_error
    };
    GradCheckReport {
        op: op.to_string(),
        pass: max_rel_error < tolerance,
        max_rel_error,
        per_param,
        tolerance,
    }
}

/// One-sided slopes that disagree by more than this fraction of the local
/// gradient scale mark a kink inside the difference window.
pub const KINK_RATIO: f64 = 1e-3;

/// Coordinates where `loss` is not smooth on `[x − step, x + step]`, as
/// `(probe name, element index)`.
///
/// Central differences across a ReLU or max switch measure an average of two
/// slopes, so they are no reference for the analytic gradient there. The
/// test compares the two one-sided slopes at each coordinate: for a smooth
/// loss they differ by `O(step)`, across a kink by the jump in slope.
pub fn kinks<F>(probes: &[Probe], step: f64, mut loss: F) -> Vec<(String, usize)>
where
    F: FnMut(&[Vec<f64>]) -> f64,
{
    let mut current: Vec<Vec<f64>> = probes.iter().map(|p| p.values.clone()).collect();
    let f0 = loss(&current);
    let mut slopes = Vec::new();
    for pi in 0..probes.len() {
        for i in 0..current[pi].len() {
            let orig = current[pi][i];
            current[pi][i] = orig + step;
            let plus = (loss(&current) - f0) / step;
            current[pi][i] = orig - step;
            let minus = (f0 - loss(&current)) / step;
            current[pi][i] = orig;
            slopes.push((pi, i, plus, minus));
        }
    }
    let n = slopes.len().max(1) as f64;
    let rms = (slopes.iter().map(|s| 0.25 * (s.2 + s.3).powi(2)).sum::<f64>() / n).sqrt();
    slopes
        .into_iter()
        .filter(|&(_, _, p, m)| (p - m).abs() > KINK_RATIO * p.abs().max(m.abs()).max(rms))
        .map(|(pi, i, _, _)| (probes[pi].name.clone(), i))
        .collect()
}

/// `Σ out ⊙ weights`, the usual scalarisation for checking tensor-valued ops.
pub fn project(out: &Tensor, weights: &Tensor) -> f64 {
    debug_assert_eq!(out.shape(), weights.shape());
    out.dot(weights)
}
