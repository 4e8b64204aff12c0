//! Central finite-difference gradient checking.
//!
//! The numeric side only ever evaluates the forward pass, so it stays an
//! independent oracle for every backward rule on the tape.

mod suite;

pub use suite::{check_backbone, check_ops, OpCheck};

use crate::autodiff::{Tape, Var};
use crate::tensor::{Result, Scalar, Tensor};

/// Denominator floor for relative errors: `|a - n| / max(|a|, |n|, floor)`.
/// Keeps exactly-zero gradients (e.g. conv biases ahead of batch norm) from
/// turning round-off noise into huge relative errors.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Worst disagreement found by a gradient check.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index, analytic, numeric)` of the worst element.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    /// Probes left out because `x +/- h` crossed a ReLU, clamp or pooling
    /// switch, where a central difference does not estimate the derivative.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn empty() -> Self {
        Self {
            max_rel_error: 0.0,
            worst: None,
            checked: 0,
            skipped: 0,
        }
    }

    pub fn merge(mut self, other: GradCheckReport) -> Self {
        if self.worst.is_none() || other.max_rel_error > self.max_rel_error {
            self.max_rel_error = other.max_rel_error;
            self.worst = other.worst;
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
        self
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }
}

/// Which elements of each input to probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Probe {
    All,
    /// At most this many evenly spaced elements per input.
    Strided(usize),
}

fn probe_indices(len: usize, probe: Probe) -> Vec<usize> {
    match probe {
        Probe::All => (0..len).collect(),
        Probe::Strided(k) if k >= len => (0..len).collect(),
        Probe::Strided(k) => (0..k).map(|i| i * len / k).collect(),
    }
}

/// Compares the tape gradient of `f` with central differences of step `h`.
///
/// `f` builds a scalar from the given leaf vars; it is replayed on a fresh
/// tape for every perturbation. A probe whose perturbed passes take a
/// different branch of any piecewise op than the unperturbed pass is counted
/// in `skipped` instead of being compared.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, probe: Probe, f: F) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<T>]| -> Result<(f64, Vec<usize>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok((tape.value(out).item().to_f64_lossy(), tape.branch_pattern()))
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|v| tape.param(v.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;
    let pattern = tape.branch_pattern();

    let mut report = GradCheckReport::empty();
    let mut work = inputs.to_vec();
    for (k, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("params require grad");
        for i in probe_indices(inputs[k].len(), probe) {
            let orig = inputs[k].data()[i];
            work[k].data_mut()[i] = orig + T::from_f64_lossy(h);
            let (plus, p_plus) = eval(&work)?;
            work[k].data_mut()[i] = orig - T::from_f64_lossy(h);
            let (minus, p_minus) = eval(&work)?;
            work[k].data_mut()[i] = orig;
            if p_plus != pattern || p_minus != pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus - minus) / (2.0 * h);
            let a = analytic.data()[i].to_f64_lossy();
            let err = rel_error(a, numeric);
            report.checked += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((k, i, a, numeric));
            }
        }
    }
    Ok(report)
}

/// Central-difference derivative of a scalar function of a flat vector.
pub fn numeric_gradient(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = work[i];
            work[i] = orig + h;
            let plus = f(&work);
            work[i] = orig - h;
            let minus = f(&work);
            work[i] = orig;
            (plus - minus) / (2.0 * h)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mul_gradient_matches_difference() {
        let a = Tensor::<f64>::from_f64([1], &[2.0]).unwrap();
        let b = Tensor::from_f64([1], &[3.0]).unwrap();
        let r = check(&[a, b], 1e-5, Probe::All, |t, v| {
            let p = t.mul(v[0], v[1])?;
            t.sum(p)
        })
        .unwrap();
        assert!(r.max_rel_error <= 1e-6, "{r:?}");
        let (_, _, analytic, _) = r.worst.unwrap();
        assert!(analytic == 3.0 || analytic == 2.0);
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(0.0, 0.0), 0.0);
        assert!(rel_error(0.0, 1e-12) < 1e-5);
        assert!((rel_error(1.0, 1.1) - 0.1 / 1.1).abs() < 1e-15);
    }

    #[test]
    fn strided_probe_covers_ends() {
        assert_eq!(probe_indices(10, Probe::Strided(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(probe_indices(3, Probe::Strided(5)), vec![0, 1, 2]);
    }
}
