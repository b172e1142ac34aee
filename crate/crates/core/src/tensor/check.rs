//! Central finite-difference gradient checker.

use crate::error::{Error, Result};

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone, Default)]
pub struct FdReport {
    /// Largest relative error over the checked coordinates.
    pub max_rel_err: f64,
    /// Coordinate index attaining `max_rel_err`.
    pub worst_coord: usize,
    pub checked: usize,
    /// Coordinates skipped because the two perturbed evaluations straddle
    /// an activation kink (their kink signatures differ).
    pub skipped: usize,
}

/// Compare `analytic` against central finite differences of `f` at
/// `theta`. `f` maps a flat real parameter vector to the scalar loss and
/// a kink signature; coordinates whose `±step` evaluations produce
/// different signatures are skipped (subgradient mismatch at a kink is
/// expected, not a bug).
///
/// The relative error per coordinate is
/// `|a - fd| / max(|a|, |fd|, 1e-2)`, i.e. a true relative error for
/// gradients of ordinary magnitude and an absolute tolerance of
/// `1e-2 · tol` for near-zero ones, which keeps finite-difference
/// round-off noise out of the verdict.
pub fn finite_diff_check<F>(mut f: F, theta: &[f64], step: f64, analytic: &[f64]) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> (f64, Vec<u8>),
{
    if step <= 0.0 {
        return Err(Error::contract(format!("finite_diff_check: step must be positive, got {step}")));
    }
    if analytic.len() != theta.len() {
        return Err(Error::contract(format!(
            "finite_diff_check: {} analytic entries for {} parameters",
            analytic.len(),
            theta.len()
        )));
    }
    let mut report = FdReport::default();
    let mut work = theta.to_vec();
    for i in 0..theta.len() {
        work[i] = theta[i] + step;
        let (lp, sig_p) = f(&work);
        work[i] = theta[i] - step;
        let (lm, sig_m) = f(&work);
        work[i] = theta[i];
        if sig_p != sig_m {
            report.skipped += 1;
            continue;
        }
        let fd = (lp - lm) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(fd.abs()).max(1e-2);
        let rel = (a - fd).abs() / denom;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_coord = i;
        }
        report.checked += 1;
    }
    Ok(report)
}
