//! Finite-difference gradient verification.

use crate::{Error, Result};

/// Compare an analytic gradient against central finite differences.
///
/// `f` evaluates a scalar function of a flat input vector and returns the
/// value together with the analytic gradient (the gradient is only used at
/// the unperturbed point). Returns the max over coordinates of
/// |analytic − central difference| / max(1, |analytic|).
pub fn grad_check<F>(f: F, x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Contract(format!("grad_check eps must be in [1e-6, 1e-3], got {eps}")));
    }
    let (_, analytic) = f(x)?;
    if analytic.len() != x.len() {
        return Err(Error::Contract(format!(
            "analytic gradient length {} != input length {}",
            analytic.len(),
            x.len()
        )));
    }
    let mut worst = 0.0f64;
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + eps;
        let (fp, _) = f(&xp)?;
        xp[i] = x[i] - eps;
        let (fm, _) = f(&xp)?;
        xp[i] = x[i];
        let fd = (fp - fm) / (2.0 * eps);
        let err = (analytic[i] - fd).abs() / analytic[i].abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
