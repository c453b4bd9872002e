//! Robust mean/covariance estimation (minimum covariance determinant),
//! Mahalanobis distance, and covariance-conditioning penalties.
//!
//! The MCD search is the FAST-MCD recipe: random elemental subsets expanded
//! to size h, refined by C-steps (recompute mean/covariance on the subset,
//! reselect the h points with smallest Mahalanobis distance) until the
//! subset is stable. The covariance is always regularized with epsilon·I, so
//! degenerate subsets stay factorable.

pub mod linalg;

use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Robust location/scatter estimate over a feature batch.
#[derive(Debug, Clone)]
pub struct RobustEstimate {
    /// Feature dimension s.
    pub dim: usize,
    /// Robust mean, length s.
    pub mu: Vec<f64>,
    /// Regularized covariance (subset covariance + epsilon·I), s×s row-major.
    pub sigma: Vec<f64>,
    /// Lower Cholesky factor of `sigma`.
    pub chol: Vec<f64>,
    /// Indices of the h selected samples.
    pub subset: Vec<usize>,
    /// det(sigma).
    pub determinant: f64,
    /// Regularization used to form `sigma`.
    pub epsilon: f64,
}

impl RobustEstimate {
    fn from_subset(features: &[f64], n: usize, s: usize, subset: Vec<usize>, epsilon: f64) -> Result<Self> {
        debug_assert!(subset.iter().all(|&r| r < n));
        let (mu, mut sigma) = linalg::mean_cov(features, s, &subset);
        for i in 0..s {
            sigma[i * s + i] += epsilon;
        }
        let chol = linalg::cholesky(&sigma, s)?;
        let determinant = linalg::chol_log_det(&chol, s).exp();
        Ok(RobustEstimate { dim: s, mu, sigma, chol, subset, determinant, epsilon })
    }

    /// Rebuild an estimate from stored (already regularized) statistics.
    pub fn from_parts(mu: Vec<f64>, sigma: Vec<f64>, epsilon: f64) -> Result<Self> {
        let s = mu.len();
        if sigma.len() != s * s {
            return Err(Error::Dimension(format!(
                "sigma has {} values, expected {}×{} = {}",
                sigma.len(),
                s,
                s,
                s * s
            )));
        }
        let chol = linalg::cholesky(&sigma, s)?;
        let determinant = linalg::chol_log_det(&chol, s).exp();
        Ok(RobustEstimate { dim: s, mu, sigma, chol, subset: Vec::new(), determinant, epsilon })
    }

    /// Identity-covariance estimate centered at `mu` (euclidean mode).
    pub fn identity(mu: Vec<f64>) -> Self {
        let s = mu.len();
        let mut sigma = vec![0.0; s * s];
        let mut chol = vec![0.0; s * s];
        for i in 0..s {
            sigma[i * s + i] = 1.0;
            chol[i * s + i] = 1.0;
        }
        RobustEstimate { dim: s, mu, sigma, chol, subset: Vec::new(), determinant: 1.0, epsilon: 0.0 }
    }
}

/// Mahalanobis distance sqrt((z−mu)ᵀ Σ⁻¹ (z−mu)), via triangular solves.
pub fn mahalanobis(z: &[f64], est: &RobustEstimate) -> f64 {
    linalg::mahalanobis_sq(&est.chol, est.dim, z, &est.mu).sqrt()
}

fn check_mcd_args(n: usize, s: usize, h: usize, epsilon: f64) -> Result<()> {
    if s < 1 || n <= s + 1 {
        return Err(Error::Contract(format!(
            "mcd needs N > s + 1 (got N = {n}, s = {s})"
        )));
    }
    if h <= s || h >= n {
        return Err(Error::Contract(format!(
            "mcd subset size h must satisfy s < h < N (got h = {h}, s = {s}, N = {n})"
        )));
    }
    if epsilon <= 0.0 {
        return Err(Error::Contract(format!("epsilon must be positive (got {epsilon})")));
    }
    Ok(())
}

/// log det of the regularized covariance of `subset`.
fn subset_log_det(features: &[f64], s: usize, subset: &[usize], epsilon: f64) -> Result<f64> {
    let (_, mut sigma) = linalg::mean_cov(features, s, subset);
    for i in 0..s {
        sigma[i * s + i] += epsilon;
    }
    let chol = linalg::cholesky(&sigma, s)?;
    Ok(linalg::chol_log_det(&chol, s))
}

/// One C-step: estimate (mu, Σ+εI) on `subset`, then reselect the h samples
/// with smallest Mahalanobis distance. Returns the new subset (sorted) and
/// the log-determinant of the covariance the step was taken from.
pub fn c_step(
    features: &[f64],
    n: usize,
    s: usize,
    subset: &[usize],
    h: usize,
    epsilon: f64,
) -> Result<(Vec<usize>, f64)> {
    let (mu, mut sigma) = linalg::mean_cov(features, s, subset);
    for i in 0..s {
        sigma[i * s + i] += epsilon;
    }
    let chol = linalg::cholesky(&sigma, s)?;
    let log_det = linalg::chol_log_det(&chol, s);
    let mut order: Vec<usize> = (0..n).collect();
    let d2: Vec<f64> = (0..n)
        .map(|r| linalg::mahalanobis_sq(&chol, s, &features[r * s..(r + 1) * s], &mu))
        .collect();
    order.sort_by(|&a, &b| d2[a].partial_cmp(&d2[b]).unwrap().then(a.cmp(&b)));
    let mut new_subset: Vec<usize> = order[..h].to_vec();
    new_subset.sort_unstable();
    Ok((new_subset, log_det))
}

fn binomial(n: usize, k: usize) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)?;
        acc /= (i + 1) as u128;
    }
    Some(acc)
}

/// FAST-MCD style robust estimate.
///
/// `restarts` random elemental seeds are expanded to size h and refined by
/// C-steps until stable (at most 50 iterations each); the subset with the
/// smallest covariance determinant wins. When `restarts` covers the full
/// C(N, h) subset count (and that count is small), the search switches to
/// exhaustive enumeration so the optimum is exact.
pub fn mcd_estimate(
    features: &[f64],
    n: usize,
    s: usize,
    h: usize,
    epsilon: f64,
    restarts: usize,
    seed: u64,
) -> Result<RobustEstimate> {
    check_mcd_args(n, s, h, epsilon)?;
    assert_eq!(features.len(), n * s, "features buffer must be N×s");

    if let Some(total) = binomial(n, h) {
        if total <= restarts as u128 && total <= 50_000 {
            return mcd_brute_force(features, n, s, h, epsilon);
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seed_size = (s + 2).min(h);
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut indices: Vec<usize> = (0..n).collect();
    for _ in 0..restarts.max(1) {
        indices.shuffle(&mut rng);
        let mut elemental: Vec<usize> = indices[..seed_size].to_vec();
        elemental.sort_unstable();
        // expand the elemental subset to size h with one selection pass
        let (mut subset, _) = c_step(features, n, s, &elemental, h, epsilon)?;
        for _ in 0..50 {
            let (next, _) = c_step(features, n, s, &subset, h, epsilon)?;
            if next == subset {
                break;
            }
            subset = next;
        }
        let log_det = subset_log_det(features, s, &subset, epsilon)?;
        let better = match &best {
            None => true,
            Some((best_ld, best_subset)) => {
                log_det < best_ld - 1e-12 || (log_det <= best_ld + 1e-12 && subset < *best_subset)
            }
        };
        if better {
            best = Some((log_det, subset));
        }
    }
    let (_, subset) = best.expect("at least one restart");
    RobustEstimate::from_subset(features, n, s, subset, epsilon)
}

/// Exact MCD by exhaustive enumeration of all size-h subsets.
/// Test oracle for `mcd_estimate`; bounded to C(N, h) <= 50,000.
pub fn mcd_brute_force(features: &[f64], n: usize, s: usize, h: usize, epsilon: f64) -> Result<RobustEstimate> {
    check_mcd_args(n, s, h, epsilon)?;
    match binomial(n, h) {
        Some(total) if total <= 50_000 => {}
        _ => {
            return Err(Error::Contract(format!(
                "mcd_brute_force requires C(N, h) <= 50,000 (N = {n}, h = {h})"
            )))
        }
    }
    let mut subset: Vec<usize> = (0..h).collect();
    let mut best: Option<(f64, Vec<usize>)> = None;
    loop {
        let log_det = subset_log_det(features, s, &subset, epsilon)?;
        let better = match &best {
            None => true,
            Some((best_ld, _)) => log_det < best_ld - 0.0,
        };
        if better {
            best = Some((log_det, subset.clone()));
        }
        // next combination in lexicographic order
        let mut i = h;
        loop {
            if i == 0 {
                let (_, subset) = best.unwrap();
                return RobustEstimate::from_subset(features, n, s, subset, epsilon);
            }
            i -= 1;
            if subset[i] != i + n - h {
                subset[i] += 1;
                for j in (i + 1)..h {
                    subset[j] = subset[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// Extremal eigenvalues and eigenvectors of a symmetric matrix.
pub fn eigen_extremes(sigma: &[f64], s: usize) -> Result<(f64, f64, Vec<f64>, Vec<f64>)> {
    let (vals, vecs) = linalg::jacobi_eigen(sigma, s)?;
    let min_v = vecs.first().cloned().unwrap();
    let max_v = vecs.last().cloned().unwrap();
    Ok((vals[0], vals[s - 1], min_v, max_v))
}

/// Conditioning penalty Σᵢ 1/(σᵢᵢ + ε) + λ_max/(λ_min + ε).
pub fn covariance_penalty(sigma: &[f64], s: usize, epsilon: f64) -> Result<f64> {
    let (lmin, lmax, _, _) = eigen_extremes(sigma, s)?;
    let diag_term: f64 = (0..s).map(|i| 1.0 / (sigma[i * s + i] + epsilon)).sum();
    Ok(diag_term + lmax / (lmin + epsilon))
}
