//! Small dense symmetric linear algebra on row-major `&[f64]` buffers.
//!
//! Everything here targets the latent dimension (s <= 64), so the
//! implementations favor exactness and determinism over asymptotics.

use crate::{Error, Result};

/// Cholesky factorization A = L·Lᵀ, returning the lower factor row-major.
/// Fails if the matrix is not (numerically) positive definite.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>> {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for k in 0..j {
                sum -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if sum <= 0.0 {
                    return Err(Error::Numerical(format!(
                        "cholesky failed at pivot {i}: {sum} <= 0"
                    )));
                }
                l[i * n + i] = sum.sqrt();
            } else {
                l[i * n + j] = sum / l[j * n + j];
            }
        }
    }
    Ok(l)
}

/// Solve L·y = b for lower-triangular L.
pub fn solve_lower(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for k in 0..i {
            sum -= l[i * n + k] * y[k];
        }
        y[i] = sum / l[i * n + i];
    }
    y
}

/// Solve Lᵀ·x = y for lower-triangular L.
pub fn solve_lower_transpose(l: &[f64], n: usize, y: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut sum = y[i];
        for k in (i + 1)..n {
            sum -= l[k * n + i] * x[k];
        }
        x[i] = sum / l[i * n + i];
    }
    x
}

/// Solve A·x = b given the Cholesky factor L of A.
pub fn chol_solve(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let y = solve_lower(l, n, b);
    solve_lower_transpose(l, n, &y)
}

/// log det A = 2·Σ log L_ii given the Cholesky factor of A.
pub fn chol_log_det(l: &[f64], n: usize) -> f64 {
    (0..n).map(|i| l[i * n + i].ln()).sum::<f64>() * 2.0
}

/// Squared Mahalanobis distance (z−mu)ᵀ A⁻¹ (z−mu) via triangular solves.
pub fn mahalanobis_sq(l: &[f64], n: usize, z: &[f64], mu: &[f64]) -> f64 {
    let diff: Vec<f64> = z.iter().zip(mu).map(|(a, b)| a - b).collect();
    let y = solve_lower(l, n, &diff);
    y.iter().map(|v| v * v).sum()
}

/// Full eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order with matching unit eigenvectors.
/// Off-diagonal mass is driven below 1e-12 relative to the Frobenius norm.
pub fn jacobi_eigen(a: &[f64], n: usize) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    assert_eq!(a.len(), n * n);
    let asym = max_asymmetry(a, n);
    if asym > 1e-8 {
        return Err(Error::Contract(format!(
            "jacobi_eigen requires a symmetric matrix (max |A - Aᵀ| = {asym:.3e})"
        )));
    }
    let mut m = a.to_vec();
    // symmetrize exactly so rotations preserve symmetry bit-for-bit
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (m[i * n + j] + m[j * n + i]);
            m[i * n + j] = v;
            m[j * n + i] = v;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let frob: f64 = m.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = 1e-12 * frob.max(1e-300);
    for _sweep in 0..100 {
        let mut off = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                off += m[i * n + j] * m[i * n + j];
            }
        }
        if (2.0 * off).sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = m[p * n + p];
                let aqq = m[q * n + q];
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (1.0 + theta * theta).sqrt())
                } else {
                    -1.0 / (-theta + (1.0 + theta * theta).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[k * n + p];
                    let mkq = m[k * n + q];
                    m[k * n + p] = c * mkp - s * mkq;
                    m[k * n + q] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[p * n + k];
                    let mqk = m[q * n + k];
                    m[p * n + k] = c * mpk - s * mqk;
                    m[q * n + k] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut pairs: Vec<(f64, Vec<f64>)> = (0..n)
        .map(|i| (m[i * n + i], (0..n).map(|k| v[k * n + i]).collect()))
        .collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let vals = pairs.iter().map(|p| p.0).collect();
    let vecs = pairs.into_iter().map(|p| p.1).collect();
    Ok((vals, vecs))
}

pub fn max_asymmetry(a: &[f64], n: usize) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((a[i * n + j] - a[j * n + i]).abs());
        }
    }
    worst
}

/// Sample mean and (1/h)-normalized covariance of the selected rows.
pub fn mean_cov(data: &[f64], s: usize, rows: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let h = rows.len();
    assert!(h > 0);
    let mut mu = vec![0.0; s];
    for &r in rows {
        for j in 0..s {
            mu[j] += data[r * s + j];
        }
    }
    for m in mu.iter_mut() {
        *m /= h as f64;
    }
    let mut cov = vec![0.0; s * s];
    for &r in rows {
        for i in 0..s {
            let di = data[r * s + i] - mu[i];
            for j in 0..s {
                cov[i * s + j] += di * (data[r * s + j] - mu[j]);
            }
        }
    }
    for c in cov.iter_mut() {
        *c /= h as f64;
    }
    (mu, cov)
}
