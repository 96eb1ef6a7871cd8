//! Cholesky factorization with escalating diagonal jitter.

use super::matrix::Matrix;
use crate::error::{Error, Result};

/// Plain lower-triangular Cholesky, no jitter. Fails on any non-PD pivot.
pub fn cholesky_raw(k: &Matrix) -> Result<Matrix> {
    if k.rows() != k.cols() {
        return Err(Error::InvalidShape(format!(
            "cholesky needs a square matrix, got {}x{}",
            k.rows(),
            k.cols()
        )));
    }
    if !k.is_finite() {
        return Err(Error::InvalidInput(
            "cholesky input must be finite".to_string(),
        ));
    }
    let n = k.rows();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut sum = k.get(i, j);
            for p in 0..j {
                sum -= l.get(i, p) * l.get(j, p);
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::Numeric(format!(
                        "matrix not positive definite at pivot {i} (value {sum:e})"
                    )));
                }
                l.set(i, j, sum.sqrt());
            } else {
                l.set(i, j, sum / l.get(j, j));
            }
        }
    }
    Ok(l)
}

/// Cholesky with jitter escalation: on failure, `eps * I` is added with
/// `eps` starting at 1e-9 and growing tenfold up to 1e-3 before giving up.
/// Near-degenerate covariance matrices of low-rank embedding layers need
/// this to stay factorizable.
pub fn cholesky(k: &Matrix) -> Result<Matrix> {
    match cholesky_raw(k) {
        Ok(l) => Ok(l),
        Err(Error::Numeric(_)) => {
            let mut eps = 1e-9;
            while eps <= 1e-3 {
                let mut jittered = k.clone();
                for i in 0..k.rows() {
                    jittered.set(i, i, jittered.get(i, i) + eps);
                }
                if let Ok(l) = cholesky_raw(&jittered) {
                    return Ok(l);
                }
                eps *= 10.0;
            }
            Err(Error::Numeric(
                "matrix not positive definite after jitter up to 1e-3".to_string(),
            ))
        }
        Err(e) => Err(e),
    }
}

/// Solves `L y = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows();
    debug_assert_eq!(b.len(), n);
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut sum = b[i];
        for j in 0..i {
            sum -= l.get(i, j) * y[j];
        }
        y[i] = sum / l.get(i, i);
    }
    y
}
