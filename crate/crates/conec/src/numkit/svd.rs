//! Singular value decomposition via one-sided Jacobi rotations.
//!
//! One-sided Jacobi orthogonalizes the columns of the working matrix by
//! plane rotations until every pair is numerically orthogonal. At the sizes
//! this crate deals in (≤ 64×64) it is simple and accurate to near machine
//! precision, which the downstream orthogonal-projector construction
//! depends on.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 100;
const ORTHO_TOL: f64 = 1e-15;

/// Factors `m = U · diag(S) · V^T` with thin `U` (rows×p), `S` nonincreasing
/// and nonnegative, and `V` (cols×p) where `p = min(rows, cols)`.
pub fn svd(m: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    if m.rows() == 0 || m.cols() == 0 {
        return Err(Error::InvalidShape("svd of empty matrix".to_string()));
    }
    if !m.is_finite() {
        return Err(Error::InvalidInput("svd input must be finite".to_string()));
    }
    if m.rows() < m.cols() {
        // Work on the transpose and swap the factors back.
        let (u, s, v) = svd_tall(&m.transpose())?;
        return Ok((v, s, u));
    }
    svd_tall(m)
}

/// SVD for rows ≥ cols.
fn svd_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (rows, cols) = (a.rows(), a.cols());
    let mut work = a.clone();
    let mut v = Matrix::identity(cols);

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..cols {
            for q in (p + 1)..cols {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for i in 0..rows {
                    let wp = work.get(i, p);
                    let wq = work.get(i, q);
                    app += wp * wp;
                    aqq += wq * wq;
                    apq += wp * wq;
                }
                let scale = (app * aqq).sqrt();
                if scale == 0.0 || apq.abs() <= ORTHO_TOL * scale {
                    continue;
                }
                rotated = true;
                // Jacobi rotation zeroing the (p,q) entry of the Gram matrix.
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..rows {
                    let wp = work.get(i, p);
                    let wq = work.get(i, q);
                    work.set(i, p, c * wp - s * wq);
                    work.set(i, q, s * wp + c * wq);
                }
                for i in 0..cols {
                    let vp = v.get(i, p);
                    let vq = v.get(i, q);
                    v.set(i, p, c * vp - s * vq);
                    v.set(i, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Numeric(format!(
            "svd did not converge within {MAX_SWEEPS} Jacobi sweeps"
        )));
    }

    // Column norms are the singular values; sort them nonincreasing.
    let mut order: Vec<usize> = (0..cols).collect();
    let norms: Vec<f64> = (0..cols)
        .map(|j| (0..rows).map(|i| work.get(i, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&x, &y| norms[y].partial_cmp(&norms[x]).unwrap());

    let mut u = Matrix::zeros(rows, cols);
    let mut s = vec![0.0; cols];
    let mut v_sorted = Matrix::zeros(cols, cols);
    let max_norm = norms.iter().cloned().fold(0.0f64, f64::max);
    let rank_tol = max_norm * 1e-14;
    for (new_j, &old_j) in order.iter().enumerate() {
        s[new_j] = norms[old_j];
        for i in 0..cols {
            v_sorted.set(i, new_j, v.get(i, old_j));
        }
        if norms[old_j] > rank_tol && norms[old_j] > 0.0 {
            for i in 0..rows {
                u.set(i, new_j, work.get(i, old_j) / norms[old_j]);
            }
        }
    }

    // Columns with zero singular value never got normalized; complete them to
    // an orthonormal basis so U keeps its contract.
    complete_orthonormal_columns(&mut u, &s, rank_tol);

    Ok((u, s, v_sorted))
}

fn complete_orthonormal_columns(u: &mut Matrix, s: &[f64], rank_tol: f64) {
    let (rows, cols) = (u.rows(), u.cols());
    for j in 0..cols {
        if s[j] > rank_tol && s[j] > 0.0 {
            continue;
        }
        // Gram-Schmidt a canonical basis vector against the existing columns.
        'candidates: for cand in 0..rows {
            let mut col = vec![0.0; rows];
            col[cand] = 1.0;
            for k in 0..cols {
                if k == j {
                    continue;
                }
                let dot: f64 = (0..rows).map(|i| col[i] * u.get(i, k)).sum();
                for (i, c) in col.iter_mut().enumerate() {
                    *c -= dot * u.get(i, k);
                }
            }
            let norm: f64 = col.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for (i, c) in col.iter().enumerate() {
                    u.set(i, j, c / norm);
                }
                break 'candidates;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::rng::Rng;

    fn reconstruct(u: &Matrix, s: &[f64], v: &Matrix) -> Matrix {
        let mut us = u.clone();
        for i in 0..us.rows() {
            for j in 0..us.cols() {
                us.set(i, j, us.get(i, j) * s[j]);
            }
        }
        us.matmul_transb(v)
    }

    fn assert_orthonormal_columns(m: &Matrix, tol: f64) {
        let gram = m.matmul_transa(m);
        let diff = gram.sub(&Matrix::identity(m.cols()));
        assert!(diff.max_abs() < tol, "gram deviation {}", diff.max_abs());
    }

    #[test]
    fn identity_has_unit_singular_values() {
        let (u, s, v) = svd(&Matrix::identity(3)).unwrap();
        for sv in &s {
            assert!((sv - 1.0).abs() < 1e-12);
        }
        // U and V equal to I up to column sign.
        for j in 0..3 {
            for i in 0..3 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert!((u.get(i, j).abs() - expect).abs() < 1e-12);
                assert!((v.get(i, j).abs() - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn diagonal_matrix() {
        let m = Matrix::from_vec(2, 2, vec![3.0, 0.0, 0.0, 2.0]).unwrap();
        let (_, s, _) = svd(&m).unwrap();
        assert!((s[0] - 3.0).abs() < 1e-12);
        assert!((s[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn random_rectangular_reconstructs() {
        let mut rng = Rng::new(2024);
        let m = rng.normal_matrix(4, 6, 1.0);
        let (u, s, v) = svd(&m).unwrap();
        let err = reconstruct(&u, &s, &v).sub(&m).frob_norm() / m.frob_norm();
        assert!(err < 1e-9, "reconstruction error {err}");
        assert_orthonormal_columns(&u, 1e-10);
        assert_orthonormal_columns(&v, 1e-10);
        assert!(s.windows(2).all(|w| w[0] >= w[1]));
        assert!(s.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn random_square_sizes_up_to_64() {
        let mut rng = Rng::new(7);
        for &n in &[1usize, 2, 8, 33, 64] {
            let m = rng.normal_matrix(n, n, 1.0);
            let (u, s, v) = svd(&m).unwrap();
            let err = reconstruct(&u, &s, &v).sub(&m).frob_norm() / m.frob_norm();
            assert!(err < 1e-9, "n={n} err={err}");
        }
    }

    #[test]
    fn rank_deficient_still_orthonormal() {
        // Two identical columns: rank 1.
        let m = Matrix::from_vec(3, 2, vec![1.0, 1.0, 2.0, 2.0, 3.0, 3.0]).unwrap();
        let (u, s, v) = svd(&m).unwrap();
        assert!(s[1].abs() < 1e-12);
        assert_orthonormal_columns(&u, 1e-9);
        let err = reconstruct(&u, &s, &v).sub(&m).frob_norm() / m.frob_norm();
        assert!(err < 1e-9);
    }

    #[test]
    fn rejects_nonfinite() {
        let mut m = Matrix::zeros(2, 2);
        m.set(0, 0, f64::INFINITY);
        assert!(svd(&m).is_err());
    }
}
