//! Deterministic dense linear algebra, seeded randomness, and the
//! finite-difference gradient oracle that every hand-written backward pass
//! in this crate is tested against.
//!
//! Everything is 64-bit: the gradient checks demand it. All functions here
//! are pure given their inputs; concurrent callers only need to own their
//! own [`Rng`].

mod chol;
mod matrix;
mod rng;
mod svd;

pub use chol::{cholesky, cholesky_raw, solve_lower};
pub use matrix::Matrix;
pub use rng::Rng;
pub use svd::svd;

use crate::error::{Error, Result};

/// Row-orthonormal matrix `B ∈ r×k` (`B Bᵀ = I_r`), built by sampling a
/// standard normal matrix and taking the orthogonal polar factor of its SVD.
pub fn random_orthogonal_rows(r: usize, k: usize, rng: &mut Rng) -> Result<Matrix> {
    if r > k {
        return Err(Error::InvalidShape(format!(
            "cannot build {r} orthonormal rows in dimension {k}"
        )));
    }
    if r == 0 || k == 0 {
        return Err(Error::InvalidShape(
            "orthogonal matrix dimensions must be positive".to_string(),
        ));
    }
    let m = rng.normal_matrix(r, k, 1.0);
    let (u, _, v) = svd(&m)?;
    // u: r×r, v: k×r; the product has exactly orthonormal rows.
    Ok(u.matmul_transb(&v))
}

/// Temperature softmax with max-subtraction. Output sums to 1.
pub fn softmax(v: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidInput(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    if v.is_empty() {
        return Err(Error::InvalidInput("softmax of empty vector".to_string()));
    }
    if !v.iter().all(|x| x.is_finite()) {
        return Err(Error::Numeric(
            "softmax input contains non-finite logits".to_string(),
        ));
    }
    let scaled: Vec<f64> = v.iter().map(|x| x / temperature).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity, clamped to `[-1, 1]`. Errors on zero-norm operands.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidShape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::InvalidInput(
            "cosine similarity of a zero vector".to_string(),
        ));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

/// GELU activation (tanh approximation). Smooth everywhere, which keeps
/// finite-difference gradient checks honest.
pub fn gelu(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Central-difference gradient: `(f(x+h·e_i) − f(x−h·e_i)) / 2h` per
/// coordinate. The oracle every analytic gradient in this crate answers to.
pub fn finite_diff_grad<F>(mut f: F, x: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> f64,
{
    if h <= 0.0 {
        return Err(Error::InvalidInput(format!(
            "finite difference step must be positive, got {h}"
        )));
    }
    let mut grad = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite function evaluation at coordinate {i}"
            )));
        }
        grad[i] = (fp - fm) / (2.0 * h);
    }
    Ok(grad)
}

/// Relative-with-absolute-floor gradient comparison used across the test
/// suites: passes when `|a-b| <= max(abs_floor, rel * max(|a|,|b|))`.
pub fn grad_close(analytic: &[f64], numeric: &[f64], rel: f64, abs_floor: f64) -> bool {
    analytic.len() == numeric.len()
        && analytic.iter().zip(numeric).all(|(a, n)| {
            let tol = abs_floor.max(rel * a.abs().max(n.abs()));
            (a - n).abs() <= tol
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use crate::numkit::Rng as SeededRng;

    #[test]
    fn orthogonal_rows_product_is_identity() {
        let mut rng = SeededRng::new(11);
        let b = random_orthogonal_rows(2, 4, &mut rng).unwrap();
        let gram = b.matmul_transb(&b);
        assert!(gram.sub(&Matrix::identity(2)).max_abs() < 1e-8);
    }

    #[test]
    fn orthogonal_rows_scalar_case() {
        let mut rng = SeededRng::new(3);
        let b = random_orthogonal_rows(1, 1, &mut rng).unwrap();
        assert!((b.get(0, 0).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_rows_seeds_differ() {
        let mut r1 = SeededRng::new(100);
        let mut r2 = SeededRng::new(200);
        let b1 = random_orthogonal_rows(8, 32, &mut r1).unwrap();
        let b2 = random_orthogonal_rows(8, 32, &mut r2).unwrap();
        assert!(b1.sub(&b2).frob_norm() > 0.1);
    }

    #[test]
    fn orthogonal_rows_bitwise_deterministic() {
        let b1 = random_orthogonal_rows(4, 16, &mut SeededRng::new(77)).unwrap();
        let b2 = random_orthogonal_rows(4, 16, &mut SeededRng::new(77)).unwrap();
        assert_eq!(b1.data(), b2.data());
    }

    #[test]
    fn orthogonal_rows_rejects_r_gt_k() {
        let mut rng = SeededRng::new(1);
        assert!(random_orthogonal_rows(5, 4, &mut rng).is_err());
    }

    #[test]
    fn softmax_symmetry_and_analytic_values() {
        let s = softmax(&[0.0, 0.0], 1.0).unwrap();
        assert!((s[0] - 0.5).abs() < 1e-15);
        let s = softmax(&[2.0f64.ln(), 0.0], 1.0).unwrap();
        assert!((s[0] - 2.0 / 3.0).abs() < 1e-14);
        assert!((s[1] - 1.0 / 3.0).abs() < 1e-14);
    }

    #[test]
    fn higher_temperature_is_closer_to_uniform() {
        let hot = softmax(&[10.0, 0.0], 2.0).unwrap();
        let cold = softmax(&[10.0, 0.0], 1.0).unwrap();
        assert!((hot[0] - 0.5).abs() < (cold[0] - 0.5).abs());
    }

    #[test]
    fn softmax_shift_invariance() {
        let v = [0.3, -1.2, 4.0, 0.0];
        let a = softmax(&v, 1.5).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
        let b = softmax(&shifted, 1.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_bad_temperature() {
        assert!(softmax(&[1.0], 0.0).is_err());
        assert!(softmax(&[1.0], -1.0).is_err());
    }

    #[test]
    fn cosine_basics() {
        let a = [1.0, 2.0, -0.5];
        assert!((cosine_similarity(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap().abs() < 1e-15);
        let c = cosine_similarity(&[1.0, 1.0], &[1.0, 0.0]).unwrap();
        assert!((c - std::f64::consts::FRAC_1_SQRT_2).abs() < 1e-15);
        assert!(cosine_similarity(&[0.0, 0.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn finite_diff_on_squared_norm() {
        let grad = finite_diff_grad(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((grad[0] - 2.0).abs() < 1e-6);
        assert!((grad[1] - 4.0).abs() < 1e-6);
    }

    #[test]
    fn finite_diff_of_constant_is_zero() {
        let grad = finite_diff_grad(|_| 3.75, &[0.1, -0.2, 0.3], 1e-5).unwrap();
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn finite_diff_matches_analytic_softmax_ce() {
        // f(x) = -log softmax(x)[label]; analytic grad = softmax(x) - onehot.
        let logits = [0.7, -1.3, 2.1, 0.4];
        let label = 2usize;
        let f = |x: &[f64]| -softmax(x, 1.0).unwrap()[label].ln();
        let numeric = finite_diff_grad(f, &logits, 1e-6).unwrap();
        let probs = softmax(&logits, 1.0).unwrap();
        for (i, p) in probs.iter().enumerate() {
            let analytic = p - if i == label { 1.0 } else { 0.0 };
            assert!((analytic - numeric[i]).abs() < 1e-6);
        }
    }

    #[test]
    fn finite_diff_reports_nonfinite() {
        // ln(x - h) is NaN at x = 0.
        let res = finite_diff_grad(|x| x[0].ln(), &[0.0], 1e-9);
        assert!(res.is_err());
    }

    proptest! {
        #[test]
        fn softmax_always_sums_to_one(v in proptest::collection::vec(-30.0f64..30.0, 1..12),
                                      t in 0.1f64..10.0) {
            let s = softmax(&v, t).unwrap();
            let sum: f64 = s.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn orthogonal_rows_invariant(r in 1usize..6, extra in 0usize..8, seed in 0u64..500) {
            let k = r + extra;
            let b = random_orthogonal_rows(r, k, &mut SeededRng::new(seed)).unwrap();
            let gram = b.matmul_transb(&b);
            prop_assert!(gram.sub(&Matrix::identity(r)).max_abs() < 1e-8);
        }
    }
}
