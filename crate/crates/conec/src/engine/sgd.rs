//! Classical momentum SGD: `v ← μ·v + g`, `p ← p − lr·v`.

use crate::numkit::Matrix;

pub fn sgd_step(param: &mut Matrix, grad: &Matrix, velocity: &mut Matrix, lr: f64, momentum: f64) {
    assert_eq!(
        (param.rows(), param.cols()),
        (grad.rows(), grad.cols()),
        "sgd parameter/gradient shape mismatch"
    );
    sgd_step_slice(
        param.data_mut(),
        grad.data(),
        velocity.data_mut(),
        lr,
        momentum,
    );
}

pub fn sgd_step_slice(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    assert_eq!(param.len(), grad.len());
    assert_eq!(param.len(), velocity.len());
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut p = vec![0.0, 0.0];
        let mut v = vec![0.0, 0.0];
        sgd_step_slice(&mut p, &[1.0, 2.0], &mut v, 1.0, 0.0);
        assert_eq!(p, vec![-1.0, -2.0]);
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut p = vec![0.3, -0.7];
        let mut v = vec![0.0, 0.0];
        sgd_step_slice(&mut p, &[0.0, 0.0], &mut v, 0.5, 0.9);
        assert_eq!(p, vec![0.3, -0.7]);
    }

    #[test]
    fn momentum_accumulates_history() {
        let mut p = vec![0.0];
        let mut v = vec![0.0];
        sgd_step_slice(&mut p, &[1.0], &mut v, 1.0, 0.5);
        assert_eq!(p, vec![-1.0]); // v = 1
        sgd_step_slice(&mut p, &[1.0], &mut v, 1.0, 0.5);
        assert_eq!(p, vec![-2.5]); // v = 1.5
    }

    #[test]
    fn quadratic_bowl_converges_monotonically_below_stability_bound() {
        // f(x) = 0.5 Σ λ_i x_i²; gradient λ_i x_i. Without momentum the map
        // is x ← (1 − lr·λ) x, contractive per coordinate for lr < 2/λ_max.
        let eigen = [0.5, 1.0, 4.0];
        let lr = 0.4; // < 2/4
        let mut x = vec![3.0, -2.0, 1.5];
        let mut v = vec![0.0; 3];
        let mut prev = f64::INFINITY;
        for _ in 0..100 {
            let grad: Vec<f64> = x.iter().zip(&eigen).map(|(xi, l)| l * xi).collect();
            sgd_step_slice(&mut x, &grad, &mut v, lr, 0.0);
            let dist = x.iter().map(|xi| xi * xi).sum::<f64>().sqrt();
            assert!(dist <= prev + 1e-12, "distance increased: {dist} > {prev}");
            prev = dist;
        }
        assert!(prev < 1e-6);
    }

    #[test]
    fn matrix_wrapper_matches_slice_behaviour() {
        let mut p = Matrix::from_fn(2, 2, |i, j| (i + j) as f64);
        let g = Matrix::from_fn(2, 2, |_, _| 1.0);
        let mut v = Matrix::zeros(2, 2);
        sgd_step(&mut p, &g, &mut v, 0.1, 0.0);
        for i in 0..2 {
            for j in 0..2 {
                assert!((p.get(i, j) - ((i + j) as f64 - 0.1)).abs() < 1e-15);
            }
        }
    }
}
