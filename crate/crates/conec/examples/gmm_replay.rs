//! Gaussian-mixture replay: fit a mixture with EM, check the likelihood
//! trace, and sample synthetic embeddings back out of it.
//!
//! ```bash
//! cargo run --release --example gmm_replay
//! ```

use conec::mixtures::fit_em;
use conec::numkit::{Matrix, Rng};

fn main() {
    // Two planted clusters at (±5, 0).
    let mut rng = Rng::new(5);
    let per = 300;
    let mut data = Matrix::zeros(2 * per, 2);
    for i in 0..per {
        data.set(i, 0, -5.0 + rng.normal());
        data.set(i, 1, rng.normal());
        data.set(per + i, 0, 5.0 + rng.normal());
        data.set(per + i, 1, rng.normal());
    }

    let model = fit_em(&data, 2, &mut Rng::new(60), 100, 1e-9).unwrap();
    println!("fitted weights: {:?}", model.weights());
    for c in 0..2 {
        println!(
            "component {c}: mean ({:6.3}, {:6.3}), cov diag ({:.3}, {:.3})",
            model.mean(c)[0],
            model.mean(c)[1],
            model.cov(c).get(0, 0),
            model.cov(c).get(1, 1)
        );
    }

    let trace = model.ll_trace();
    println!(
        "log-likelihood trace over {} iterations: {:.2} -> {:.2} (nondecreasing: {})",
        trace.len(),
        trace.first().unwrap(),
        trace.last().unwrap(),
        trace.windows(2).all(|w| w[1] >= w[0] - 1e-9)
    );

    // Replay: draw synthetic samples and compare their empirical moments.
    let draws = model.sample(20_000, &mut Rng::new(61)).unwrap();
    let left = (0..draws.rows()).filter(|&i| draws.get(i, 0) < 0.0).count();
    println!(
        "synthetic draws near the left cluster: {:.3} (weights said {:.3})",
        left as f64 / draws.rows() as f64,
        model.weights()[0]
    );
    println!("\nper-component export:\n{}", model.to_csv());
}
