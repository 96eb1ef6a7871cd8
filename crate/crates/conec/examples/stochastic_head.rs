//! The stochastic cosine classifier: sampled weights at training time,
//! deterministic cosine scoring at inference, prototype means afterwards.
//!
//! ```bash
//! cargo run --release --example stochastic_head
//! ```

use conec::heads::{compute_prototypes, StochasticHead};
use conec::numkit::Rng;

fn main() {
    let mut rng = Rng::new(11);
    let mut head = StochasticHead::new(3, 8, 16.0, 0.3, &mut rng);
    let z = rng.normal_vec(8);

    println!("deterministic logits: {:?}", round3(&head.forward_infer(&z).unwrap()));
    println!("three sampled draws:");
    for _ in 0..3 {
        println!("  {:?}", round3(&head.forward_train(&z, &mut rng).unwrap()));
    }

    // Prototype replacement: class means of (here synthetic) embeddings
    // overwrite mu, sigma is untouched.
    let embeddings: Vec<Vec<f64>> = (0..30)
        .map(|i| {
            let mut v = rng.normal_vec(8);
            v[i % 3] += 4.0; // three separated clusters
            v
        })
        .collect();
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let protos = compute_prototypes(&embeddings, &labels, 3).unwrap();
    let sigma_before = head.sigma().clone();
    head.replace_means(&protos).unwrap();
    println!(
        "after prototype replacement: sigma unchanged = {}",
        head.sigma() == &sigma_before
    );
    for c in 0..3 {
        let logits = head.forward_infer(protos.mean(c)).unwrap();
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        println!("  prototype of class {c} classifies as {argmax}");
    }
}

fn round3(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1000.0).round() / 1000.0).collect()
}
