//! Early-exit routing: sweep the confidence threshold and watch where the
//! per-layer domain classifiers hand over to deeper layers.
//!
//! ```bash
//! cargo run --release --example early_exit
//! ```

use conec::engine::{run, EngineConfig};
use conec::stream::{generate, StreamConfig};

fn main() {
    let stream_config = StreamConfig {
        num_domains: 3,
        num_classes: 3,
        train_per_class: 50,
        test_per_class: 40,
        seed: 9,
        ..Default::default()
    };
    let engine_config = EngineConfig {
        epochs: 6,
        router_epochs: 20,
        seed: 9,
        ..Default::default()
    };
    let domains = generate(&stream_config).unwrap();
    let order: Vec<usize> = (0..3).collect();
    let (mut state, _) = run(&engine_config, &stream_config, &domains, &order).unwrap();

    println!("threshold   mean_exit   dc_accuracy");
    for threshold in [0.5, 0.7, 0.9, 0.97, 1.01] {
        state.set_router_threshold(threshold);
        let mut exits = 0usize;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (arrival, &idx) in order.iter().enumerate() {
            for (x, _) in &domains[idx].test {
                let outcome = state.infer(x).unwrap();
                exits += outcome.exit_layer;
                correct += usize::from(outcome.domain == arrival);
                total += 1;
            }
        }
        println!(
            "{threshold:>9}   {:>9.3}   {:>11.4}",
            exits as f64 / total as f64,
            correct as f64 / total as f64
        );
    }
    println!("\n(threshold > 1 disables early exit: the most confident layer decides)");
}
