//! Train the engine on a single domain and inspect what it learned.
//!
//! ```bash
//! cargo run --release --example train_single_domain
//! ```

use conec::engine::{EngineConfig, EngineState};
use conec::stream::{generate, StreamConfig};

fn main() {
    let stream_config = StreamConfig {
        num_domains: 1,
        num_classes: 4,
        train_per_class: 80,
        test_per_class: 40,
        seed: 2,
        ..Default::default()
    };
    let domains = generate(&stream_config).unwrap();

    let engine_config = EngineConfig {
        epochs: 8,
        router_epochs: 5,
        seed: 2,
        ..Default::default()
    };
    let mut state = EngineState::new(engine_config, stream_config.raw_dim, 4, 1).unwrap();

    let report = state.train_domain(&domains[0]).unwrap();
    println!(
        "epoch losses: {:?}",
        report
            .epoch_losses
            .iter()
            .map(|l| (l * 1000.0).round() / 1000.0)
            .collect::<Vec<_>>()
    );
    println!("train accuracy after prototype replacement: {:.4}", report.train_accuracy);

    state.train_router_step(&domains[0]).unwrap();
    let metrics = state.evaluate(&[&domains[0]]).unwrap();
    println!(
        "test accuracy {:.4}, oracle {:.4}, domain-id accuracy {:.4}",
        metrics.avg_accuracy, metrics.avg_oracle, metrics.avg_dc
    );

    // The backbone never moves: its parameter fingerprint is stable.
    println!(
        "backbone fingerprint: {:#018x}",
        state.backbone().param_fingerprint()
    );
}
