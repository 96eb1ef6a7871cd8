//! The full domain-incremental pipeline on a three-domain stream: train a
//! domain, fit its replay mixtures, train the router, evaluate on all seen
//! domains — then print the accuracy matrix.
//!
//! ```bash
//! cargo run --release --example incremental_run
//! ```

use conec::engine::{run, EngineConfig};
use conec::stream::{generate, StreamConfig};

fn main() {
    let stream_config = StreamConfig {
        num_domains: 3,
        num_classes: 4,
        train_per_class: 60,
        test_per_class: 40,
        seed: 4,
        ..Default::default()
    };
    let engine_config = EngineConfig {
        epochs: 8,
        router_epochs: 20,
        seed: 4,
        ..Default::default()
    };
    let domains = generate(&stream_config).unwrap();
    let order: Vec<usize> = (0..stream_config.num_domains).collect();

    let (_state, record) = run(&engine_config, &stream_config, &domains, &order).unwrap();

    println!("accuracy matrix (rows: after domain b; cols: eval domain):");
    print!("{:>10}", "");
    for d in 1..=3 {
        print!("{:>10}", format!("domain {d}"));
    }
    println!();
    for step in &record.steps {
        print!("{:>10}", format!("after {}", step.after_domain));
        for row in &step.rows {
            print!("{:>10.4}", row.accuracy);
        }
        println!();
    }
    println!("\nAvg (mean of per-step averages): {:.4}", record.avg);
    println!("Last (final-step average):       {:.4}", record.last);
    println!("final domain-id accuracy:        {:.4}", record.dc_last);
    println!("final oracle accuracy (gap):     {:.4} ({:+.4})",
        record.oracle_last, record.last - record.oracle_last);
    println!("mean early-exit layer:           {:.2}", record.exit_layer_last);
}
