//! Catastrophic forgetting, side by side: naive sequential fine-tuning of a
//! single adapter set versus isolated per-domain adapters with oracle
//! routing.
//!
//! ```bash
//! cargo run --release --example forgetting_comparison
//! ```

use conec::engine::{run, run_finetune, EngineConfig};
use conec::stream::{generate, StreamConfig};

fn main() {
    let stream_config = StreamConfig {
        num_domains: 3,
        num_classes: 4,
        train_per_class: 60,
        test_per_class: 40,
        seed: 12,
        ..Default::default()
    };
    let engine_config = EngineConfig {
        epochs: 8,
        router_epochs: 10,
        seed: 12,
        ..Default::default()
    };
    let domains = generate(&stream_config).unwrap();
    let order: Vec<usize> = (0..3).collect();

    let finetune = run_finetune(&engine_config, &stream_config, &domains, &order).unwrap();
    let (_, isolated) = run(&engine_config, &stream_config, &domains, &order).unwrap();

    let first_domain_curve = |record: &conec::engine::RunRecord, oracle: bool| -> Vec<f64> {
        record
            .steps
            .iter()
            .map(|s| {
                let row = &s.rows[0];
                if oracle {
                    row.oracle_accuracy
                } else {
                    row.accuracy
                }
            })
            .collect()
    };

    let ft = first_domain_curve(&finetune, false);
    let iso = first_domain_curve(&isolated, true);
    println!("domain-1 test accuracy as domains arrive:");
    println!("  naive fine-tune:        {ft:?}");
    println!("  isolated + oracle:      {iso:?}");
    println!(
        "\nforgetting on domain 1 (first -> last): fine-tune {:.1} points, isolated {:.1} points",
        (ft[0] - ft[ft.len() - 1]) * 100.0,
        (iso[0] - iso[iso.len() - 1]) * 100.0
    );
}
