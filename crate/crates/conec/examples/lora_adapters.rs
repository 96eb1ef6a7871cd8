//! LoRA adapter mechanics: frozen-orthogonal down-projections, exact
//! zero-init no-op behaviour, and the gradient redistribution mask.
//!
//! ```bash
//! cargo run --release --example lora_adapters
//! ```

use conec::adapters::{redistribution_mask, AdapterStack, LoraAdapter, ProjKind};
use conec::backbone::{Backbone, BackboneConfig};
use conec::numkit::Rng;

fn main() {
    let mut rng = Rng::new(3);

    // A fresh shared adapter: B has orthonormal rows, A is all zeros, so the
    // low-rank delta vanishes identically.
    let adapter = LoraAdapter::new_shared(8, 32, 32, ProjKind::Query, &mut rng).unwrap();
    println!(
        "orthogonality defect of B·Bᵀ vs identity: {:.2e}",
        adapter.max_orthogonality_defect()
    );
    let tokens = rng.normal_matrix(5, 32, 1.0);
    println!(
        "max |delta| with zero-initialized A: {:.1}",
        adapter.delta(&tokens).max_abs()
    );

    // Through the backbone: zero adapters leave the trace bitwise unchanged.
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let per_block: Vec<Vec<LoraAdapter>> = (0..6)
        .map(|_| {
            vec![LoraAdapter::new_shared(8, 32, 32, ProjKind::Query, &mut rng).unwrap()]
        })
        .collect();
    let x = rng.normal_vec(16);
    let plain = backbone.forward_plain(&x).unwrap();
    let adapted = backbone
        .forward_with_adapters(&x, &AdapterStack::from_blocks(&per_block))
        .unwrap();
    println!("zero-init forward equals plain forward: {}", plain == adapted);

    // A non-zero A changes the trace.
    let mut nudged = per_block.clone();
    nudged[0][0].nudge_a(&mut rng, 0.2);
    let moved = backbone
        .forward_with_adapters(&x, &AdapterStack::from_blocks(&nudged))
        .unwrap();
    println!(
        "Frobenius distance after nudging A in block 1: {:.4}",
        moved.last().sub(plain.last()).frob_norm()
    );

    // Redistribution: rows that mattered in the previous domain keep their
    // gradient; dormant rows get released. The mask always sums to d.
    let norms = [2.0, 0.0, 0.0, 0.0];
    let mask = redistribution_mask(&norms).unwrap();
    println!("mask for row norms {norms:?}: {mask:?} (sum {})", mask.iter().sum::<f64>());
}
