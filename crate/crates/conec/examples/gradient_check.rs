//! Finite-difference spot checks of the hand-written gradients: the losses,
//! the reparameterized classifier, and the composite objective through a
//! two-block backbone.
//!
//! ```bash
//! cargo run --release --example gradient_check
//! ```

use std::collections::BTreeMap;

use conec::adapters::{AdapterGrads, AdapterStack, LoraAdapter, ProjKind};
use conec::backbone::{Backbone, BackboneConfig};
use conec::heads::StochasticHead;
use conec::losses::{ball_loss, cross_entropy, kd_loss};
use conec::numkit::{finite_diff_grad, grad_close, Matrix, Rng};

fn main() {
    let mut rng = Rng::new(17);

    // Cross-entropy.
    let logits = rng.normal_vec(5);
    let (_, grad) = cross_entropy(&logits, 2).unwrap();
    let numeric = finite_diff_grad(|x| cross_entropy(x, 2).unwrap().0, &logits, 1e-6).unwrap();
    report("cross-entropy", &grad, &numeric);

    // Distillation at tau = 2.
    let student = rng.normal_vec(5);
    let teacher = rng.normal_vec(5);
    let (_, grad) = kd_loss(&student, &teacher, 2.0).unwrap();
    let numeric =
        finite_diff_grad(|x| kd_loss(x, &teacher, 2.0).unwrap().0, &student, 1e-6).unwrap();
    report("distillation", &grad, &numeric);

    // Ball-generator hinge.
    let mut centers = BTreeMap::new();
    centers.insert(0usize, vec![0.0, 0.0, 0.0]);
    centers.insert(1usize, vec![4.0, 0.0, 0.0]);
    let z = rng.normal_vec(3);
    let (_, grads) = ball_loss(&[z.clone()], &[0], &centers, 1.0).unwrap();
    let numeric = finite_diff_grad(
        |zz| ball_loss(&[zz.to_vec()], &[0], &centers, 1.0).unwrap().0,
        &z,
        1e-6,
    )
    .unwrap();
    report("ball hinge", &grads[0], &numeric);

    // Reparameterized stochastic head.
    let head = StochasticHead::new(3, 6, 16.0, 0.2, &mut rng);
    let z = rng.normal_vec(6);
    let noise = head.sample_noise(&mut rng);
    let logits = head.forward_train_with_noise(&z, &noise).unwrap();
    let (_, dlogits) = cross_entropy(&logits, 1).unwrap();
    let (dmu, _, _) = head.backward_train(&z, &noise, &dlogits);
    let mu0 = head.mu().data().to_vec();
    let numeric = finite_diff_grad(
        |m| {
            let mut probe = head.clone();
            probe.mu_mut().data_mut().copy_from_slice(m);
            let l = probe.forward_train_with_noise(&z, &noise).unwrap();
            cross_entropy(&l, 1).unwrap().0
        },
        &mu0,
        1e-6,
    )
    .unwrap();
    report("head mu (reparameterized)", dmu.data(), &numeric);

    // Composite: CE through a 2-block backbone into an adapter A matrix.
    let bb = Backbone::new(BackboneConfig {
        num_layers: 2,
        embed_dim: 8,
        num_tokens: 3,
        num_heads: 2,
        mlp_hidden: 12,
        input_dim: 4,
        seed: 5,
        ..Default::default()
    })
    .unwrap();
    let mut blocks: Vec<Vec<LoraAdapter>> = (0..2)
        .map(|_| vec![LoraAdapter::new_shared(2, 8, 8, ProjKind::Query, &mut rng).unwrap()])
        .collect();
    blocks[0][0].nudge_a(&mut rng, 0.2);
    blocks[1][0].nudge_a(&mut rng, 0.2);
    let x = rng.normal_vec(4);
    let head2 = StochasticHead::new(3, 8, 16.0, 0.0, &mut rng);

    let loss_of = |bset: &[Vec<LoraAdapter>]| -> f64 {
        let stack = AdapterStack::from_blocks(bset);
        let trace = bb.forward_with_adapters(&x, &stack).unwrap();
        let logits = head2.forward_infer(trace.cls_at(2)).unwrap();
        cross_entropy(&logits, 0).unwrap().0
    };

    let stack = AdapterStack::from_blocks(&blocks);
    let cache = bb.forward_cached(&x, &stack, 2).unwrap();
    let zt = cache.cls_at(2).to_vec();
    let logits = head2.forward_infer(&zt).unwrap();
    let (_, dlogits) = cross_entropy(&logits, 0).unwrap();
    let (_, dz) = head2.backward_infer(&zt, &dlogits);
    let mut d_last = Matrix::zeros(3, 8);
    d_last.row_mut(0).copy_from_slice(&dz);
    let mut grads = AdapterGrads::zeros_like(&stack);
    bb.backward(&cache, &d_last, &stack, &mut grads).unwrap();

    let base = blocks[0][0].a().data().to_vec();
    let numeric = finite_diff_grad(
        |theta| {
            let mut probe = blocks.clone();
            probe[0][0].set_a_data(theta);
            loss_of(&probe)
        },
        &base,
        1e-6,
    )
    .unwrap();
    report("composite dL/dA (block 1)", grads.a(0, 0).data(), &numeric);
}

fn report(name: &str, analytic: &[f64], numeric: &[f64]) {
    let ok = grad_close(analytic, numeric, 1e-4, 1e-7);
    let worst = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs())
        .fold(0.0f64, f64::max);
    println!("{name:32} max |analytic - numeric| = {worst:.3e}  {}", if ok { "ok" } else { "MISMATCH" });
}
