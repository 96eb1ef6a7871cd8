//! Acceptance suite: one test per criterion, each printing a PASS/FAIL
//! line (visible with `--nocapture`). Heavy fixtures are shared across
//! criteria through `OnceLock` so the suite stays within its time budget.
//!
//! Pilot values for the pinned fixtures (default seeds, this revision):
//! - default stream run:   last 0.9885, oracle_last 0.9995, dc_last 0.9675
//! - fine-tune baseline:   domain-1 accuracy 1.00 -> 0.165 (-83.5 points)
//! - ablation fixture s11: stochastic 0.9750 / cosine 0.9717 / linear 0.5583,
//!   ball on 0.9475 vs off 0.9400 (dc), single-layer dc 0.9242

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use conec::adapters::{
    redistribution_mask, AdapterBank, AdapterGrads, AdapterStack, LoraAdapter, ProjKind,
};
use conec::backbone::{Backbone, BackboneConfig};
use conec::engine::{run, run_finetune, EngineConfig, EngineState, RunRecord};
use conec::heads::{HeadKind, StochasticHead};
use conec::losses::{ball_loss, cross_entropy, kd_loss};
use conec::mixtures::{fit_em, GmmModel};
use conec::numkit::{finite_diff_grad, Matrix, Rng};
use conec::stream::{generate, StreamConfig};

const REL_TOL: f64 = 1e-4;
const ABS_FLOOR: f64 = 1e-5;

fn pass(criterion: usize, name: &str, details: &str) {
    println!("acceptance criterion {criterion:2} ({name}): PASS — {details}");
}

fn grad_ok(analytic: &[f64], numeric: &[f64]) -> bool {
    analytic.len() == numeric.len()
        && analytic.iter().zip(numeric).all(|(a, n)| {
            (a - n).abs() <= ABS_FLOOR.max(REL_TOL * a.abs().max(n.abs()))
        })
}

// ───────────────────────── shared fixtures ─────────────────────────

struct DefaultRun {
    state: EngineState,
    record: RunRecord,
    finetune: RunRecord,
    elapsed: Duration,
}

fn default_run() -> &'static DefaultRun {
    static CELL: OnceLock<DefaultRun> = OnceLock::new();
    CELL.get_or_init(|| {
        let start = Instant::now();
        let stream_config = StreamConfig::default();
        let engine_config = EngineConfig::default();
        let domains = generate(&stream_config).unwrap();
        let order: Vec<usize> = (0..stream_config.num_domains).collect();
        let (state, record) = run(&engine_config, &stream_config, &domains, &order).unwrap();
        let finetune = run_finetune(&engine_config, &stream_config, &domains, &order).unwrap();
        DefaultRun {
            state,
            record,
            finetune,
            elapsed: start.elapsed(),
        }
    })
}

struct FixtureRuns {
    base: RunRecord,
    cosine: RunRecord,
    linear: RunRecord,
    no_ball: RunRecord,
    single_layer: RunRecord,
}

/// The ablation fixture: default shift schedule, 50 train / 60 test per
/// class, 8 classifier epochs, 20 router epochs, seed 11.
fn fixture_runs() -> &'static FixtureRuns {
    static CELL: OnceLock<FixtureRuns> = OnceLock::new();
    CELL.get_or_init(|| {
        let stream_config = StreamConfig {
            train_per_class: 50,
            test_per_class: 60,
            seed: 11,
            ..Default::default()
        };
        let base_config = EngineConfig {
            epochs: 8,
            router_epochs: 20,
            seed: 11,
            ..Default::default()
        };
        let domains = generate(&stream_config).unwrap();
        let order: Vec<usize> = (0..stream_config.num_domains).collect();
        let run_with = |tweak: &dyn Fn(&mut EngineConfig)| -> RunRecord {
            let mut config = base_config.clone();
            tweak(&mut config);
            run(&config, &stream_config, &domains, &order).unwrap().1
        };
        FixtureRuns {
            base: run_with(&|_| {}),
            cosine: run_with(&|c| c.head_kind = HeadKind::Cosine),
            linear: run_with(&|c| c.head_kind = HeadKind::Linear),
            no_ball: run_with(&|c| c.ball_loss_enabled = false),
            single_layer: run_with(&|c| c.single_layer_router = true),
        }
    })
}

// ───────────────────────── criterion 1 ─────────────────────────

struct CompositeFixture {
    backbone: Backbone,
    shared: Vec<Vec<LoraAdapter>>,
    specific: Vec<Vec<LoraAdapter>>,
    head: StochasticHead,
    noise: Matrix,
    x: Vec<f64>,
    label: usize,
    lambda1: f64,
    tau: f64,
    /// Detached teacher distribution: computed once from a separate frozen
    /// shared-adapter configuration and held constant by the objective.
    teacher_logits: Vec<f64>,
}

impl CompositeFixture {
    fn new(seed: u64) -> Self {
        let mut rng = Rng::new(seed);
        let backbone = Backbone::new(BackboneConfig {
            num_layers: 2,
            embed_dim: 8,
            num_tokens: 3,
            num_heads: 2,
            mlp_hidden: 12,
            input_dim: 4,
            seed,
            ..Default::default()
        })
        .unwrap();
        let make_blocks = |rng: &mut Rng, nudge: f64| -> Vec<Vec<LoraAdapter>> {
            vec![[ProjKind::Query, ProjKind::Value]
                .iter()
                .map(|&t| {
                    let mut ad = LoraAdapter::new_shared(2, 8, 8, t, rng).unwrap();
                    ad.nudge_a(rng, nudge);
                    ad
                })
                .collect()]
        };
        let shared = make_blocks(&mut rng, 0.3);
        let specific = make_blocks(&mut rng, 0.3);
        let teacher = make_blocks(&mut rng, 0.25);
        let head = StochasticHead::new(3, 8, 16.0, 0.2, &mut rng);
        let noise = head.sample_noise(&mut rng);
        let x = rng.normal_vec(4);
        let label = rng.index(3);
        let teacher_stack = AdapterStack::from_blocks(&teacher);
        let teacher_trace = backbone.forward_cached(&x, &teacher_stack, 1).unwrap();
        let teacher_logits = head.forward_infer(teacher_trace.cls_at(1)).unwrap();
        Self {
            backbone,
            shared,
            specific,
            head,
            noise,
            x,
            label,
            lambda1: 5.0,
            tau: 2.0,
            teacher_logits,
        }
    }

    fn full_blocks(&self) -> Vec<Vec<LoraAdapter>> {
        vec![self.shared[0].clone(), self.specific[0].clone()]
    }

    /// Eq.-9-style composite with the classifier noise held fixed.
    fn loss(&self) -> f64 {
        let full = self.full_blocks();
        let stack = AdapterStack::from_blocks(&full);
        let trace = self.backbone.forward_with_adapters(&self.x, &stack).unwrap();
        let logits = self
            .head
            .forward_train_with_noise(trace.cls_at(2), &self.noise)
            .unwrap();
        let (ce, _) = cross_entropy(&logits, self.label).unwrap();

        let shared_stack = AdapterStack::from_blocks(&self.shared);
        let student = self
            .backbone
            .forward_cached(&self.x, &shared_stack, 1)
            .unwrap();
        let s_logits = self.head.forward_infer(student.cls_at(1)).unwrap();
        let (kd, _) = kd_loss(&s_logits, &self.teacher_logits, self.tau).unwrap();
        ce + self.lambda1 * kd
    }

    /// Analytic gradients assembled exactly like the training loop (without
    /// redistribution, which is an optimizer-side hook, not part of the
    /// objective).
    #[allow(clippy::type_complexity)]
    fn analytic_grads(&self) -> (Matrix, Matrix, Vec<Matrix>, Vec<Matrix>, Matrix, Matrix) {
        let full = self.full_blocks();
        let stack = AdapterStack::from_blocks(&full);
        let cache = self.backbone.forward_cached(&self.x, &stack, 2).unwrap();
        let z = cache.cls_at(2).to_vec();
        let logits = self.head.forward_train_with_noise(&z, &self.noise).unwrap();
        let (_, dlogits) = cross_entropy(&logits, self.label).unwrap();
        let (dmu_ce, dsigma_ce, dz) = self.head.backward_train(&z, &self.noise, &dlogits);
        let mut d_last = Matrix::zeros(3, 8);
        d_last.row_mut(0).copy_from_slice(&dz);
        let mut ce_grads = AdapterGrads::zeros_like(&stack);
        self.backbone
            .backward(&cache, &d_last, &stack, &mut ce_grads)
            .unwrap();

        let shared_stack = AdapterStack::from_blocks(&self.shared);
        let student = self
            .backbone
            .forward_cached(&self.x, &shared_stack, 1)
            .unwrap();
        let z_s = student.cls_at(1).to_vec();
        let s_logits = self.head.forward_infer(&z_s).unwrap();
        let (_, d_student) = kd_loss(&s_logits, &self.teacher_logits, self.tau).unwrap();
        let (dmu_kd, dz_s) = self.head.backward_infer(&z_s, &d_student);
        let mut d_prefix = Matrix::zeros(3, 8);
        d_prefix.row_mut(0).copy_from_slice(&dz_s);
        let mut kd_grads = AdapterGrads::zeros_like(&shared_stack);
        self.backbone
            .backward(&student, &d_prefix, &shared_stack, &mut kd_grads)
            .unwrap();

        let mut dmu = dmu_ce;
        dmu.add_scaled(&dmu_kd, self.lambda1);
        let shared_grads: Vec<Matrix> = (0..2)
            .map(|i| {
                let mut g = ce_grads.a(0, i).clone();
                g.add_scaled(kd_grads.a(0, i), self.lambda1);
                g
            })
            .collect();
        let specific_grads: Vec<Matrix> = (0..2).map(|i| ce_grads.a(1, i).clone()).collect();
        let dz_total = {
            // Embedding gradient of the CE path only (diagnostic).
            let mut m = Matrix::zeros(1, 8);
            m.row_mut(0).copy_from_slice(&dz);
            m
        };
        (dmu, dsigma_ce, shared_grads, specific_grads, dz_total, d_last)
    }
}

#[test]
fn criterion_01_gradient_suite() {
    let start = Instant::now();
    let mut cases = 0usize;
    let mut rng = Rng::new(20_001);

    // Cross-entropy.
    for _ in 0..120 {
        let n = 2 + rng.index(6);
        let logits = rng.normal_vec(n);
        let label = rng.index(n);
        let (_, grad) = cross_entropy(&logits, label).unwrap();
        let numeric =
            finite_diff_grad(|x| cross_entropy(x, label).unwrap().0, &logits, 1e-6).unwrap();
        assert!(grad_ok(&grad, &numeric), "ce case {cases}");
        cases += 1;
    }

    // Distillation at tau = 2.
    for _ in 0..120 {
        let n = 2 + rng.index(6);
        let student = rng.normal_vec(n);
        let teacher = rng.normal_vec(n);
        let (_, grad) = kd_loss(&student, &teacher, 2.0).unwrap();
        let numeric =
            finite_diff_grad(|x| kd_loss(x, &teacher, 2.0).unwrap().0, &student, 1e-6).unwrap();
        assert!(grad_ok(&grad, &numeric), "kd case {cases}");
        cases += 1;
    }

    // Ball-generator hinge, away from kinks.
    let mut ball_done = 0;
    while ball_done < 120 {
        let dim = 2 + rng.index(3);
        let mut centers = BTreeMap::new();
        for d in 0..3usize {
            let c: Vec<f64> = rng.normal_vec(dim).iter().map(|v| v * 3.0).collect();
            centers.insert(d, c);
        }
        let z = rng.normal_vec(dim);
        let own = rng.index(3);
        let d_own: f64 = z
            .iter()
            .zip(&centers[&own])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let near_kink = centers.iter().any(|(&j, c)| {
            j != own && {
                let d_other: f64 = z
                    .iter()
                    .zip(c)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                (d_own + 1.0 - d_other).abs() < 1e-4
            }
        });
        if near_kink {
            continue;
        }
        let (_, grads) = ball_loss(&[z.clone()], &[own], &centers, 1.0).unwrap();
        let numeric = finite_diff_grad(
            |zz| ball_loss(&[zz.to_vec()], &[own], &centers, 1.0).unwrap().0,
            &z,
            1e-6,
        )
        .unwrap();
        assert!(grad_ok(&grads[0], &numeric), "ball case {ball_done}");
        ball_done += 1;
        cases += 1;
    }

    // Stochastic-head reparameterized gradients (mu, sigma, z).
    for i in 0..80 {
        let head = StochasticHead::new(3, 6, 16.0, 0.2, &mut rng);
        let z = rng.normal_vec(6);
        let noise = head.sample_noise(&mut rng);
        let label = rng.index(3);
        let logits = head.forward_train_with_noise(&z, &noise).unwrap();
        let (_, dlogits) = cross_entropy(&logits, label).unwrap();
        let (dmu, dsigma, dz) = head.backward_train(&z, &noise, &dlogits);

        let loss_with = |mu: &[f64], sigma: &[f64], zz: &[f64]| {
            let mut probe = head.clone();
            probe.mu_mut().data_mut().copy_from_slice(mu);
            probe.sigma_mut().data_mut().copy_from_slice(sigma);
            let l = probe.forward_train_with_noise(zz, &noise).unwrap();
            cross_entropy(&l, label).unwrap().0
        };
        let mu0 = head.mu().data().to_vec();
        let sg0 = head.sigma().data().to_vec();
        let num_mu = finite_diff_grad(|m| loss_with(m, &sg0, &z), &mu0, 1e-6).unwrap();
        let num_sg = finite_diff_grad(|s| loss_with(&mu0, s, &z), &sg0, 1e-6).unwrap();
        let num_z = finite_diff_grad(|zz| loss_with(&mu0, &sg0, zz), &z, 1e-6).unwrap();
        assert!(grad_ok(dmu.data(), &num_mu), "head mu case {i}");
        assert!(grad_ok(dsigma.data(), &num_sg), "head sigma case {i}");
        assert!(grad_ok(&dz, &num_z), "head z case {i}");
        cases += 1;
    }

    // Full composite objective on a 2-block backbone.
    for i in 0..60 {
        let fixture = CompositeFixture::new(40_000 + i);
        let (dmu, dsigma, shared_grads, specific_grads, _, _) = fixture.analytic_grads();

        let mu0 = fixture.head.mu().data().to_vec();
        let num_mu = finite_diff_grad(
            |m| {
                let mut probe = fixture.head.clone();
                probe.mu_mut().data_mut().copy_from_slice(m);
                let mut f2 = CompositeFixture {
                    head: probe,
                    ..clone_fixture(&fixture)
                };
                f2.noise = fixture.noise.clone();
                f2.loss()
            },
            &mu0,
            1e-6,
        )
        .unwrap();
        assert!(grad_ok(dmu.data(), &num_mu), "composite mu case {i}");

        let sg0 = fixture.head.sigma().data().to_vec();
        let num_sg = finite_diff_grad(
            |s| {
                let mut probe = fixture.head.clone();
                probe.sigma_mut().data_mut().copy_from_slice(s);
                let mut f2 = CompositeFixture {
                    head: probe,
                    ..clone_fixture(&fixture)
                };
                f2.noise = fixture.noise.clone();
                f2.loss()
            },
            &sg0,
            1e-6,
        )
        .unwrap();
        assert!(grad_ok(dsigma.data(), &num_sg), "composite sigma case {i}");

        for (idx, expected) in shared_grads.iter().enumerate() {
            let base = fixture.shared[0][idx].a().data().to_vec();
            let numeric = finite_diff_grad(
                |theta| {
                    let mut f2 = clone_fixture(&fixture);
                    f2.shared[0][idx].set_a_data(theta);
                    f2.loss()
                },
                &base,
                1e-6,
            )
            .unwrap();
            assert!(
                grad_ok(expected.data(), &numeric),
                "composite shared A case {i} adapter {idx}"
            );
        }
        for (idx, expected) in specific_grads.iter().enumerate() {
            let base = fixture.specific[0][idx].a().data().to_vec();
            let numeric = finite_diff_grad(
                |theta| {
                    let mut f2 = clone_fixture(&fixture);
                    f2.specific[0][idx].set_a_data(theta);
                    f2.loss()
                },
                &base,
                1e-6,
            )
            .unwrap();
            assert!(
                grad_ok(expected.data(), &numeric),
                "composite specific A case {i} adapter {idx}"
            );
        }
        cases += 1;
    }

    let elapsed = start.elapsed();
    assert!(cases >= 500, "only {cases} gradient cases");
    assert!(
        elapsed < Duration::from_secs(60),
        "gradient suite took {elapsed:?}"
    );
    pass(
        1,
        "gradient suite",
        &format!("{cases} cases within 1e-4 relative in {elapsed:.2?}"),
    );
}

fn clone_fixture(f: &CompositeFixture) -> CompositeFixture {
    CompositeFixture {
        backbone: f.backbone.clone(),
        shared: f.shared.clone(),
        specific: f.specific.clone(),
        head: f.head.clone(),
        noise: f.noise.clone(),
        x: f.x.clone(),
        label: f.label,
        lambda1: f.lambda1,
        tau: f.tau,
        teacher_logits: f.teacher_logits.clone(),
    }
}

// ───────────────────────── criteria 2–4 ─────────────────────────

#[test]
fn criterion_02_shared_adapter_orthogonality() {
    // At creation, across seeds.
    let mut worst: f64 = 0.0;
    for seed in 0..50 {
        let mut rng = Rng::new(seed);
        let bank = AdapterBank::new(
            6,
            3,
            8,
            32,
            &[ProjKind::Query, ProjKind::Value],
            &mut rng,
        )
        .unwrap();
        for blk in bank.shared() {
            for ad in blk {
                worst = worst.max(ad.max_orthogonality_defect());
            }
        }
    }
    assert!(worst < 1e-8, "creation defect {worst}");

    // After a full training run (the shared default-run state).
    let state = &default_run().state;
    let mut worst_after: f64 = 0.0;
    for blk in state.bank().shared() {
        for ad in blk {
            worst_after = worst_after.max(ad.max_orthogonality_defect());
        }
    }
    assert!(worst_after < 1e-8, "post-training defect {worst_after}");
    pass(
        2,
        "orthogonality",
        &format!("max defect {worst:.2e} at creation, {worst_after:.2e} after training"),
    );
}

#[test]
fn criterion_03_zero_init_identity() {
    let backbone = Backbone::new(BackboneConfig::default()).unwrap();
    let mut rng = Rng::new(303);
    let blocks: Vec<Vec<LoraAdapter>> = (0..6)
        .map(|_| {
            [ProjKind::Query, ProjKind::Value]
                .iter()
                .map(|&t| LoraAdapter::new_shared(8, 32, 32, t, &mut rng).unwrap())
                .collect()
        })
        .collect();
    let stack = AdapterStack::from_blocks(&blocks);
    for _ in 0..20 {
        let x = rng.normal_vec(16);
        let plain = backbone.forward_plain(&x).unwrap();
        let adapted = backbone.forward_with_adapters(&x, &stack).unwrap();
        for layer in 0..plain.len() {
            assert_eq!(
                plain.layer(layer).data(),
                adapted.layer(layer).data(),
                "layer {layer} differs"
            );
        }
    }
    pass(3, "zero-init identity", "20 inputs, all layers bitwise equal");
}

#[test]
fn criterion_04_redistribution_mask() {
    let mut rng = Rng::new(404);
    for case in 0..1000 {
        let d = 2 + rng.index(63);
        let norms: Vec<f64> = (0..d).map(|_| rng.uniform() * 10.0).collect();
        let mask = redistribution_mask(&norms).unwrap();
        let sum: f64 = mask.iter().sum();
        assert!(
            (sum - d as f64).abs() < 1e-12,
            "case {case}: sum {sum} for d {d}"
        );
    }
    let uniform = redistribution_mask(&[0.7; 16]).unwrap();
    assert!(uniform.iter().all(|m| (m - 1.0).abs() < 1e-12));
    pass(
        4,
        "redistribution",
        "1000 masks sum to d within 1e-12; uniform norms give the identity mask",
    );
}

// ───────────────────────── criteria 5–6 ─────────────────────────

fn planted_two_clusters(rng: &mut Rng, per: usize) -> (Matrix, Vec<usize>) {
    let mut data = Matrix::zeros(2 * per, 2);
    for i in 0..per {
        data.set(i, 0, -5.0 + rng.normal());
        data.set(i, 1, rng.normal());
        data.set(per + i, 0, 5.0 + rng.normal());
        data.set(per + i, 1, rng.normal());
    }
    let mut labels = vec![0usize; per];
    labels.extend(std::iter::repeat_n(1usize, per));
    (data, labels)
}

#[test]
fn criterion_05_em_properties() {
    // Monotone log-likelihood on 100 seeded datasets.
    for seed in 0..100u64 {
        let mut rng = Rng::new(50_000 + seed);
        let (data, _) = planted_two_clusters(&mut rng, 60);
        let model = fit_em(&data, 2, &mut Rng::new(60_000 + seed), 80, 1e-12).unwrap();
        for w in model.ll_trace().windows(2) {
            assert!(
                w[1] >= w[0] - 1e-9,
                "seed {seed}: ll dropped {} -> {}",
                w[0],
                w[1]
            );
        }
    }

    // C=1 closed form to 1e-10.
    for seed in 0..20u64 {
        let mut rng = Rng::new(70_000 + seed);
        let (data, _) = planted_two_clusters(&mut rng, 50);
        let model = fit_em(&data, 1, &mut Rng::new(seed), 50, 1e-9).unwrap();
        let n = data.rows() as f64;
        let mean: Vec<f64> = (0..2)
            .map(|j| (0..data.rows()).map(|i| data.get(i, j)).sum::<f64>() / n)
            .collect();
        for j in 0..2 {
            assert!((model.mean(0)[j] - mean[j]).abs() < 1e-10);
        }
        let mut cov = Matrix::zeros(2, 2);
        for i in 0..data.rows() {
            for a in 0..2 {
                for b in 0..2 {
                    cov.set(
                        a,
                        b,
                        cov.get(a, b) + (data.get(i, a) - mean[a]) * (data.get(i, b) - mean[b]) / n,
                    );
                }
            }
        }
        let jitter = 1e-6 * cov.trace() / 2.0;
        for a in 0..2 {
            cov.set(a, a, cov.get(a, a) + jitter);
        }
        assert!(model.cov(0).sub(&cov).max_abs() < 1e-10);
    }

    // Two-cluster recovery within 0.2 of the planted means (and within 0.05
    // of the per-cluster empirical means, the generation-label oracle).
    for seed in 0..10u64 {
        let mut rng = Rng::new(80_000 + seed);
        let (data, labels) = planted_two_clusters(&mut rng, 800);
        let model = fit_em(&data, 2, &mut Rng::new(seed), 200, 1e-12).unwrap();
        let (neg, pos) = if model.mean(0)[0] < model.mean(1)[0] {
            (0, 1)
        } else {
            (1, 0)
        };
        for (comp, planted) in [(neg, [-5.0, 0.0]), (pos, [5.0, 0.0])] {
            let err: f64 = model
                .mean(comp)
                .iter()
                .zip(&planted)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err < 0.2, "seed {seed}: planted-mean error {err}");
        }
        for (comp, cluster) in [(neg, 0usize), (pos, 1usize)] {
            let members: Vec<usize> = (0..data.rows())
                .filter(|&i| labels[i] == cluster)
                .collect();
            let emp: Vec<f64> = (0..2)
                .map(|j| {
                    members.iter().map(|&i| data.get(i, j)).sum::<f64>() / members.len() as f64
                })
                .collect();
            let err: f64 = model
                .mean(comp)
                .iter()
                .zip(&emp)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            assert!(err < 0.05, "seed {seed}: empirical-oracle error {err}");
        }
        assert!((model.weights()[0] - 0.5).abs() < 0.1);
    }
    pass(
        5,
        "EM",
        "100 monotone traces, closed-form C=1 to 1e-10, planted clusters recovered",
    );
}

#[test]
fn criterion_06_sampling_fidelity() {
    let mut rng = Rng::new(606);
    let a = rng.normal_matrix(3, 3, 0.7);
    let k = a.matmul_transb(&a).add(&Matrix::identity(3));
    let nu = vec![2.0, -1.0, 0.5];
    let model = GmmModel::from_parts(vec![1.0], vec![nu.clone()], vec![k.clone()], 0, 0).unwrap();
    let n = 100_000;
    let draws = model.sample(n, &mut Rng::new(607)).unwrap();

    let mean: Vec<f64> = (0..3)
        .map(|j| (0..n).map(|i| draws.get(i, j)).sum::<f64>() / n as f64)
        .collect();
    let nu_norm: f64 = nu.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mean_err: f64 = mean
        .iter()
        .zip(&nu)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    assert!(mean_err / nu_norm < 0.05, "mean error {mean_err}");

    let mut cov = Matrix::zeros(3, 3);
    for i in 0..n {
        for a2 in 0..3 {
            for b in 0..3 {
                cov.set(
                    a2,
                    b,
                    cov.get(a2, b)
                        + (draws.get(i, a2) - mean[a2]) * (draws.get(i, b) - mean[b]) / n as f64,
                );
            }
        }
    }
    let cov_err = cov.sub(&k).frob_norm() / k.frob_norm();
    assert!(cov_err < 0.10, "cov error {cov_err}");
    pass(
        6,
        "sampling fidelity",
        &format!(
            "1e5 draws: mean {:.2}% rel, cov {:.2}% Frobenius rel",
            100.0 * mean_err / nu_norm,
            100.0 * cov_err
        ),
    );
}

// ───────────────────────── criterion 7 ─────────────────────────

#[test]
fn criterion_07_routing_semantics() {
    let stream_config = StreamConfig {
        num_domains: 2,
        num_classes: 3,
        train_per_class: 30,
        test_per_class: 25,
        seed: 13,
        ..Default::default()
    };
    let engine_config = EngineConfig {
        epochs: 3,
        router_epochs: 8,
        seed: 13,
        ..Default::default()
    };
    let domains = generate(&stream_config).unwrap();
    let (mut state, _) = run(&engine_config, &stream_config, &domains, &[0, 1]).unwrap();

    // Vacuous threshold: every sample exits at layer 1 with layer 1's call.
    state.set_router_threshold(f64::MIN_POSITIVE);
    for dom in &domains {
        for (x, _) in &dom.test {
            let outcome = state.infer(x).unwrap();
            assert_eq!(outcome.exit_layer, 1);
            let trace = state.backbone().forward_plain(x).unwrap();
            let (expected, _) = state.router().layer_confidence(&trace, 1).unwrap();
            assert_eq!(outcome.domain, expected);
        }
    }

    // Impossible threshold: routing equals the argmax over layer confidences.
    state.set_router_threshold(1.1);
    for dom in &domains {
        for (x, _) in &dom.test {
            let outcome = state.infer(x).unwrap();
            let trace = state.backbone().forward_plain(x).unwrap();
            let mut best = (0usize, f64::NEG_INFINITY, 0usize);
            for layer in 1..=6 {
                let (pred, conf) = state.router().layer_confidence(&trace, layer).unwrap();
                if conf > best.1 {
                    best = (pred, conf, layer);
                }
            }
            assert_eq!(outcome.domain, best.0);
            assert_eq!(outcome.exit_layer, best.2);
        }
    }

    // Unanimity: with one trained domain every threshold gives one answer.
    let mut single = EngineState::new(
        EngineConfig {
            epochs: 2,
            router_epochs: 2,
            seed: 14,
            ..Default::default()
        },
        stream_config.raw_dim,
        3,
        2,
    )
    .unwrap();
    single.train_domain(&domains[0]).unwrap();
    single.train_router_step(&domains[0]).unwrap();
    for threshold in [f64::MIN_POSITIVE, 0.5, 0.9, 1.5] {
        single.set_router_threshold(threshold);
        for (x, _) in domains[0].test.iter().take(10) {
            assert_eq!(single.infer(x).unwrap().domain, 0);
        }
    }
    pass(
        7,
        "routing semantics",
        "vacuous threshold exits at layer 1; impossible threshold equals argmax; unanimity holds",
    );
}

// ───────────────────────── criteria 8–11 ─────────────────────────

#[test]
fn criterion_08_forgetting_mitigation() {
    let fixture = default_run();
    let domain1_curve = |record: &RunRecord, oracle: bool| -> (f64, f64) {
        let first = &record.steps[0].rows[0];
        let last = &record.steps.last().unwrap().rows[0];
        if oracle {
            (first.oracle_accuracy, last.oracle_accuracy)
        } else {
            (first.accuracy, last.accuracy)
        }
    };
    let (ft_first, ft_last) = domain1_curve(&fixture.finetune, false);
    let ft_drop = (ft_first - ft_last) * 100.0;
    assert!(
        ft_drop >= 15.0,
        "fine-tune only lost {ft_drop:.1} points on domain 1"
    );
    let (or_first, or_last) = domain1_curve(&fixture.record, true);
    let oracle_drop = (or_first - or_last) * 100.0;
    assert!(
        oracle_drop < 2.0,
        "oracle-routed lost {oracle_drop:.1} points on domain 1"
    );
    assert!(
        fixture.elapsed < Duration::from_secs(600),
        "fixture took {:?}",
        fixture.elapsed
    );
    pass(
        8,
        "forgetting mitigation",
        &format!(
            "fine-tune -{ft_drop:.1} points vs oracle -{oracle_drop:.1} points on domain 1, fixture in {:.1?}",
            fixture.elapsed
        ),
    );
}

#[test]
fn criterion_09_router_quality() {
    let dc = default_run().record.dc_last;
    assert!(dc >= 0.95, "default-stream DC accuracy {dc:.4}");
    let fixtures = fixture_runs();
    let multi = fixtures.base.dc_last;
    let single = fixtures.single_layer.dc_last;
    assert!(
        multi >= single,
        "multi-depth router ({multi:.4}) worse than single-layer ({single:.4})"
    );
    pass(
        9,
        "router quality",
        &format!("default DC {dc:.4} >= 0.95; multi-depth {multi:.4} >= single-layer {single:.4}"),
    );
}

#[test]
fn criterion_10_ablation_directions() {
    let fixtures = fixture_runs();
    let (stoch, cos, lin) = (
        fixtures.base.last,
        fixtures.cosine.last,
        fixtures.linear.last,
    );
    assert!(stoch >= cos, "stochastic {stoch:.4} < cosine {cos:.4}");
    assert!(cos >= lin, "cosine {cos:.4} < linear {lin:.4}");
    let (ball_on, ball_off) = (fixtures.base.dc_last, fixtures.no_ball.dc_last);
    assert!(
        ball_on > ball_off,
        "removing the ball loss did not reduce DC ({ball_on:.4} vs {ball_off:.4})"
    );
    pass(
        10,
        "ablation directions",
        &format!(
            "heads {stoch:.4} >= {cos:.4} >= {lin:.4}; ball on {ball_on:.4} > off {ball_off:.4}"
        ),
    );
}

#[test]
fn criterion_11_oracle_gap() {
    let record = &default_run().record;
    let gap = (record.oracle_last - record.last).abs();
    assert!(
        gap <= 0.03,
        "routed last {:.4} vs oracle last {:.4}: gap {gap:.4}",
        record.last,
        record.oracle_last
    );
    pass(
        11,
        "oracle gap",
        &format!(
            "routed {:.4} within {:.2} points of oracle {:.4}",
            record.last,
            gap * 100.0,
            record.oracle_last
        ),
    );
}

// ───────────────────────── criterion 12 ─────────────────────────

#[test]
fn criterion_12_sweep_determinism() {
    let dir = std::env::temp_dir().join(format!("conec-acceptance-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    let conf = dir.join("sweep.conf");
    std::fs::write(
        &conf,
        "num_domains = 3
num_classes = 3
raw_dim = 12
train_per_class = 25
test_per_class = 20
epochs = 3
router_epochs = 5
num_orders = 3
seed = 77
",
    )
    .unwrap();
    for out in ["a", "b"] {
        let status = std::process::Command::new(env!("CARGO_BIN_EXE_conec"))
            .args([
                "--mode",
                "sweep",
                "--config",
                conf.to_str().unwrap(),
                "--out",
                dir.join(out).to_str().unwrap(),
            ])
            .status()
            .unwrap();
        assert!(status.success());
    }
    let a = std::fs::read(dir.join("a/metrics.csv")).unwrap();
    let b = std::fs::read(dir.join("b/metrics.csv")).unwrap();
    assert_eq!(a, b, "sweep metrics.csv differ between identical runs");
    pass(
        12,
        "determinism",
        &format!("two sweeps, byte-identical metrics.csv ({} bytes)", a.len()),
    );
}
