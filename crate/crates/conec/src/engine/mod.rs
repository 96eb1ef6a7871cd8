//! The per-domain training and inference orchestrator.
//!
//! For each arriving domain the engine (1) allocates a fresh specific
//! adapter set and a fresh temporary classifier, (2) minimizes
//! `ce + λ₁·kd` over the shared adapters (early blocks), the new specific
//! adapters (late blocks) and the classifier — distillation is active from
//! the second domain on, with the teacher being the frozen shared-adapter
//! snapshot of the previous domain and the redistribution mask scaling the
//! shared-`A` distillation gradients row-wise, (3) replaces the classifier
//! means with class prototypes and snapshots the shared adapters, and
//! (4) fits per-layer GMMs on the adapter-free traces and trains the
//! domain router against real + replayed embeddings.
//!
//! At test time a sample is routed from its adapter-free trace (early exit
//! across the per-layer domain classifiers), then classified by the routed
//! domain's adapters and head. Everything is deterministic given the
//! config seed.

mod checkpoint;
mod sgd;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointContents};
pub use sgd::{sgd_step, sgd_step_slice};

use std::collections::BTreeMap;

use crate::adapters::{
    apply_redistribution, redistribution_mask, AdapterBank, AdapterGrads, ProjKind,
};
use crate::backbone::{Backbone, BackboneConfig};
use crate::domainid::{DomainRouterState, RouterTrainParams};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, HeadKind};
use crate::losses::{cross_entropy, joint_dil_loss, kd_loss};
use crate::mixtures::{fit_em, GmmModel};
use crate::numkit::{Matrix, Rng};
use crate::stream::{DomainData, StreamConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct EngineConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub tau: f64,
    /// Early-exit confidence threshold ς.
    pub threshold: f64,
    pub margin: f64,
    pub rank: usize,
    pub lr_lora: f64,
    pub lr_dc: f64,
    pub lr_tm: f64,
    pub momentum: f64,
    pub batch: usize,
    pub epochs: usize,
    pub router_epochs: usize,
    /// Shared/specific split point l: blocks `1..=l` carry shared adapters.
    pub split: usize,
    pub head_kind: HeadKind,
    pub eta: f64,
    pub sigma_init: f64,
    pub sample_noise_at_inference: bool,
    pub trainable_specific_b: bool,
    /// Ablation: specific adapters on every block, no shared set, no KD.
    pub specific_only: bool,
    pub ball_loss_enabled: bool,
    pub single_layer_router: bool,
    pub gmm_components: usize,
    pub gmm_max_iter: usize,
    pub gmm_tol: f64,
    pub synthetic_cap: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub num_tokens: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub lora_targets: Vec<ProjKind>,
    pub seed: u64,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            lambda1: 5.0,
            lambda2: 2.0,
            tau: 2.0,
            threshold: 0.9,
            margin: 1.0,
            rank: 8,
            lr_lora: 0.02,
            lr_dc: 2e-3,
            lr_tm: 1e-4,
            momentum: 0.9,
            batch: 64,
            epochs: 20,
            router_epochs: 40,
            split: 3,
            head_kind: HeadKind::Stochastic,
            eta: 16.0,
            sigma_init: 0.05,
            sample_noise_at_inference: false,
            trainable_specific_b: false,
            specific_only: false,
            ball_loss_enabled: true,
            single_layer_router: false,
            gmm_components: 2,
            gmm_max_iter: 100,
            gmm_tol: 1e-6,
            synthetic_cap: 512,
            num_layers: 6,
            embed_dim: 32,
            num_tokens: 5,
            num_heads: 4,
            mlp_hidden: 64,
            lora_targets: vec![ProjKind::Query, ProjKind::Value],
            seed: 0,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("margin", self.margin),
        ] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::Config(format!(
                    "{name} must be nonnegative, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("tau", self.tau),
            ("threshold", self.threshold),
            ("lr_lora", self.lr_lora),
            ("lr_dc", self.lr_dc),
            ("lr_tm", self.lr_tm),
            ("eta", self.eta),
        ] {
            if v <= 0.0 || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.batch == 0 || self.epochs == 0 || self.router_epochs == 0 || self.rank == 0 {
            return Err(Error::Config(
                "batch, epochs, router_epochs and rank must be positive".into(),
            ));
        }
        if self.split >= self.num_layers {
            return Err(Error::Config(format!(
                "split {} must be below num_layers {}",
                self.split, self.num_layers
            )));
        }
        if self.gmm_components == 0 {
            return Err(Error::Config("gmm_components must be positive".into()));
        }
        Ok(())
    }

    pub fn backbone_config(&self, input_dim: usize) -> BackboneConfig {
        BackboneConfig {
            num_layers: self.num_layers,
            embed_dim: self.embed_dim,
            num_tokens: self.num_tokens,
            num_heads: self.num_heads,
            mlp_hidden: self.mlp_hidden,
            input_dim,
            lora_targets: self.lora_targets.clone(),
            seed: self.seed,
        }
    }

    fn effective_split(&self) -> usize {
        if self.specific_only {
            0
        } else {
            self.split
        }
    }

    fn router_params(&self) -> RouterTrainParams {
        RouterTrainParams {
            epochs: self.router_epochs,
            batch: self.batch,
            lr_classifier: self.lr_dc,
            lr_transform: self.lr_tm,
            momentum: self.momentum,
            lambda2: self.lambda2,
            margin: self.margin,
            ball_enabled: self.ball_loss_enabled,
            single_layer: self.single_layer_router,
        }
    }
}

/// Per-domain evaluation numbers after some training step.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    /// Original domain id of the evaluated test set.
    pub eval_domain: usize,
    pub accuracy: f64,
    pub dc_accuracy: f64,
    pub oracle_accuracy: f64,
    pub exit_layer_mean: f64,
}

/// Evaluation against all seen domains after training the `after_domain`-th
/// domain (1-based arrival count).
#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub after_domain: usize,
    pub rows: Vec<EvalRow>,
    pub avg_accuracy: f64,
    pub avg_oracle: f64,
    pub avg_dc: f64,
    pub avg_exit_layer: f64,
}

impl StepMetrics {
    /// Signed routed-minus-oracle accuracy gap. Routing misassignments
    /// usually cost accuracy, so this is expected to be nonpositive up to
    /// sampling luck — an individual mis-routed sample can still draw a
    /// correct label from the wrong domain's head.
    pub fn oracle_gap(&self) -> f64 {
        self.avg_accuracy - self.avg_oracle
    }
}

/// Full-run metrics: the per-step matrix plus the headline aggregates.
#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    /// Original domain ids in arrival order.
    pub order: Vec<usize>,
    pub steps: Vec<StepMetrics>,
    /// Mean over steps of the per-step average accuracy.
    pub avg: f64,
    /// Average accuracy over seen domains at the final step.
    pub last: f64,
    pub oracle_last: f64,
    pub dc_last: f64,
    pub exit_layer_last: f64,
}

impl RunRecord {
    pub(crate) fn from_steps(order: Vec<usize>, steps: Vec<StepMetrics>) -> Self {
        let avg = steps.iter().map(|s| s.avg_accuracy).sum::<f64>() / steps.len().max(1) as f64;
        let last_step = steps.last();
        Self {
            avg,
            last: last_step.map(|s| s.avg_accuracy).unwrap_or(0.0),
            oracle_last: last_step.map(|s| s.avg_oracle).unwrap_or(0.0),
            dc_last: last_step.map(|s| s.avg_dc).unwrap_or(0.0),
            exit_layer_last: last_step.map(|s| s.avg_exit_layer).unwrap_or(0.0),
            order,
            steps,
        }
    }
}

/// Outcome of routing + classifying one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferenceOutcome {
    pub label: usize,
    /// Predicted domain in arrival order.
    pub domain: usize,
    /// Backbone layer (1-based) where the router exited.
    pub exit_layer: usize,
}

#[derive(Debug, Clone, Default)]
pub struct DomainTrainReport {
    pub epoch_losses: Vec<f64>,
    pub final_ce: f64,
    pub final_kd: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RouterStepReport {
    pub per_layer_accuracy: Vec<f64>,
    pub synthetic_per_domain: usize,
}

/// All of a run's learned state.
pub struct EngineState {
    config: EngineConfig,
    num_classes: usize,
    max_domains: usize,
    backbone: Backbone,
    bank: AdapterBank,
    heads: Vec<ClassifierHead>,
    snapshot: Option<crate::adapters::SharedSnapshot>,
    router: DomainRouterState,
    gmms: BTreeMap<(usize, usize), GmmModel>,
    /// Original domain ids in arrival order.
    domain_ids: Vec<usize>,
    router_trained: usize,
}

impl EngineState {
    pub fn new(
        config: EngineConfig,
        input_dim: usize,
        num_classes: usize,
        max_domains: usize,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = Backbone::new(config.backbone_config(input_dim))?;
        let mut bank_rng = Rng::new(config.seed).derive(0xBA01);
        let bank = AdapterBank::new(
            config.num_layers,
            config.effective_split(),
            config.rank,
            config.embed_dim,
            &config.lora_targets,
            &mut bank_rng,
        )?;
        let mut router_rng = Rng::new(config.seed).derive(0x2007);
        let router = DomainRouterState::new(
            config.num_layers,
            config.embed_dim,
            max_domains,
            config.threshold,
            &mut router_rng,
        )?;
        Ok(Self {
            config,
            num_classes,
            max_domains,
            backbone,
            bank,
            heads: Vec::new(),
            snapshot: None,
            router,
            gmms: BTreeMap::new(),
            domain_ids: Vec::new(),
            router_trained: 0,
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    pub fn bank(&self) -> &AdapterBank {
        &self.bank
    }

    pub fn heads(&self) -> &[ClassifierHead] {
        &self.heads
    }

    pub fn router(&self) -> &DomainRouterState {
        &self.router
    }

    /// Adjusts the early-exit confidence threshold ς of the trained router.
    pub fn set_router_threshold(&mut self, threshold: f64) {
        self.router.set_threshold(threshold);
    }

    pub fn gmms(&self) -> &BTreeMap<(usize, usize), GmmModel> {
        &self.gmms
    }

    pub fn snapshot(&self) -> Option<&crate::adapters::SharedSnapshot> {
        self.snapshot.as_ref()
    }

    pub fn trained_domains(&self) -> usize {
        self.domain_ids.len()
    }

    pub fn domain_ids(&self) -> &[usize] {
        &self.domain_ids
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn max_domains(&self) -> usize {
        self.max_domains
    }

    pub(crate) fn from_parts(
        config: EngineConfig,
        num_classes: usize,
        max_domains: usize,
        backbone: Backbone,
        bank: AdapterBank,
        heads: Vec<ClassifierHead>,
        snapshot: Option<crate::adapters::SharedSnapshot>,
        router: DomainRouterState,
        gmms: BTreeMap<(usize, usize), GmmModel>,
        domain_ids: Vec<usize>,
        router_trained: usize,
    ) -> Self {
        Self {
            config,
            num_classes,
            max_domains,
            backbone,
            bank,
            heads,
            snapshot,
            router,
            gmms,
            domain_ids,
            router_trained,
        }
    }

    fn derived(&self, stream: u64) -> Rng {
        Rng::new(self.config.seed).derive(stream)
    }

    /// Trains LoRAs and the temporary classifier on one domain, then
    /// replaces the classifier means with prototypes and snapshots the
    /// shared adapters.
    pub fn train_domain(&mut self, data: &DomainData) -> Result<DomainTrainReport> {
        if self.domain_ids.contains(&data.domain) {
            return Err(Error::InvalidInput(format!(
                "domain {} was already trained",
                data.domain
            )));
        }
        if self.domain_ids.len() >= self.max_domains {
            return Err(Error::Config(format!(
                "engine sized for {} domains",
                self.max_domains
            )));
        }
        if data.train.is_empty() {
            return Err(Error::InvalidInput("empty training set".into()));
        }
        let b = self.domain_ids.len();
        let depth = self.config.num_layers;
        let split = self.config.effective_split();
        let kd_active =
            b > 0 && split > 0 && !self.config.specific_only && self.config.lambda1 > 0.0;

        let targets = self.config.lora_targets.clone();
        let mut adapter_rng = self.derived(0xADA0 + b as u64);
        self.bank.add_domain(
            self.config.rank,
            self.config.embed_dim,
            &targets,
            self.config.trainable_specific_b,
            &mut adapter_rng,
        )?;
        let mut head_rng = self.derived(0xEAD0 + b as u64);
        let mut head = ClassifierHead::new(
            self.config.head_kind,
            self.num_classes,
            self.config.embed_dim,
            self.config.eta,
            self.config.sigma_init,
            &mut head_rng,
        );

        // Redistribution masks from the previous domain's shared A norms.
        let masks: Option<Vec<Vec<Vec<f64>>>> = if kd_active {
            let snapshot = self
                .snapshot
                .as_ref()
                .expect("snapshot exists after the first domain");
            let mut all = Vec::with_capacity(split);
            for block in 0..split {
                let mut per_adapter = Vec::new();
                for idx in 0..snapshot.adapters()[block].len() {
                    per_adapter.push(redistribution_mask(snapshot.row_norms(block, idx))?);
                }
                all.push(per_adapter);
            }
            Some(all)
        } else {
            None
        };

        let mut train_rng = self.derived(0x7EA0 + b as u64);
        let n = data.train.len();
        let mut indices: Vec<usize> = (0..n).collect();
        let mut report = DomainTrainReport::default();

        // Momentum state, allocated once per domain.
        let mut vel_shared: Vec<Vec<Matrix>> = (0..split)
            .map(|blk| {
                self.bank.shared()[blk]
                    .iter()
                    .map(|ad| Matrix::zeros(ad.out_dim(), ad.rank()))
                    .collect()
            })
            .collect();
        let mut vel_specific: Vec<Vec<(Matrix, Option<Matrix>)>> = self
            .bank
            .specific(b)
            .iter()
            .map(|blk| {
                blk.iter()
                    .map(|ad| {
                        (
                            Matrix::zeros(ad.out_dim(), ad.rank()),
                            ad.trainable_b()
                                .then(|| Matrix::zeros(ad.rank(), ad.in_dim())),
                        )
                    })
                    .collect()
            })
            .collect();
        let mut vel_head: Vec<Matrix> = head
            .clone()
            .params_mut()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();

        for epoch in 0..self.config.epochs {
            train_rng.shuffle(&mut indices);
            let mut epoch_loss = 0.0;
            let mut epoch_ce = 0.0;
            let mut epoch_kd = 0.0;
            let mut batches = 0.0;
            for batch in indices.chunks(self.config.batch) {
                let (ce_sum, kd_sum) = self.train_batch(
                    batch,
                    data,
                    b,
                    &mut head,
                    &mut train_rng,
                    kd_active,
                    &masks,
                    &mut vel_shared,
                    &mut vel_specific,
                    &mut vel_head,
                )?;
                let mean_ce = ce_sum / batch.len() as f64;
                let mean_kd = kd_sum / batch.len() as f64;
                let joint = joint_dil_loss(mean_ce, mean_kd, self.config.lambda1)?;
                if !joint.total.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite loss (ce {mean_ce}, kd {mean_kd}) on domain {} epoch {epoch}",
                        data.domain
                    )));
                }
                epoch_loss += joint.total;
                epoch_ce += mean_ce;
                epoch_kd += mean_kd;
                batches += 1.0;
            }
            report.epoch_losses.push(epoch_loss / batches);
            report.final_ce = epoch_ce / batches;
            report.final_kd = epoch_kd / batches;
        }

        // Prototype replacement with the final adapter configuration.
        if head.supports_prototypes() {
            let mut embeddings = Vec::with_capacity(n);
            let mut labels = Vec::with_capacity(n);
            {
                let stack = self.bank.stack_for(b);
                for (x, y) in &data.train {
                    let cache = self.backbone.forward_cached(x, &stack, depth)?;
                    embeddings.push(cache.cls_at(depth).to_vec());
                    labels.push(*y);
                }
            }
            let protos = crate::heads::compute_prototypes(&embeddings, &labels, self.num_classes)?;
            head.replace_means(&protos)?;
        }

        // Train accuracy with the finished head.
        let mut correct = 0usize;
        {
            let stack = self.bank.stack_for(b);
            for (x, y) in &data.train {
                let trace = self.backbone.forward_with_adapters(x, &stack)?;
                let logits = head.forward_infer(trace.cls_at(depth))?;
                if argmax(&logits) == *y {
                    correct += 1;
                }
            }
        }
        report.train_accuracy = correct as f64 / n as f64;

        self.heads.push(head);
        if split > 0 {
            self.snapshot = Some(self.bank.snapshot_shared());
        }
        self.domain_ids.push(data.domain);
        Ok(report)
    }

    #[allow(clippy::too_many_arguments)]
    fn train_batch(
        &mut self,
        batch: &[usize],
        data: &DomainData,
        b: usize,
        head: &mut ClassifierHead,
        rng: &mut Rng,
        kd_active: bool,
        masks: &Option<Vec<Vec<Vec<f64>>>>,
        vel_shared: &mut [Vec<Matrix>],
        vel_specific: &mut [Vec<(Matrix, Option<Matrix>)>],
        vel_head: &mut [Matrix],
    ) -> Result<(f64, f64)> {
        let depth = self.config.num_layers;
        let split = self.config.effective_split();

        // Gradient accumulation phase: immutable borrows of bank/backbone.
        let (mut ce_grads, mut kd_grads, head_grads, kd_head_grads, ce_sum, kd_sum) = {
            let full_stack = self.bank.stack_for(b);
            let shared_stack = self.bank.shared_prefix_stack();
            let mut ce_grads = AdapterGrads::zeros_like(&full_stack);
            let mut kd_grads = AdapterGrads::zeros_like(&shared_stack);
            let mut head_grads: Vec<Matrix> = Vec::new();
            let mut kd_head_grads: Vec<Matrix> = Vec::new();
            let mut ce_sum = 0.0;
            let mut kd_sum = 0.0;

            for &i in batch {
                let (x, y) = &data.train[i];
                // Classification path through the full adapter stack.
                let cache = self.backbone.forward_cached(x, &full_stack, depth)?;
                let z = cache.cls_at(depth).to_vec();
                let noise = head.draw_noise(rng);
                let logits = head.forward_train(&z, noise.as_ref())?;
                let (ce, dlogits) = cross_entropy(&logits, *y)?;
                ce_sum += ce;
                let hg = head.backward_train(&z, noise.as_ref(), &dlogits);
                accumulate_params(&mut head_grads, &hg.params);
                let mut d_last = Matrix::zeros(self.config.num_tokens, self.config.embed_dim);
                d_last.row_mut(0).copy_from_slice(&hg.dz);
                self.backbone
                    .backward(&cache, &d_last, &full_stack, &mut ce_grads)?;

                // Distillation path: shared prefix only, deterministic head,
                // teacher from the previous domain's shared snapshot,
                // detached.
                if kd_active {
                    let snapshot = self.snapshot.as_ref().expect("snapshot for kd");
                    let student_cache = self.backbone.forward_cached(x, &shared_stack, split)?;
                    let z_student = student_cache.cls_at(split).to_vec();
                    let teacher_cache =
                        self.backbone.forward_cached(x, &snapshot.stack(), split)?;
                    let z_teacher = teacher_cache.cls_at(split);
                    let student_logits = head.forward_infer(&z_student)?;
                    let teacher_logits = head.forward_infer(z_teacher)?;
                    let (kd, d_student) =
                        kd_loss(&student_logits, &teacher_logits, self.config.tau)?;
                    kd_sum += kd;
                    let hg_kd = head.backward_infer(&z_student, &d_student);
                    accumulate_params(&mut kd_head_grads, &hg_kd.params);
                    let mut d_prefix =
                        Matrix::zeros(self.config.num_tokens, self.config.embed_dim);
                    d_prefix.row_mut(0).copy_from_slice(&hg_kd.dz);
                    self.backbone.backward(
                        &student_cache,
                        &d_prefix,
                        &shared_stack,
                        &mut kd_grads,
                    )?;
                }
            }
            (ce_grads, kd_grads, head_grads, kd_head_grads, ce_sum, kd_sum)
        };

        let inv_n = 1.0 / batch.len() as f64;
        let (lr, momentum) = (self.config.lr_lora, self.config.momentum);
        ce_grads.scale(inv_n);
        kd_grads.scale(inv_n);

        // Shared adapters: CE gradient plus redistributed KD gradient.
        for block in 0..split {
            for idx in 0..self.bank.shared()[block].len() {
                let mut grad = ce_grads.a(block, idx).clone();
                if kd_active {
                    let mask = &masks.as_ref().expect("masks when kd active")[block][idx];
                    let redistributed = apply_redistribution(kd_grads.a(block, idx), mask)?;
                    grad.add_scaled(&redistributed, self.config.lambda1);
                }
                sgd_step(
                    self.bank.shared_mut()[block][idx].a_mut(),
                    &grad,
                    &mut vel_shared[block][idx],
                    lr,
                    momentum,
                );
            }
        }

        // Specific adapters of the current domain: CE gradient only.
        for block in split..depth {
            for idx in 0..self.bank.specific(b)[block - split].len() {
                let grad_a = ce_grads.a(block, idx).clone();
                let grad_b = ce_grads.b(block, idx).cloned();
                let spec = &mut self.bank.specific_mut(b)[block - split][idx];
                sgd_step(
                    spec.a_mut(),
                    &grad_a,
                    &mut vel_specific[block - split][idx].0,
                    lr,
                    momentum,
                );
                if let (Some(gb), Some(vb)) =
                    (grad_b, vel_specific[block - split][idx].1.as_mut())
                {
                    sgd_step(spec.b_mut(), &gb, vb, lr, momentum);
                }
            }
        }

        // Head parameters: CE plus λ₁·KD (the KD student logits pass through
        // the deterministic head, so its μ-type parameters see KD gradient).
        let mut params = head.params_mut();
        for (j, param) in params.iter_mut().enumerate() {
            let mut grad = head_grads[j].scale(inv_n);
            if kd_active && j < kd_head_grads.len() {
                grad.add_scaled(&kd_head_grads[j], self.config.lambda1 * inv_n);
            }
            sgd_step(param, &grad, &mut vel_head[j], lr, momentum);
        }
        drop(params);
        head.after_step();

        Ok((ce_sum, kd_sum))
    }

    /// Collects adapter-free traces for the just-trained domain, freezes
    /// per-layer centers, fits per-layer GMMs, replays past domains, and
    /// trains the router.
    pub fn train_router_step(&mut self, data: &DomainData) -> Result<RouterStepReport> {
        let b = self.router_trained;
        if self.domain_ids.len() != b + 1 || self.domain_ids[b] != data.domain {
            return Err(Error::InvalidInput(format!(
                "router step expects the just-trained domain (arrival {}), got domain {}",
                b, data.domain
            )));
        }
        let layers = self.config.num_layers;

        // Router, centers and GMMs all operate on scale-normalized CLS
        // embeddings so replayed and real features share one scale.
        let mut real_by_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        for (x, _) in &data.train {
            let trace = self.backbone.forward_plain(x)?;
            for layer in 1..=layers {
                real_by_layer[layer - 1].push(crate::domainid::router_embed(trace.cls_at(layer)));
            }
        }

        for (layer_idx, pool) in real_by_layer.iter().enumerate() {
            let dim = self.config.embed_dim;
            let mut center = vec![0.0; dim];
            for z in pool {
                for (c, v) in center.iter_mut().zip(z) {
                    *c += v;
                }
            }
            for c in &mut center {
                *c /= pool.len() as f64;
            }
            self.router.set_center(b, layer_idx, center);

            let flat: Vec<f64> = pool.iter().flatten().copied().collect();
            let samples = Matrix::from_vec(pool.len(), dim, flat)?;
            let mut gmm_rng = self.derived(0x6330 + (b * 131 + layer_idx) as u64);
            let mut model = fit_em(
                &samples,
                self.config.gmm_components.min(pool.len()),
                &mut gmm_rng,
                self.config.gmm_max_iter,
                self.config.gmm_tol,
            )
            .map_err(|e| {
                Error::Numeric(format!(
                    "GMM fit for domain {} layer {}: {e}",
                    data.domain,
                    layer_idx + 1
                ))
            })?;
            model.layer = layer_idx + 1;
            model.domain = b;
            self.gmms.insert((b, layer_idx), model);
        }

        let synth = if b == 0 {
            0
        } else {
            self.config.synthetic_cap.min(data.train.len() / b).max(1)
        };
        let mut router_rng = self.derived(0x2002 + b as u64 * 977);
        let per_layer_accuracy = self.router.train(
            &real_by_layer,
            b,
            &self.gmms,
            synth,
            &self.config.router_params(),
            &mut router_rng,
        )?;
        self.router_trained += 1;
        Ok(RouterStepReport {
            per_layer_accuracy,
            synthetic_per_domain: synth,
        })
    }

    /// Full inference: route from the adapter-free trace, then classify with
    /// the routed domain's adapters and head.
    pub fn infer(&self, x: &[f64]) -> Result<InferenceOutcome> {
        if self.domain_ids.is_empty() {
            return Err(Error::InvalidInput("no trained domains".into()));
        }
        let trace = self.backbone.forward_plain(x)?;
        let decision = self.router.route(&trace)?;
        let label = self.classify_as(x, decision.domain, None)?;
        Ok(InferenceOutcome {
            label,
            domain: decision.domain,
            exit_layer: decision.exit_layer,
        })
    }

    /// Classification under a caller-supplied (oracle) domain index.
    pub fn classify_as(
        &self,
        x: &[f64],
        arrival_domain: usize,
        noise_rng: Option<&mut Rng>,
    ) -> Result<usize> {
        if arrival_domain >= self.heads.len() {
            return Err(Error::InvalidInput(format!(
                "domain index {arrival_domain} not trained"
            )));
        }
        let stack = self.bank.stack_for(arrival_domain);
        let trace = self.backbone.forward_with_adapters(x, &stack)?;
        let z = trace.cls_at(self.config.num_layers);
        let head = &self.heads[arrival_domain];
        let logits = match noise_rng {
            Some(rng) => {
                let noise = head.draw_noise(rng);
                head.forward_train(z, noise.as_ref())?
            }
            None => head.forward_infer(z)?,
        };
        Ok(argmax(&logits))
    }

    /// Evaluates routed and oracle accuracy on the test sets of all seen
    /// domains, passed in arrival order.
    pub fn evaluate(&self, seen: &[&DomainData]) -> Result<StepMetrics> {
        if seen.len() != self.domain_ids.len() || seen.is_empty() {
            return Err(Error::InvalidInput(format!(
                "evaluate wants the {} seen domains in arrival order",
                self.domain_ids.len()
            )));
        }
        let mut sample_rng = self.derived(0xE7A1);
        let mut rows = Vec::with_capacity(seen.len());
        for (arrival, data) in seen.iter().enumerate() {
            if data.domain != self.domain_ids[arrival] {
                return Err(Error::InvalidInput(format!(
                    "seen[{arrival}] is domain {}, expected {}",
                    data.domain, self.domain_ids[arrival]
                )));
            }
            let mut routed_ok = 0usize;
            let mut dc_ok = 0usize;
            let mut oracle_ok = 0usize;
            let mut exit_sum = 0usize;
            for (x, y) in &data.test {
                let outcome = if self.config.sample_noise_at_inference {
                    let trace = self.backbone.forward_plain(x)?;
                    let decision = self.router.route(&trace)?;
                    let label = self.classify_as(x, decision.domain, Some(&mut sample_rng))?;
                    InferenceOutcome {
                        label,
                        domain: decision.domain,
                        exit_layer: decision.exit_layer,
                    }
                } else {
                    self.infer(x)?
                };
                routed_ok += usize::from(outcome.label == *y);
                dc_ok += usize::from(outcome.domain == arrival);
                exit_sum += outcome.exit_layer;
                let oracle_label = self.classify_as(x, arrival, None)?;
                oracle_ok += usize::from(oracle_label == *y);
            }
            let n = data.test.len().max(1) as f64;
            rows.push(EvalRow {
                eval_domain: data.domain,
                accuracy: routed_ok as f64 / n,
                dc_accuracy: dc_ok as f64 / n,
                oracle_accuracy: oracle_ok as f64 / n,
                exit_layer_mean: exit_sum as f64 / n,
            });
        }
        let k = rows.len() as f64;
        Ok(StepMetrics {
            after_domain: seen.len(),
            avg_accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / k,
            avg_oracle: rows.iter().map(|r| r.oracle_accuracy).sum::<f64>() / k,
            avg_dc: rows.iter().map(|r| r.dc_accuracy).sum::<f64>() / k,
            avg_exit_layer: rows.iter().map(|r| r.exit_layer_mean).sum::<f64>() / k,
            rows,
        })
    }
}

fn accumulate_params(acc: &mut Vec<Matrix>, grads: &[Matrix]) {
    if acc.is_empty() {
        *acc = grads.to_vec();
        return;
    }
    for (a, g) in acc.iter_mut().zip(grads) {
        a.add_scaled(g, 1.0);
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0)
}

/// Runs the full per-domain pipeline over `order` (indices into `domains`),
/// evaluating after every domain.
pub fn run(
    engine_config: &EngineConfig,
    stream_config: &StreamConfig,
    domains: &[DomainData],
    order: &[usize],
) -> Result<(EngineState, RunRecord)> {
    let mut state = EngineState::new(
        engine_config.clone(),
        stream_config.raw_dim,
        stream_config.num_classes,
        stream_config.num_domains,
    )?;
    let mut steps = Vec::with_capacity(order.len());
    let mut seen: Vec<&DomainData> = Vec::with_capacity(order.len());
    for &idx in order {
        let data = domains.get(idx).ok_or_else(|| {
            Error::Config(format!("order references domain {idx} outside the stream"))
        })?;
        state.train_domain(data)?;
        state.train_router_step(data)?;
        seen.push(data);
        steps.push(state.evaluate(&seen)?);
    }
    let record = RunRecord::from_steps(order.to_vec(), steps);
    Ok((state, record))
}

/// Naive sequential fine-tuning baseline: one adapter set on every block
/// and one persistent classifier, trained with plain cross-entropy domain
/// after domain. No isolation, no distillation, no routing — the forgetting
/// reference point.
pub fn run_finetune(
    engine_config: &EngineConfig,
    stream_config: &StreamConfig,
    domains: &[DomainData],
    order: &[usize],
) -> Result<RunRecord> {
    engine_config.validate()?;
    let depth = engine_config.num_layers;
    let backbone = Backbone::new(engine_config.backbone_config(stream_config.raw_dim))?;
    let mut bank_rng = Rng::new(engine_config.seed).derive(0xF101);
    let mut bank = AdapterBank::new(
        depth,
        depth, // one shared set on every block, no specific sets
        engine_config.rank,
        engine_config.embed_dim,
        &engine_config.lora_targets,
        &mut bank_rng,
    )?;
    let mut head = ClassifierHead::new(
        engine_config.head_kind,
        stream_config.num_classes,
        engine_config.embed_dim,
        engine_config.eta,
        engine_config.sigma_init,
        &mut Rng::new(engine_config.seed).derive(0xF102),
    );

    let mut steps: Vec<StepMetrics> = Vec::new();
    let mut seen: Vec<&DomainData> = Vec::new();
    for (arrival, &idx) in order.iter().enumerate() {
        let data = domains.get(idx).ok_or_else(|| {
            Error::Config(format!("order references domain {idx} outside the stream"))
        })?;
        let mut rng = Rng::new(engine_config.seed).derive(0xF110 + arrival as u64);
        let n = data.train.len();
        let mut indices: Vec<usize> = (0..n).collect();

        let mut vel_shared: Vec<Vec<Matrix>> = bank
            .shared()
            .iter()
            .map(|blk| {
                blk.iter()
                    .map(|ad| Matrix::zeros(ad.out_dim(), ad.rank()))
                    .collect()
            })
            .collect();
        let mut vel_head: Vec<Matrix> = head
            .clone()
            .params_mut()
            .iter()
            .map(|p| Matrix::zeros(p.rows(), p.cols()))
            .collect();

        for _ in 0..engine_config.epochs {
            rng.shuffle(&mut indices);
            for batch in indices.chunks(engine_config.batch) {
                let (grads, head_grads) = {
                    let stack = bank.shared_prefix_stack();
                    let mut grads = AdapterGrads::zeros_like(&stack);
                    let mut head_grads: Vec<Matrix> = Vec::new();
                    for &i in batch {
                        let (x, y) = &data.train[i];
                        let cache = backbone.forward_cached(x, &stack, depth)?;
                        let z = cache.cls_at(depth).to_vec();
                        let noise = head.draw_noise(&mut rng);
                        let logits = head.forward_train(&z, noise.as_ref())?;
                        let (ce, dlogits) = cross_entropy(&logits, *y)?;
                        if !ce.is_finite() {
                            return Err(Error::Numeric("non-finite fine-tune loss".into()));
                        }
                        let hg = head.backward_train(&z, noise.as_ref(), &dlogits);
                        accumulate_params(&mut head_grads, &hg.params);
                        let mut d_last =
                            Matrix::zeros(engine_config.num_tokens, engine_config.embed_dim);
                        d_last.row_mut(0).copy_from_slice(&hg.dz);
                        backbone.backward(&cache, &d_last, &stack, &mut grads)?;
                    }
                    (grads, head_grads)
                };
                let inv_n = 1.0 / batch.len() as f64;
                for block in 0..depth {
                    for idx2 in 0..bank.shared()[block].len() {
                        let grad = grads.a(block, idx2).scale(inv_n);
                        sgd_step(
                            bank.shared_mut()[block][idx2].a_mut(),
                            &grad,
                            &mut vel_shared[block][idx2],
                            engine_config.lr_lora,
                            engine_config.momentum,
                        );
                    }
                }
                let mut params = head.params_mut();
                for (j, param) in params.iter_mut().enumerate() {
                    let grad = head_grads[j].scale(inv_n);
                    sgd_step(
                        param,
                        &grad,
                        &mut vel_head[j],
                        engine_config.lr_lora,
                        engine_config.momentum,
                    );
                }
                drop(params);
                head.after_step();
            }
        }

        seen.push(data);
        let stack = bank.shared_prefix_stack();
        let mut rows = Vec::new();
        for data_eval in &seen {
            let mut ok = 0usize;
            for (x, y) in &data_eval.test {
                let trace = backbone.forward_with_adapters(x, &stack)?;
                let logits = head.forward_infer(trace.cls_at(depth))?;
                ok += usize::from(argmax(&logits) == *y);
            }
            let acc = ok as f64 / data_eval.test.len().max(1) as f64;
            rows.push(EvalRow {
                eval_domain: data_eval.domain,
                accuracy: acc,
                dc_accuracy: 1.0,
                oracle_accuracy: acc,
                exit_layer_mean: depth as f64,
            });
        }
        let k = rows.len() as f64;
        steps.push(StepMetrics {
            after_domain: seen.len(),
            avg_accuracy: rows.iter().map(|r| r.accuracy).sum::<f64>() / k,
            avg_oracle: rows.iter().map(|r| r.oracle_accuracy).sum::<f64>() / k,
            avg_dc: 1.0,
            avg_exit_layer: depth as f64,
            rows,
        });
    }
    Ok(RunRecord::from_steps(order.to_vec(), steps))
}
