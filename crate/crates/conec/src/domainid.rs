//! Auxiliary domain classification.
//!
//! Every backbone layer `ℓ = 1..L` gets an independent pair: a two-layer
//! transformation MLP `κ_ℓ` (it de-biases synthetic replay embeddings) and a
//! linear local domain classifier on top. The router consumes the CLS rows
//! of the *adapter-free* trace, so classifier training never perturbs — and
//! is never perturbed by — the LoRA/classifier weights.
//!
//! Inference walks the layers in order and exits at the first one whose
//! softmax confidence clears the threshold ς; if none does, the globally
//! most confident layer decides. Training at domain `b` mixes the real
//! current-domain embeddings with synthetic draws from the stored per-layer
//! GMMs of domains `1..b−1` (class-balanced batches) and minimizes
//! cross-entropy plus the ball-generator term that pulls transformed
//! embeddings toward their own frozen domain center and a margin away from
//! the others.

use std::collections::BTreeMap;

use crate::backbone::LayerTrace;
use crate::error::{Error, Result};
use crate::losses::ball_loss;
use crate::mixtures::GmmModel;
use crate::numkit::{dot, gelu, gelu_grad, norm, softmax, Matrix, Rng};

/// Scale-normalized router embedding: `√d · z/‖z‖`. Raw CLS rows of a
/// frozen random backbone have tiny, depth-dependent norms; projecting to a
/// fixed radius puts every layer's features on one scale so the domain
/// classifiers (and the GMMs replaying them) see O(1) inputs.
pub fn router_embed(cls: &[f64]) -> Vec<f64> {
    let n = norm(cls);
    if n == 0.0 {
        return cls.to_vec();
    }
    let scale = 4.0 * (cls.len() as f64).sqrt() / n;
    cls.iter().map(|v| v * scale).collect()
}

/// Two-layer MLP `d → hidden → d` with GELU in the middle.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformMlp {
    w1: Matrix,
    b1: Vec<f64>,
    w2: Matrix,
    b2: Vec<f64>,
    pub layer: usize,
}

pub struct MlpCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
}

impl TransformMlp {
    pub fn new(dim: usize, hidden: usize, layer: usize, rng: &mut Rng) -> Self {
        let s1 = (2.0 / dim as f64).sqrt();
        let s2 = (2.0 / hidden as f64).sqrt();
        Self {
            w1: rng.normal_matrix(hidden, dim, s1),
            b1: vec![0.0; hidden],
            w2: rng.normal_matrix(dim, hidden, s2),
            b2: vec![0.0; dim],
            layer,
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.cols()
    }

    pub fn hidden(&self) -> usize {
        self.w1.rows()
    }

    pub(crate) fn from_parts(
        w1: Matrix,
        b1: Vec<f64>,
        w2: Matrix,
        b2: Vec<f64>,
        layer: usize,
    ) -> Self {
        Self { w1, b1, w2, b2, layer }
    }

    pub(crate) fn weights(&self) -> (&Matrix, &[f64], &Matrix, &[f64]) {
        (&self.w1, &self.b1, &self.w2, &self.b2)
    }

    pub fn forward(&self, z: &[f64]) -> (Vec<f64>, MlpCache) {
        let hidden = self.hidden();
        let dim = self.dim();
        let mut pre = vec![0.0; hidden];
        for h in 0..hidden {
            pre[h] = dot(self.w1.row(h), z) + self.b1[h];
        }
        let act: Vec<f64> = pre.iter().map(|&v| gelu(v)).collect();
        let mut out = vec![0.0; dim];
        for o in 0..dim {
            out[o] = dot(self.w2.row(o), &act) + self.b2[o];
        }
        (
            out,
            MlpCache {
                input: z.to_vec(),
                pre,
                act,
            },
        )
    }

    /// Backward pass; accumulates parameter gradients and returns `dz`.
    pub fn backward(&self, cache: &MlpCache, dout: &[f64], grads: &mut MlpGrads) -> Vec<f64> {
        let hidden = self.hidden();
        let dim = self.dim();
        let mut dact = vec![0.0; hidden];
        for o in 0..dim {
            let g = dout[o];
            if g == 0.0 {
                continue;
            }
            let row = self.w2.row(o);
            let grow = grads.w2.row_mut(o);
            for h in 0..hidden {
                grow[h] += g * cache.act[h];
                dact[h] += g * row[h];
            }
            grads.b2[o] += g;
        }
        let mut dz = vec![0.0; dim];
        for h in 0..hidden {
            let dpre = dact[h] * gelu_grad(cache.pre[h]);
            if dpre == 0.0 {
                continue;
            }
            let row = self.w1.row(h);
            let grow = grads.w1.row_mut(h);
            for j in 0..dim {
                grow[j] += dpre * cache.input[j];
                dz[j] += dpre * row[j];
            }
            grads.b1[h] += dpre;
        }
        dz
    }
}

#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &TransformMlp) -> Self {
        Self {
            w1: Matrix::zeros(mlp.hidden(), mlp.dim()),
            b1: vec![0.0; mlp.hidden()],
            w2: Matrix::zeros(mlp.dim(), mlp.hidden()),
            b2: vec![0.0; mlp.dim()],
        }
    }
}

/// Linear map `d → B_max` domain logits; logits beyond the active-domain
/// count are masked out of every softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainClassifier {
    w: Matrix,
    b: Vec<f64>,
    pub layer: usize,
}

impl DomainClassifier {
    pub fn new(dim: usize, max_domains: usize, layer: usize, rng: &mut Rng) -> Self {
        Self {
            w: rng.normal_matrix(max_domains, dim, 0.01),
            b: vec![0.0; max_domains],
            layer,
        }
    }

    pub fn max_domains(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub(crate) fn from_parts(w: Matrix, b: Vec<f64>, layer: usize) -> Self {
        Self { w, b, layer }
    }

    pub(crate) fn weights(&self) -> (&Matrix, &[f64]) {
        (&self.w, &self.b)
    }

    /// Logits over the first `active` domains only.
    pub fn forward(&self, h: &[f64], active: usize) -> Vec<f64> {
        (0..active)
            .map(|m| dot(self.w.row(m), h) + self.b[m])
            .collect()
    }

    pub fn backward(
        &self,
        h: &[f64],
        dlogits: &[f64],
        grads: &mut ClassifierGrads,
    ) -> Vec<f64> {
        let dim = self.dim();
        let mut dh = vec![0.0; dim];
        for (m, &g) in dlogits.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let row = self.w.row(m);
            let grow = grads.w.row_mut(m);
            for j in 0..dim {
                grow[j] += g * h[j];
                dh[j] += g * row[j];
            }
            grads.b[m] += g;
        }
        dh
    }
}

#[derive(Debug, Clone)]
pub struct ClassifierGrads {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl ClassifierGrads {
    pub fn zeros_like(clf: &DomainClassifier) -> Self {
        Self {
            w: Matrix::zeros(clf.max_domains(), clf.dim()),
            b: vec![0.0; clf.max_domains()],
        }
    }
}

/// Routing outcome for one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RouteDecision {
    /// Predicted domain index (training order).
    pub domain: usize,
    /// Backbone layer (1-based) whose classifier made the call.
    pub exit_layer: usize,
    pub confidence: f64,
}

/// Hyperparameters for one router training pass.
#[derive(Debug, Clone)]
pub struct RouterTrainParams {
    pub epochs: usize,
    pub batch: usize,
    pub lr_classifier: f64,
    pub lr_transform: f64,
    pub momentum: f64,
    pub lambda2: f64,
    pub margin: f64,
    pub ball_enabled: bool,
    /// When set, only the deepest layer's pair is trained and consulted
    /// (the single-classifier ablation).
    pub single_layer: bool,
}

impl Default for RouterTrainParams {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch: 64,
            lr_classifier: 2e-3,
            lr_transform: 1e-4,
            momentum: 0.9,
            lambda2: 2.0,
            margin: 1.0,
            ball_enabled: true,
            single_layer: false,
        }
    }
}

/// Per-layer transformation MLPs + local domain classifiers + the frozen
/// ball centers, plus the early-exit confidence threshold.
#[derive(Debug, Clone)]
pub struct DomainRouterState {
    layers: Vec<(TransformMlp, DomainClassifier)>,
    threshold: f64,
    /// Raw-embedding domain centers keyed by (domain, layer index 0-based).
    centers: BTreeMap<(usize, usize), Vec<f64>>,
    active_domains: usize,
    single_layer: bool,
}

impl DomainRouterState {
    pub fn new(
        num_layers: usize,
        dim: usize,
        max_domains: usize,
        threshold: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if threshold <= 0.0 {
            return Err(Error::Config(format!(
                "confidence threshold must be positive, got {threshold}"
            )));
        }
        let hidden = 1024.min(4 * dim);
        let layers = (0..num_layers)
            .map(|l| {
                let mut layer_rng = rng.derive(0x40_0000 + l as u64);
                (
                    TransformMlp::new(dim, hidden, l + 1, &mut layer_rng),
                    DomainClassifier::new(dim, max_domains, l + 1, &mut layer_rng),
                )
            })
            .collect();
        Ok(Self {
            layers,
            threshold,
            centers: BTreeMap::new(),
            active_domains: 0,
            single_layer: false,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    pub fn set_threshold(&mut self, threshold: f64) {
        self.threshold = threshold;
    }

    pub fn active_domains(&self) -> usize {
        self.active_domains
    }

    pub fn centers(&self) -> &BTreeMap<(usize, usize), Vec<f64>> {
        &self.centers
    }

    pub fn layer_params(&self, layer_idx: usize) -> (&TransformMlp, &DomainClassifier) {
        let (mlp, clf) = &self.layers[layer_idx];
        (mlp, clf)
    }

    pub(crate) fn from_parts(
        layers: Vec<(TransformMlp, DomainClassifier)>,
        threshold: f64,
        centers: BTreeMap<(usize, usize), Vec<f64>>,
        active_domains: usize,
        single_layer: bool,
    ) -> Self {
        Self {
            layers,
            threshold,
            centers,
            active_domains,
            single_layer,
        }
    }

    pub(crate) fn parts(
        &self,
    ) -> (
        &[(TransformMlp, DomainClassifier)],
        &BTreeMap<(usize, usize), Vec<f64>>,
        bool,
    ) {
        (&self.layers, &self.centers, self.single_layer)
    }

    /// Registers the frozen ball center for (domain, layer).
    pub fn set_center(&mut self, domain: usize, layer_idx: usize, center: Vec<f64>) {
        self.centers.insert((domain, layer_idx), center);
    }

    /// Full masked probability vector of one layer's classifier: entries
    /// beyond the active-domain count carry exactly zero mass.
    pub fn layer_probabilities(&self, trace: &LayerTrace, layer: usize) -> Result<Vec<f64>> {
        if layer == 0 || layer >= trace.len() {
            return Err(Error::InvalidInput(format!(
                "layer {layer} out of range 1..={}",
                trace.len() - 1
            )));
        }
        if self.active_domains == 0 {
            return Err(Error::InvalidInput(
                "router has no trained domains".into(),
            ));
        }
        let (mlp, clf) = &self.layers[layer - 1];
        let embed = router_embed(trace.cls_at(layer));
        let (h, _) = mlp.forward(&embed);
        let logits = clf.forward(&h, self.active_domains);
        let probs = softmax(&logits, 1.0)?;
        let mut full = vec![0.0; clf.max_domains()];
        full[..probs.len()].copy_from_slice(&probs);
        Ok(full)
    }

    /// Most confident domain at one layer: `(argmax, max softmax prob)`.
    pub fn layer_confidence(&self, trace: &LayerTrace, layer: usize) -> Result<(usize, f64)> {
        let probs = self.layer_probabilities(trace, layer)?;
        let (domain, conf) = probs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .expect("at least one active domain");
        Ok((domain, *conf))
    }

    fn layer_range(&self) -> std::ops::RangeInclusive<usize> {
        if self.single_layer {
            self.num_layers()..=self.num_layers()
        } else {
            1..=self.num_layers()
        }
    }

    /// Early-exit routing: the earliest layer whose confidence clears ς
    /// decides; otherwise the globally most confident layer does.
    pub fn route(&self, trace: &LayerTrace) -> Result<RouteDecision> {
        let mut best: Option<RouteDecision> = None;
        for layer in self.layer_range() {
            let (domain, confidence) = self.layer_confidence(trace, layer)?;
            let decision = RouteDecision {
                domain,
                exit_layer: layer,
                confidence,
            };
            if confidence >= self.threshold {
                return Ok(decision);
            }
            if best.map(|b| confidence > b.confidence).unwrap_or(true) {
                best = Some(decision);
            }
        }
        Ok(best.expect("router has at least one layer"))
    }

    /// Trains every layer's (κ, classifier) pair for the arrival of
    /// `current_domain` (0-based training order). `real_by_layer[l]` holds
    /// the current domain's CLS embeddings at backbone layer `l+1`;
    /// synthetic embeddings for each past domain are drawn from `gmms`.
    /// Returns the per-layer training accuracy measured after the pass.
    pub fn train(
        &mut self,
        real_by_layer: &[Vec<Vec<f64>>],
        current_domain: usize,
        gmms: &BTreeMap<(usize, usize), GmmModel>,
        synth_per_domain: usize,
        params: &RouterTrainParams,
        rng: &mut Rng,
    ) -> Result<Vec<f64>> {
        if real_by_layer.len() != self.num_layers() {
            return Err(Error::InvalidShape(format!(
                "{} layers of embeddings for a {}-layer router",
                real_by_layer.len(),
                self.num_layers()
            )));
        }
        self.active_domains = self.active_domains.max(current_domain + 1);
        self.single_layer = params.single_layer;
        let active = self.active_domains;

        // Synthetic replay pools, one per (past domain, layer).
        let mut pools: Vec<Vec<(Vec<f64>, usize)>> = Vec::new();
        for layer_idx in 0..self.num_layers() {
            let mut pool: Vec<(Vec<f64>, usize)> = real_by_layer[layer_idx]
                .iter()
                .map(|z| (z.clone(), current_domain))
                .collect();
            for past in 0..current_domain {
                let model = gmms.get(&(past, layer_idx)).ok_or_else(|| {
                    Error::Config(format!(
                        "no GMM stored for past domain {past} at layer {}",
                        layer_idx + 1
                    ))
                })?;
                let mut sample_rng = rng.derive(0x600 + (past * 131 + layer_idx) as u64);
                let draws = model.sample(synth_per_domain, &mut sample_rng)?;
                for i in 0..draws.rows() {
                    pool.push((draws.row(i).to_vec(), past));
                }
            }
            pools.push(pool);
        }

        let layer_indices: Vec<usize> = if params.single_layer {
            vec![self.num_layers() - 1]
        } else {
            (0..self.num_layers()).collect()
        };

        let mut accuracies = vec![0.0; self.num_layers()];
        for &layer_idx in &layer_indices {
            let mut layer_rng = rng.derive(0x700 + layer_idx as u64);
            self.train_layer(
                layer_idx,
                &pools[layer_idx],
                current_domain,
                active,
                params,
                &mut layer_rng,
            )?;
            accuracies[layer_idx] = self.layer_pool_accuracy(layer_idx, &pools[layer_idx], active);
        }
        Ok(accuracies)
    }

    fn layer_pool_accuracy(
        &self,
        layer_idx: usize,
        pool: &[(Vec<f64>, usize)],
        active: usize,
    ) -> f64 {
        let (mlp, clf) = &self.layers[layer_idx];
        let correct = pool
            .iter()
            .filter(|(z, y)| {
                let (h, _) = mlp.forward(z);
                let logits = clf.forward(&h, active);
                let pred = logits
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(m, _)| m)
                    .unwrap_or(0);
                pred == *y
            })
            .count();
        correct as f64 / pool.len().max(1) as f64
    }

    fn train_layer(
        &mut self,
        layer_idx: usize,
        pool: &[(Vec<f64>, usize)],
        current_domain: usize,
        active: usize,
        params: &RouterTrainParams,
        rng: &mut Rng,
    ) -> Result<()> {
        // Split the pool per domain for class-balanced batching.
        let mut by_domain: Vec<Vec<usize>> = vec![Vec::new(); active];
        for (i, (_, y)) in pool.iter().enumerate() {
            by_domain[*y].push(i);
        }
        let present: Vec<usize> = (0..active).filter(|&d| !by_domain[d].is_empty()).collect();
        let quota = (params.batch / present.len().max(1)).max(1);
        let batches_per_epoch = present
            .iter()
            .map(|&d| by_domain[d].len().div_ceil(quota))
            .max()
            .unwrap_or(0);

        let (mlp, clf) = &mut self.layers[layer_idx];
        let mut vel_mlp = MlpGrads::zeros_like(mlp);
        let mut vel_clf = ClassifierGrads::zeros_like(clf);

        for _ in 0..params.epochs {
            for indices in by_domain.iter_mut() {
                rng.shuffle(indices);
            }
            for batch_no in 0..batches_per_epoch {
                let mut batch: Vec<usize> = Vec::with_capacity(params.batch);
                for &d in &present {
                    let pool_d = &by_domain[d];
                    for k in 0..quota {
                        let idx = (batch_no * quota + k) % pool_d.len();
                        batch.push(pool_d[idx]);
                    }
                }

                let mut g_mlp = MlpGrads::zeros_like(mlp);
                let mut g_clf = ClassifierGrads::zeros_like(clf);
                let inv_n = 1.0 / batch.len() as f64;

                // Transformed embeddings first: the ball term needs them all.
                let mut transformed = Vec::with_capacity(batch.len());
                let mut caches = Vec::with_capacity(batch.len());
                let mut labels = Vec::with_capacity(batch.len());
                for &i in &batch {
                    let (z, y) = &pool[i];
                    let (h, cache) = mlp.forward(z);
                    transformed.push(h);
                    caches.push(cache);
                    labels.push(*y);
                }

                let mut dh_ball: Option<Vec<Vec<f64>>> = None;
                if params.ball_enabled && current_domain > 0 {
                    let centers: BTreeMap<usize, Vec<f64>> = (0..active)
                        .filter_map(|d| {
                            self.centers
                                .get(&(d, layer_idx))
                                .map(|c| (d, c.clone()))
                        })
                        .collect();
                    if centers.len() >= 2 {
                        let (_, grads) =
                            ball_loss(&transformed, &labels, &centers, params.margin)?;
                        dh_ball = Some(grads);
                    }
                }

                for (k, &i) in batch.iter().enumerate() {
                    let (_, y) = &pool[i];
                    let h = &transformed[k];
                    let logits = clf.forward(h, active);
                    let (_, dlogits) = crate::losses::cross_entropy(&logits, *y)?;
                    let dlogits: Vec<f64> = dlogits.iter().map(|g| g * inv_n).collect();
                    let mut dh = clf.backward(h, &dlogits, &mut g_clf);
                    if let Some(ball_grads) = &dh_ball {
                        let scale = params.lambda2 * inv_n;
                        for (a, b) in dh.iter_mut().zip(&ball_grads[k]) {
                            *a += scale * b;
                        }
                    }
                    mlp.backward(&caches[k], &dh, &mut g_mlp);
                }

                sgd_update_matrix(&mut clf.w, &g_clf.w, &mut vel_clf.w, params.lr_classifier, params.momentum);
                sgd_update_vec(&mut clf.b, &g_clf.b, &mut vel_clf.b, params.lr_classifier, params.momentum);
                sgd_update_matrix(&mut mlp.w1, &g_mlp.w1, &mut vel_mlp.w1, params.lr_transform, params.momentum);
                sgd_update_vec(&mut mlp.b1, &g_mlp.b1, &mut vel_mlp.b1, params.lr_transform, params.momentum);
                sgd_update_matrix(&mut mlp.w2, &g_mlp.w2, &mut vel_mlp.w2, params.lr_transform, params.momentum);
                sgd_update_vec(&mut mlp.b2, &g_mlp.b2, &mut vel_mlp.b2, params.lr_transform, params.momentum);
            }
        }
        Ok(())
    }
}

fn sgd_update_matrix(param: &mut Matrix, grad: &Matrix, vel: &mut Matrix, lr: f64, momentum: f64) {
    for ((p, g), v) in param
        .data_mut()
        .iter_mut()
        .zip(grad.data())
        .zip(vel.data_mut())
    {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

fn sgd_update_vec(param: &mut [f64], grad: &[f64], vel: &mut [f64], lr: f64, momentum: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}
