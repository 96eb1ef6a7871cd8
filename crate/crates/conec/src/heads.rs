//! Classifier heads.
//!
//! The training-time classifier is stochastic: each class weight is sampled
//! per forward pass as `φ_m = μ_m + ε ⊙ σ_m` with `ε ~ N(0,1)`, and the
//! logit is a temperature-scaled cosine `η·cos(φ_m, z)`. Sampling is
//! reparameterized — the noise is held fixed within a step — so gradients
//! flow to both `μ` and `σ`. Inference is noise-free, and after a domain
//! finishes training the `μ` rows are replaced by class prototypes (the
//! empirical class means of the final embeddings).
//!
//! Plain cosine and linear heads are also provided; they exist for the
//! classifier ablations and share the same parameter/gradient plumbing.

use crate::error::{Error, Result};
use crate::numkit::{dot, norm, Matrix, Rng};

/// Per-class mean embeddings with their sample counts.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    means: Matrix,
    counts: Vec<usize>,
}

impl PrototypeSet {
    pub fn num_classes(&self) -> usize {
        self.means.rows()
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn mean(&self, class: usize) -> &[f64] {
        self.means.row(class)
    }

    pub fn count(&self, class: usize) -> usize {
        self.counts[class]
    }
}

/// Arithmetic mean of the embeddings of each class. Every class in
/// `0..num_classes` must appear at least once.
pub fn compute_prototypes(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    num_classes: usize,
) -> Result<PrototypeSet> {
    if embeddings.len() != labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} embeddings but {} labels",
            embeddings.len(),
            labels.len()
        )));
    }
    if embeddings.is_empty() {
        return Err(Error::InvalidInput("empty prototype batch".into()));
    }
    let dim = embeddings[0].len();
    let mut sums = Matrix::zeros(num_classes, dim);
    let mut counts = vec![0usize; num_classes];
    for (z, &y) in embeddings.iter().zip(labels) {
        if y >= num_classes {
            return Err(Error::InvalidInput(format!(
                "label {y} out of range for {num_classes} classes"
            )));
        }
        let row = sums.row_mut(y);
        for (r, v) in row.iter_mut().zip(z) {
            *r += v;
        }
        counts[y] += 1;
    }
    let missing: Vec<usize> = (0..num_classes).filter(|&c| counts[c] == 0).collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    for c in 0..num_classes {
        let n = counts[c] as f64;
        for v in sums.row_mut(c) {
            *v /= n;
        }
    }
    Ok(PrototypeSet {
        means: sums,
        counts,
    })
}

/// Sampled cosine classifier: trainable per-class mean and scale vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct StochasticHead {
    mu: Matrix,
    sigma: Matrix,
    eta: f64,
}

impl StochasticHead {
    pub fn new(num_classes: usize, dim: usize, eta: f64, sigma_init: f64, rng: &mut Rng) -> Self {
        Self {
            mu: rng.normal_matrix(num_classes, dim, 0.1),
            sigma: Matrix::from_fn(num_classes, dim, |_, _| sigma_init),
            eta,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.mu.rows()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn mu(&self) -> &Matrix {
        &self.mu
    }

    pub fn sigma(&self) -> &Matrix {
        &self.sigma
    }

    pub fn mu_mut(&mut self) -> &mut Matrix {
        &mut self.mu
    }

    pub fn sigma_mut(&mut self) -> &mut Matrix {
        &mut self.sigma
    }

    pub(crate) fn from_parts(mu: Matrix, sigma: Matrix, eta: f64) -> Self {
        Self { mu, sigma, eta }
    }

    /// Fresh standard-normal noise, one row per class.
    pub fn sample_noise(&self, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(self.mu.rows(), self.mu.cols(), |_, _| rng.normal())
    }

    fn check_embedding(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::InvalidShape(format!(
                "embedding dim {} does not match head dim {}",
                z.len(),
                self.dim()
            )));
        }
        if !z.iter().all(|v| v.is_finite()) {
            return Err(Error::Numeric(
                "non-finite embedding fed to cosine head".into(),
            ));
        }
        if norm(z) == 0.0 {
            return Err(Error::InvalidInput(
                "zero embedding fed to cosine head".into(),
            ));
        }
        Ok(())
    }

    /// Training forward with freshly sampled classifier noise.
    pub fn forward_train(&self, z: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
        let noise = self.sample_noise(rng);
        self.forward_train_with_noise(z, &noise)
    }

    /// Training forward with the caller-held noise (reparameterization).
    pub fn forward_train_with_noise(&self, z: &[f64], noise: &Matrix) -> Result<Vec<f64>> {
        self.check_embedding(z)?;
        let nz = norm(z);
        let mut logits = Vec::with_capacity(self.num_classes());
        for m in 0..self.num_classes() {
            let phi: Vec<f64> = self
                .mu
                .row(m)
                .iter()
                .zip(self.sigma.row(m))
                .zip(noise.row(m))
                .map(|((mu, sg), eps)| mu + eps * sg)
                .collect();
            let np = norm(&phi);
            if np == 0.0 {
                return Err(Error::Numeric(format!(
                    "sampled classifier weight for class {m} is the zero vector"
                )));
            }
            logits.push(self.eta * dot(&phi, z) / (np * nz));
        }
        Ok(logits)
    }

    /// Deterministic forward: `logit_m = η·cos(μ_m, z)`, no sampling.
    pub fn forward_infer(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_embedding(z)?;
        let nz = norm(z);
        (0..self.num_classes())
            .map(|m| {
                let mu = self.mu.row(m);
                let nm = norm(mu);
                if nm == 0.0 {
                    return Err(Error::Numeric(format!(
                        "class {m} mean is the zero vector"
                    )));
                }
                Ok(self.eta * dot(mu, z) / (nm * nz))
            })
            .collect()
    }

    /// Backward through the sampled forward: gradients for `μ`, `σ` (with
    /// the noise held fixed) and the embedding.
    pub fn backward_train(
        &self,
        z: &[f64],
        noise: &Matrix,
        dlogits: &[f64],
    ) -> (Matrix, Matrix, Vec<f64>) {
        let (m_classes, d) = (self.num_classes(), self.dim());
        let nz = norm(z);
        let mut dmu = Matrix::zeros(m_classes, d);
        let mut dsigma = Matrix::zeros(m_classes, d);
        let mut dz = vec![0.0; d];
        for m in 0..m_classes {
            let phi: Vec<f64> = self
                .mu
                .row(m)
                .iter()
                .zip(self.sigma.row(m))
                .zip(noise.row(m))
                .map(|((mu, sg), eps)| mu + eps * sg)
                .collect();
            let np = norm(&phi);
            let pz = dot(&phi, z);
            let g = dlogits[m] * self.eta;
            for j in 0..d {
                // d cos / d phi_j, then chain into mu and sigma.
                let dphi = z[j] / (np * nz) - pz * phi[j] / (np * np * np * nz);
                dmu.set(m, j, g * dphi);
                dsigma.set(m, j, g * dphi * noise.get(m, j));
                let dzj = phi[j] / (np * nz) - pz * z[j] / (np * nz * nz * nz);
                dz[j] += g * dzj;
            }
        }
        (dmu, dsigma, dz)
    }

    /// Backward through the deterministic forward (the distillation path).
    pub fn backward_infer(&self, z: &[f64], dlogits: &[f64]) -> (Matrix, Vec<f64>) {
        let zero_noise = Matrix::zeros(self.num_classes(), self.dim());
        let (dmu, _, dz) = self.backward_train(z, &zero_noise, dlogits);
        (dmu, dz)
    }

    /// Clamps every `σ` entry to be nonnegative; the engine calls this after
    /// each optimizer step.
    pub fn clamp_sigma(&mut self) {
        for v in self.sigma.data_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }

    /// Overwrites `μ` rows with prototypes; `σ` is untouched.
    pub fn replace_means(&mut self, protos: &PrototypeSet) -> Result<()> {
        if protos.num_classes() != self.num_classes() || protos.dim() != self.dim() {
            return Err(Error::InvalidShape(format!(
                "prototype set is {}x{}, head is {}x{}",
                protos.num_classes(),
                protos.dim(),
                self.num_classes(),
                self.dim()
            )));
        }
        for m in 0..self.num_classes() {
            self.mu.row_mut(m).copy_from_slice(protos.mean(m));
        }
        Ok(())
    }
}

/// Plain linear classifier (`logits = W z + b`) for the ablation grid.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearHead {
    w: Matrix,
    b: Matrix, // 1×M, kept as a matrix so optimizer plumbing stays uniform
}

impl LinearHead {
    pub fn new(num_classes: usize, dim: usize, rng: &mut Rng) -> Self {
        Self {
            w: rng.normal_matrix(num_classes, dim, 0.1),
            b: Matrix::zeros(1, num_classes),
        }
    }

    pub(crate) fn from_parts(w: Matrix, b: Matrix) -> Self {
        Self { w, b }
    }

    pub fn num_classes(&self) -> usize {
        self.w.rows()
    }

    pub fn dim(&self) -> usize {
        self.w.cols()
    }

    pub fn w(&self) -> &Matrix {
        &self.w
    }

    pub fn bias(&self) -> &Matrix {
        &self.b
    }

    pub fn forward(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.dim() {
            return Err(Error::InvalidShape("embedding dim mismatch".into()));
        }
        Ok((0..self.num_classes())
            .map(|m| dot(self.w.row(m), z) + self.b.get(0, m))
            .collect())
    }

    pub fn backward(&self, z: &[f64], dlogits: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
        let (m_classes, d) = (self.num_classes(), self.dim());
        let mut dw = Matrix::zeros(m_classes, d);
        let mut db = Matrix::zeros(1, m_classes);
        let mut dz = vec![0.0; d];
        for m in 0..m_classes {
            let g = dlogits[m];
            let row = dw.row_mut(m);
            for j in 0..d {
                row[j] = g * z[j];
                dz[j] += g * self.w.get(m, j);
            }
            db.set(0, m, g);
        }
        (dw, db, dz)
    }
}

/// Head variants selectable per run; the stochastic head is the default,
/// the others exist for the classifier ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Stochastic,
    Cosine,
    Linear,
}

impl HeadKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "stochastic" => Ok(HeadKind::Stochastic),
            "cosine" => Ok(HeadKind::Cosine),
            "linear" => Ok(HeadKind::Linear),
            other => Err(Error::Config(format!("unknown head kind '{other}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::Stochastic => "stochastic",
            HeadKind::Cosine => "cosine",
            HeadKind::Linear => "linear",
        }
    }
}

/// A concrete classifier head of any kind, with uniform train/infer and
/// gradient plumbing so the engine does not branch on the variant.
#[derive(Debug, Clone, PartialEq)]
pub enum ClassifierHead {
    Stochastic(StochasticHead),
    /// Cosine classifier: a stochastic head with `σ` pinned at zero and no
    /// sampling anywhere.
    Cosine(StochasticHead),
    Linear(LinearHead),
}

/// Gradients for a head's parameters in the order of
/// [`ClassifierHead::params_mut`], plus the embedding gradient.
pub struct HeadGradients {
    pub params: Vec<Matrix>,
    pub dz: Vec<f64>,
}

impl ClassifierHead {
    pub fn new(
        kind: HeadKind,
        num_classes: usize,
        dim: usize,
        eta: f64,
        sigma_init: f64,
        rng: &mut Rng,
    ) -> Self {
        match kind {
            HeadKind::Stochastic => {
                Self::Stochastic(StochasticHead::new(num_classes, dim, eta, sigma_init, rng))
            }
            HeadKind::Cosine => Self::Cosine(StochasticHead::new(num_classes, dim, eta, 0.0, rng)),
            HeadKind::Linear => Self::Linear(LinearHead::new(num_classes, dim, rng)),
        }
    }

    pub fn kind(&self) -> HeadKind {
        match self {
            Self::Stochastic(_) => HeadKind::Stochastic,
            Self::Cosine(_) => HeadKind::Cosine,
            Self::Linear(_) => HeadKind::Linear,
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            Self::Stochastic(h) | Self::Cosine(h) => h.num_classes(),
            Self::Linear(h) => h.num_classes(),
        }
    }

    /// Noise to hold fixed for one training step (`None` for deterministic
    /// heads).
    pub fn draw_noise(&self, rng: &mut Rng) -> Option<Matrix> {
        match self {
            Self::Stochastic(h) => Some(h.sample_noise(rng)),
            _ => None,
        }
    }

    pub fn forward_train(&self, z: &[f64], noise: Option<&Matrix>) -> Result<Vec<f64>> {
        match (self, noise) {
            (Self::Stochastic(h), Some(eps)) => h.forward_train_with_noise(z, eps),
            (Self::Stochastic(h), None) => h.forward_infer(z),
            (Self::Cosine(h), _) => h.forward_infer(z),
            (Self::Linear(h), _) => h.forward(z),
        }
    }

    pub fn forward_infer(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Stochastic(h) | Self::Cosine(h) => h.forward_infer(z),
            Self::Linear(h) => h.forward(z),
        }
    }

    pub fn backward_train(
        &self,
        z: &[f64],
        noise: Option<&Matrix>,
        dlogits: &[f64],
    ) -> HeadGradients {
        match (self, noise) {
            (Self::Stochastic(h), Some(eps)) => {
                let (dmu, dsigma, dz) = h.backward_train(z, eps, dlogits);
                HeadGradients {
                    params: vec![dmu, dsigma],
                    dz,
                }
            }
            (Self::Stochastic(h), None) => {
                let (dmu, dz) = h.backward_infer(z, dlogits);
                let dsigma = Matrix::zeros(h.num_classes(), h.dim());
                HeadGradients {
                    params: vec![dmu, dsigma],
                    dz,
                }
            }
            (Self::Cosine(h), _) => {
                let (dmu, dz) = h.backward_infer(z, dlogits);
                HeadGradients {
                    params: vec![dmu],
                    dz,
                }
            }
            (Self::Linear(h), _) => {
                let (dw, db, dz) = h.backward(z, dlogits);
                HeadGradients {
                    params: vec![dw, db],
                    dz,
                }
            }
        }
    }

    /// Backward through the deterministic forward; used by the distillation
    /// path, where only `μ`-type parameters see gradient.
    pub fn backward_infer(&self, z: &[f64], dlogits: &[f64]) -> HeadGradients {
        match self {
            Self::Stochastic(h) => {
                let (dmu, dz) = h.backward_infer(z, dlogits);
                let dsigma = Matrix::zeros(h.num_classes(), h.dim());
                HeadGradients {
                    params: vec![dmu, dsigma],
                    dz,
                }
            }
            Self::Cosine(h) => {
                let (dmu, dz) = h.backward_infer(z, dlogits);
                HeadGradients {
                    params: vec![dmu],
                    dz,
                }
            }
            Self::Linear(h) => {
                let (dw, db, dz) = h.backward(z, dlogits);
                HeadGradients {
                    params: vec![dw, db],
                    dz,
                }
            }
        }
    }

    /// Trainable parameter matrices in the canonical gradient order.
    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Self::Stochastic(h) => {
                let StochasticHead { mu, sigma, .. } = h;
                vec![mu, sigma]
            }
            Self::Cosine(h) => vec![&mut h.mu],
            Self::Linear(h) => vec![&mut h.w, &mut h.b],
        }
    }

    /// Post-step projection: stochastic `σ` stays nonnegative, cosine `σ`
    /// stays zero.
    pub fn after_step(&mut self) {
        match self {
            Self::Stochastic(h) => h.clamp_sigma(),
            Self::Cosine(h) => {
                for v in h.sigma.data_mut() {
                    *v = 0.0;
                }
            }
            Self::Linear(_) => {}
        }
    }

    pub fn supports_prototypes(&self) -> bool {
        !matches!(self, Self::Linear(_))
    }

    pub fn replace_means(&mut self, protos: &PrototypeSet) -> Result<()> {
        match self {
            Self::Stochastic(h) | Self::Cosine(h) => h.replace_means(protos),
            Self::Linear(_) => Err(Error::InvalidInput(
                "linear head has no prototype means to replace".into(),
            )),
        }
    }

    pub fn as_stochastic(&self) -> Option<&StochasticHead> {
        match self {
            Self::Stochastic(h) | Self::Cosine(h) => Some(h),
            Self::Linear(_) => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::cross_entropy;
    use crate::numkit::{cosine_similarity, finite_diff_grad, grad_close, softmax};

    fn head(seed: u64) -> StochasticHead {
        StochasticHead::new(3, 6, 16.0, 0.2, &mut Rng::new(seed))
    }

    #[test]
    fn zero_sigma_collapses_to_deterministic() {
        let mut h = head(1);
        for v in h.sigma_mut().data_mut() {
            *v = 0.0;
        }
        let z = Rng::new(5).normal_vec(6);
        let train = h.forward_train(&z, &mut Rng::new(9)).unwrap();
        let infer = h.forward_infer(&z).unwrap();
        assert_eq!(train, infer);
    }

    #[test]
    fn same_rng_state_same_logits() {
        let h = head(2);
        let z = Rng::new(6).normal_vec(6);
        let a = h.forward_train(&z, &mut Rng::new(42)).unwrap();
        let b = h.forward_train(&z, &mut Rng::new(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sampled_logit_mean_approaches_deterministic_for_small_sigma() {
        let mut h = head(3);
        for v in h.sigma_mut().data_mut() {
            *v = 1e-3;
        }
        let z = Rng::new(7).normal_vec(6);
        let det = h.forward_infer(&z).unwrap();
        let mut rng = Rng::new(1234);
        let n = 10_000;
        let mut sums = vec![0.0; 3];
        let mut sq = vec![0.0; 3];
        for _ in 0..n {
            let logits = h.forward_train(&z, &mut rng).unwrap();
            for (m, l) in logits.iter().enumerate() {
                sums[m] += l;
                sq[m] += l * l;
            }
        }
        for m in 0..3 {
            let mean = sums[m] / n as f64;
            let var = sq[m] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - det[m]).abs() <= 3.0 * se + 1e-9,
                "class {m}: mean {mean}, det {} ± {se}",
                det[m]
            );
        }
    }

    #[test]
    fn infer_matches_direct_formula_oracle() {
        let h = head(4);
        let z = Rng::new(8).normal_vec(6);
        let logits = h.forward_infer(&z).unwrap();
        for m in 0..3 {
            let oracle = 16.0 * cosine_similarity(h.mu().row(m), &z).unwrap();
            assert!((logits[m] - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn infer_is_scale_invariant_and_prototype_aligned() {
        let h = head(5);
        let z = Rng::new(9).normal_vec(6);
        let a = h.forward_infer(&z).unwrap();
        let scaled: Vec<f64> = z.iter().map(|v| v * 7.3).collect();
        let b = h.forward_infer(&scaled).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }

        // Feeding a class mean itself must win that class.
        let mu1: Vec<f64> = h.mu().row(1).to_vec();
        let logits = h.forward_infer(&mu1).unwrap();
        let argmax = logits
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, 1);
    }

    #[test]
    fn zero_embedding_is_rejected() {
        let h = head(6);
        assert!(h.forward_infer(&[0.0; 6]).is_err());
        assert!(h.forward_train(&[0.0; 6], &mut Rng::new(1)).is_err());
    }

    #[test]
    fn prototypes_basic_cases() {
        let protos = compute_prototypes(&[vec![1.0, 2.0], vec![5.0, 6.0]], &[0, 1], 2).unwrap();
        assert_eq!(protos.mean(0), &[1.0, 2.0]);
        assert_eq!(protos.mean(1), &[5.0, 6.0]);

        let protos = compute_prototypes(&[vec![0.0, 0.0], vec![2.0, 2.0]], &[0, 0], 1).unwrap();
        assert_eq!(protos.mean(0), &[1.0, 1.0]);
        assert_eq!(protos.count(0), 2);
    }

    #[test]
    fn prototypes_match_brute_force_oracle() {
        let mut rng = Rng::new(10);
        let n = 40;
        let embeddings: Vec<Vec<f64>> = (0..n).map(|_| rng.normal_vec(4)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.index(3)).collect();
        let protos = compute_prototypes(&embeddings, &labels, 3).unwrap();
        for c in 0..3 {
            let members: Vec<&Vec<f64>> = embeddings
                .iter()
                .zip(&labels)
                .filter(|&(_, &y)| y == c)
                .map(|(z, _)| z)
                .collect();
            for j in 0..4 {
                let oracle = members.iter().map(|z| z[j]).sum::<f64>() / members.len() as f64;
                assert!((protos.mean(c)[j] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn missing_class_is_reported_by_id() {
        let err = compute_prototypes(&[vec![1.0]], &[0], 3).unwrap_err();
        match err {
            crate::error::Error::MissingClasses(ids) => assert_eq!(ids, vec![1, 2]),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn replace_means_keeps_sigma_bytes() {
        let mut h = head(7);
        let sigma_before = h.sigma().clone();
        let mut rng = Rng::new(11);
        let embeddings: Vec<Vec<f64>> = (0..9).map(|_| rng.normal_vec(6)).collect();
        let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
        let protos = compute_prototypes(&embeddings, &labels, 3).unwrap();
        h.replace_means(&protos).unwrap();
        assert_eq!(h.sigma(), &sigma_before);
        for c in 0..3 {
            assert_eq!(h.mu().row(c), protos.mean(c));
        }
        // Replacing with the current means is a no-op.
        let current = compute_prototypes(
            &(0..3).map(|c| h.mu().row(c).to_vec()).collect::<Vec<_>>(),
            &[0, 1, 2],
            3,
        )
        .unwrap();
        let snapshot = h.clone();
        h.replace_means(&current).unwrap();
        assert_eq!(h, snapshot);
    }

    #[test]
    fn after_replacement_prototype_wins_its_class() {
        let mut h = head(8);
        let mut rng = Rng::new(12);
        let embeddings: Vec<Vec<f64>> = (0..12).map(|_| rng.normal_vec(6)).collect();
        let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
        let protos = compute_prototypes(&embeddings, &labels, 3).unwrap();
        h.replace_means(&protos).unwrap();
        for c in 0..3 {
            let logits = h.forward_infer(protos.mean(c)).unwrap();
            let argmax = logits
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(argmax, c);
        }
    }

    #[test]
    fn reparameterized_gradients_match_finite_differences() {
        let h = head(9);
        let mut rng = Rng::new(13);
        let z = rng.normal_vec(6);
        let noise = h.sample_noise(&mut rng);
        let label = 2usize;

        let loss_fn = |mu_data: &[f64], sigma_data: &[f64], z_data: &[f64]| {
            let mut probe = h.clone();
            probe.mu_mut().data_mut().copy_from_slice(mu_data);
            probe.sigma_mut().data_mut().copy_from_slice(sigma_data);
            let logits = probe.forward_train_with_noise(z_data, &noise).unwrap();
            cross_entropy(&logits, label).unwrap().0
        };

        let logits = h.forward_train_with_noise(&z, &noise).unwrap();
        let (_, dlogits) = cross_entropy(&logits, label).unwrap();
        let (dmu, dsigma, dz) = h.backward_train(&z, &noise, &dlogits);

        let mu0 = h.mu().data().to_vec();
        let sg0 = h.sigma().data().to_vec();
        let num_mu = finite_diff_grad(|m| loss_fn(m, &sg0, &z), &mu0, 1e-6).unwrap();
        assert!(grad_close(dmu.data(), &num_mu, 1e-4, 1e-8));
        let num_sg = finite_diff_grad(|s| loss_fn(&mu0, s, &z), &sg0, 1e-6).unwrap();
        assert!(grad_close(dsigma.data(), &num_sg, 1e-4, 1e-8));
        let num_z = finite_diff_grad(|zz| loss_fn(&mu0, &sg0, zz), &z, 1e-6).unwrap();
        assert!(grad_close(&dz, &num_z, 1e-4, 1e-8));
    }

    #[test]
    fn softmax_of_head_logits_sums_to_one() {
        let h = head(10);
        let z = Rng::new(14).normal_vec(6);
        let probs = softmax(&h.forward_infer(&z).unwrap(), 1.0).unwrap();
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn linear_head_gradients_match_finite_differences() {
        let mut rng = Rng::new(15);
        let h = LinearHead::new(3, 5, &mut rng);
        let z = rng.normal_vec(5);
        let label = 1usize;
        let logits = h.forward(&z).unwrap();
        let (_, dlogits) = cross_entropy(&logits, label).unwrap();
        let (dw, db, dz) = h.backward(&z, &dlogits);

        let w0 = h.w.data().to_vec();
        let num_w = finite_diff_grad(
            |wd| {
                let mut probe = h.clone();
                probe.w.data_mut().copy_from_slice(wd);
                cross_entropy(&probe.forward(&z).unwrap(), label).unwrap().0
            },
            &w0,
            1e-6,
        )
        .unwrap();
        assert!(grad_close(dw.data(), &num_w, 1e-5, 1e-9));

        let b0 = h.b.data().to_vec();
        let num_b = finite_diff_grad(
            |bd| {
                let mut probe = h.clone();
                probe.b.data_mut().copy_from_slice(bd);
                cross_entropy(&probe.forward(&z).unwrap(), label).unwrap().0
            },
            &b0,
            1e-6,
        )
        .unwrap();
        assert!(grad_close(db.data(), &num_b, 1e-5, 1e-9));

        let num_z = finite_diff_grad(
            |zz| cross_entropy(&h.forward(zz).unwrap(), label).unwrap().0,
            &z,
            1e-6,
        )
        .unwrap();
        assert!(grad_close(&dz, &num_z, 1e-5, 1e-9));
    }
}
