//! LoRA adapters: construction, routing across blocks, shared-state
//! snapshots, and the row-norm gradient redistribution mask.
//!
//! An adapter is the pair `ΔW = A·B` with a trainable zero-initialized
//! up-projection `A ∈ d×r` and a down-projection `B ∈ r×k`. Shared adapters
//! freeze `B` as a random row-orthonormal matrix (`B Bᵀ = I`) and learn only
//! `A`; task-specific adapters use the same construction by default, with an
//! opt-in trainable `B`. Zero-initialized `A` makes a fresh adapter an exact
//! no-op, which the engine's identity invariants lean on.

use crate::error::{Error, Result};
use crate::numkit::{random_orthogonal_rows, Matrix, Rng};

/// Attention projection an adapter attaches to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjKind {
    Query,
    Key,
    Value,
}

impl ProjKind {
    pub fn code(self) -> u64 {
        match self {
            ProjKind::Query => 0,
            ProjKind::Key => 1,
            ProjKind::Value => 2,
        }
    }

    pub fn from_code(code: u64) -> Result<Self> {
        match code {
            0 => Ok(ProjKind::Query),
            1 => Ok(ProjKind::Key),
            2 => Ok(ProjKind::Value),
            other => Err(Error::InvalidInput(format!(
                "unknown projection code {other}"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ProjKind::Query => "query",
            ProjKind::Key => "key",
            ProjKind::Value => "value",
        }
    }

    /// Parses a compact target-set spec such as `"qv"` or `"qk"`.
    pub fn parse_set(s: &str) -> Result<Vec<ProjKind>> {
        let mut out = Vec::new();
        for ch in s.chars() {
            let kind = match ch {
                'q' => ProjKind::Query,
                'k' => ProjKind::Key,
                'v' => ProjKind::Value,
                other => {
                    return Err(Error::Config(format!(
                        "unknown lora target '{other}' (expected q, k or v)"
                    )))
                }
            };
            if !out.contains(&kind) {
                out.push(kind);
            }
        }
        if out.is_empty() {
            return Err(Error::Config("empty lora target set".into()));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    a: Matrix,
    b: Matrix,
    target: ProjKind,
    trainable_b: bool,
}

impl LoraAdapter {
    /// Shared adapter: frozen row-orthonormal `B`, zero `A`.
    pub fn new_shared(
        rank: usize,
        k: usize,
        d: usize,
        target: ProjKind,
        rng: &mut Rng,
    ) -> Result<Self> {
        if rank > k.min(d) || rank == 0 {
            return Err(Error::InvalidShape(format!(
                "rank {rank} out of range for projection {d}x{k}"
            )));
        }
        Ok(Self {
            a: Matrix::zeros(d, rank),
            b: random_orthogonal_rows(rank, k, rng)?,
            target,
            trainable_b: false,
        })
    }

    /// Task-specific adapter. Uses the same frozen-orthogonal `B`
    /// construction as shared adapters unless `trainable_b` is set.
    pub fn new_specific(
        rank: usize,
        k: usize,
        d: usize,
        target: ProjKind,
        trainable_b: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut ad = Self::new_shared(rank, k, d, target, rng)?;
        ad.trainable_b = trainable_b;
        Ok(ad)
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.a.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.b.cols()
    }

    pub fn target(&self) -> ProjKind {
        self.target
    }

    pub fn trainable_b(&self) -> bool {
        self.trainable_b
    }

    pub(crate) fn from_parts(a: Matrix, b: Matrix, target: ProjKind, trainable_b: bool) -> Self {
        Self {
            a,
            b,
            target,
            trainable_b,
        }
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a_mut(&mut self) -> &mut Matrix {
        &mut self.a
    }

    /// Mutable access to `B`; callers own the frozen-B contract for shared
    /// adapters, so this is only exercised when `trainable_b` is set.
    pub fn b_mut(&mut self) -> &mut Matrix {
        &mut self.b
    }

    pub fn set_a_data(&mut self, data: &[f64]) {
        self.a.data_mut().copy_from_slice(data);
    }

    pub fn set_b_data(&mut self, data: &[f64]) {
        self.b.data_mut().copy_from_slice(data);
    }

    /// Fills `A` with `N(0, std²)` entries; test and demo helper for
    /// exercising non-zero adapters without running an optimizer.
    pub fn nudge_a(&mut self, rng: &mut Rng, std: f64) {
        for v in self.a.data_mut() {
            *v = rng.normal() * std;
        }
    }

    /// Low-rank contribution `z (A B)ᵀ` applied per token row, computed as
    /// `(z Bᵀ) Aᵀ` without materializing the dense product.
    pub fn delta(&self, z: &Matrix) -> Matrix {
        assert_eq!(
            z.cols(),
            self.in_dim(),
            "delta shape mismatch: tokens {}x{}, adapter input {}",
            z.rows(),
            z.cols(),
            self.in_dim()
        );
        z.matmul_transb(&self.b).matmul_transb(&self.a)
    }

    /// Per-row L2 norms of `A` (length d), the importance signal Eq.-style
    /// gradient redistribution feeds on.
    pub fn a_row_norms(&self) -> Vec<f64> {
        (0..self.a.rows())
            .map(|i| self.a.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect()
    }

    pub fn max_orthogonality_defect(&self) -> f64 {
        let gram = self.b.matmul_transb(&self.b);
        gram.sub(&Matrix::identity(self.rank())).max_abs()
    }
}

/// Borrowed per-block adapter assignment handed to the backbone: one slice
/// of adapters (possibly empty) per block.
pub struct AdapterStack<'a> {
    per_block: Vec<&'a [LoraAdapter]>,
}

impl<'a> AdapterStack<'a> {
    pub fn none(depth: usize) -> Self {
        Self {
            per_block: vec![&[]; depth],
        }
    }

    pub fn from_blocks(blocks: &'a [Vec<LoraAdapter>]) -> Self {
        Self {
            per_block: blocks.iter().map(|b| b.as_slice()).collect(),
        }
    }

    pub fn from_slices(per_block: Vec<&'a [LoraAdapter]>) -> Self {
        Self { per_block }
    }

    pub fn depth(&self) -> usize {
        self.per_block.len()
    }

    pub fn block(&self, i: usize) -> &'a [LoraAdapter] {
        self.per_block[i]
    }
}

/// Gradient accumulator shaped like an [`AdapterStack`].
pub struct AdapterGrads {
    per_block: Vec<Vec<(Matrix, Option<Matrix>)>>,
}

impl AdapterGrads {
    pub fn zeros_like(stack: &AdapterStack) -> Self {
        let per_block = (0..stack.depth())
            .map(|i| {
                stack
                    .block(i)
                    .iter()
                    .map(|ad| {
                        let db = ad
                            .trainable_b()
                            .then(|| Matrix::zeros(ad.rank(), ad.in_dim()));
                        (Matrix::zeros(ad.out_dim(), ad.rank()), db)
                    })
                    .collect()
            })
            .collect();
        Self { per_block }
    }

    pub fn accumulate_a(&mut self, block: usize, idx: usize, da: &Matrix) {
        self.per_block[block][idx].0.add_scaled(da, 1.0);
    }

    pub fn accumulate_b(&mut self, block: usize, idx: usize, db: &Matrix) {
        if let Some(b) = self.per_block[block][idx].1.as_mut() {
            b.add_scaled(db, 1.0);
        }
    }

    pub fn a(&self, block: usize, idx: usize) -> &Matrix {
        &self.per_block[block][idx].0
    }

    pub fn b(&self, block: usize, idx: usize) -> Option<&Matrix> {
        self.per_block[block][idx].1.as_ref()
    }

    pub fn scale(&mut self, alpha: f64) {
        for block in &mut self.per_block {
            for (a, b) in block {
                *a = a.scale(alpha);
                if let Some(b) = b {
                    *b = b.scale(alpha);
                }
            }
        }
    }

    pub fn block_len(&self, block: usize) -> usize {
        self.per_block[block].len()
    }
}

/// All adapters of a run: shared sets on blocks `0..split`, one specific set
/// per trained domain on blocks `split..depth`.
#[derive(Debug, Clone)]
pub struct AdapterBank {
    shared: Vec<Vec<LoraAdapter>>,
    specific: Vec<Vec<Vec<LoraAdapter>>>,
    split: usize,
    depth: usize,
}

impl AdapterBank {
    /// Creates the bank with shared adapters on the first `split` blocks.
    /// `split` may be 0 (no shared adapters) or `depth` (shared everywhere,
    /// the naive fine-tune arrangement).
    pub fn new(
        depth: usize,
        split: usize,
        rank: usize,
        dim: usize,
        targets: &[ProjKind],
        rng: &mut Rng,
    ) -> Result<Self> {
        if split > depth {
            return Err(Error::Config(format!(
                "split {split} exceeds block count {depth}"
            )));
        }
        let shared = (0..split)
            .map(|_| {
                targets
                    .iter()
                    .map(|&t| LoraAdapter::new_shared(rank, dim, dim, t, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            shared,
            specific: Vec::new(),
            split,
            depth,
        })
    }

    pub(crate) fn from_parts(
        shared: Vec<Vec<LoraAdapter>>,
        specific: Vec<Vec<Vec<LoraAdapter>>>,
        split: usize,
        depth: usize,
    ) -> Self {
        Self {
            shared,
            specific,
            split,
            depth,
        }
    }

    pub fn split(&self) -> usize {
        self.split
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn num_domains(&self) -> usize {
        self.specific.len()
    }

    /// Allocates the specific adapter set for the next domain.
    pub fn add_domain(
        &mut self,
        rank: usize,
        dim: usize,
        targets: &[ProjKind],
        trainable_b: bool,
        rng: &mut Rng,
    ) -> Result<usize> {
        let set = (self.split..self.depth)
            .map(|_| {
                targets
                    .iter()
                    .map(|&t| LoraAdapter::new_specific(rank, dim, dim, t, trainable_b, rng))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        self.specific.push(set);
        Ok(self.specific.len() - 1)
    }

    pub fn shared(&self) -> &[Vec<LoraAdapter>] {
        &self.shared
    }

    pub fn shared_mut(&mut self) -> &mut [Vec<LoraAdapter>] {
        &mut self.shared
    }

    pub fn specific(&self, domain: usize) -> &[Vec<LoraAdapter>] {
        &self.specific[domain]
    }

    pub fn specific_mut(&mut self, domain: usize) -> &mut [Vec<LoraAdapter>] {
        &mut self.specific[domain]
    }

    /// Full-depth stack for inference/training on `domain`: shared adapters
    /// on the early blocks, that domain's specific adapters after the split.
    pub fn stack_for(&self, domain: usize) -> AdapterStack<'_> {
        let mut per_block: Vec<&[LoraAdapter]> = Vec::with_capacity(self.depth);
        for blk in &self.shared {
            per_block.push(blk.as_slice());
        }
        for blk in &self.specific[domain] {
            per_block.push(blk.as_slice());
        }
        AdapterStack::from_slices(per_block)
    }

    /// Stack covering only the shared prefix (blocks `0..split`), as used by
    /// the distillation paths.
    pub fn shared_prefix_stack(&self) -> AdapterStack<'_> {
        AdapterStack::from_blocks(&self.shared)
    }

    /// Immutable copy of the shared adapters plus their `A` row norms, taken
    /// after finishing a domain.
    pub fn snapshot_shared(&self) -> SharedSnapshot {
        SharedSnapshot {
            adapters: self.shared.clone(),
            row_norms: self
                .shared
                .iter()
                .map(|blk| blk.iter().map(|ad| ad.a_row_norms()).collect())
                .collect(),
        }
    }
}

/// Frozen copy of the shared adapters after a finished domain, along with
/// the per-adapter `A` row norms that drive gradient redistribution.
#[derive(Debug, Clone)]
pub struct SharedSnapshot {
    adapters: Vec<Vec<LoraAdapter>>,
    row_norms: Vec<Vec<Vec<f64>>>,
}

impl SharedSnapshot {
    pub(crate) fn from_parts(
        adapters: Vec<Vec<LoraAdapter>>,
        row_norms: Vec<Vec<Vec<f64>>>,
    ) -> Self {
        Self {
            adapters,
            row_norms,
        }
    }

    pub fn stack(&self) -> AdapterStack<'_> {
        AdapterStack::from_blocks(&self.adapters)
    }

    pub fn adapters(&self) -> &[Vec<LoraAdapter>] {
        &self.adapters
    }

    pub fn row_norms(&self, block: usize, idx: usize) -> &[f64] {
        &self.row_norms[block][idx]
    }

    pub(crate) fn row_norms_all(&self) -> &[Vec<Vec<f64>>] {
        &self.row_norms
    }
}

/// Dimension-preserving normalization `σ(w) = d·w / Σw`; the mask always
/// sums to `d`. All-zero norms (an untouched `A`) fall back to the uniform
/// mask of ones.
pub fn redistribution_mask(prev_norms: &[f64]) -> Result<Vec<f64>> {
    if prev_norms.is_empty() {
        return Err(Error::InvalidInput("empty norm vector".into()));
    }
    if prev_norms.iter().any(|w| *w < 0.0 || !w.is_finite()) {
        return Err(Error::InvalidInput(
            "row norms must be finite and nonnegative".into(),
        ));
    }
    let sum: f64 = prev_norms.iter().sum();
    let d = prev_norms.len() as f64;
    if sum == 0.0 {
        return Ok(vec![1.0; prev_norms.len()]);
    }
    Ok(prev_norms.iter().map(|w| d * w / sum).collect())
}

/// Scales row `j` of a `d×r` gradient by `mask[j]`.
pub fn apply_redistribution(grad_a: &Matrix, mask: &[f64]) -> Result<Matrix> {
    if grad_a.rows() != mask.len() {
        return Err(Error::InvalidShape(format!(
            "gradient has {} rows but mask has {} entries",
            grad_a.rows(),
            mask.len()
        )));
    }
    Ok(Matrix::from_fn(grad_a.rows(), grad_a.cols(), |i, j| {
        grad_a.get(i, j) * mask[i]
    }))
}
