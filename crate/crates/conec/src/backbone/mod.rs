//! Frozen micro-transformer backbone.
//!
//! Stands in for a pretrained ViT at desk scale: a seeded random linear
//! tokenizer turns a raw feature vector into `s−1` patch tokens plus a
//! frozen CLS token, and `L` pre-norm blocks (LN → attention → residual →
//! LN → MLP → residual) run on top. Parameters never change after
//! construction; adaptation happens exclusively through LoRA deltas added
//! to the configured attention projections.
//!
//! [`Backbone::forward_cached`] records every intermediate needed by the
//! hand-written backward pass in [`backward`](Backbone::backward), which
//! propagates a loss gradient down the block stack and accumulates
//! gradients into adapter matrices only — the backbone itself stays frozen.

mod backward;

pub use backward::BackboneCache;

use crate::adapters::{AdapterStack, LoraAdapter, ProjKind};
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

pub(crate) const LN_EPS: f64 = 1e-5;
const WEIGHT_STD: f64 = 0.02;
const MAGIC: &[u8; 9] = b"CONEC-BB1";

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    /// Number of transformer blocks L.
    pub num_layers: usize,
    /// Embedding dimension d.
    pub embed_dim: usize,
    /// Tokens per sample s, including the CLS token at position 0.
    pub num_tokens: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    /// Raw input feature dimension consumed by the tokenizer.
    pub input_dim: usize,
    /// Attention projections that receive LoRA deltas.
    pub lora_targets: Vec<ProjKind>,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            num_layers: 6,
            embed_dim: 32,
            num_tokens: 5,
            num_heads: 4,
            mlp_hidden: 64,
            input_dim: 16,
            lora_targets: vec![ProjKind::Query, ProjKind::Value],
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config("backbone needs at least 2 layers".into()));
        }
        if self.num_tokens < 2 {
            return Err(Error::Config("backbone needs at least 2 tokens".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.input_dim == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config("zero-sized backbone dimension".into()));
        }
        if self.lora_targets.is_empty() {
            return Err(Error::Config("lora_targets must not be empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub ln1_gain: Vec<f64>,
    pub ln1_bias: Vec<f64>,
    pub ln2_gain: Vec<f64>,
    pub ln2_bias: Vec<f64>,
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

/// Per-layer token matrices `z_0..z_L` produced by one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerTrace {
    layers: Vec<Matrix>,
}

impl LayerTrace {
    /// Number of stored layers (`L+1` for a full trace, counting `z_0`).
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Token matrix after block `layer` (`layer = 0` is the tokenized input).
    pub fn layer(&self, layer: usize) -> &Matrix {
        &self.layers[layer]
    }

    /// CLS embedding (row 0) after block `layer`.
    pub fn cls_at(&self, layer: usize) -> &[f64] {
        self.layers[layer].row(0)
    }

    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("trace is never empty")
    }
}

/// Frozen transformer: construction is the only time parameters are written.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    token_maps: Vec<Matrix>,
    cls_token: Vec<f64>,
    pub(crate) blocks: Vec<Block>,
}

impl Backbone {
    pub fn new(config: BackboneConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed).derive(0xBACB);
        let d = config.embed_dim;
        let token_maps = (0..config.num_tokens - 1)
            .map(|_| rng.normal_matrix(d, config.input_dim, WEIGHT_STD))
            .collect();
        let cls_token = rng.normal_vec(d).iter().map(|v| v * WEIGHT_STD).collect();
        let blocks = (0..config.num_layers)
            .map(|_| Block {
                wq: rng.normal_matrix(d, d, WEIGHT_STD),
                wk: rng.normal_matrix(d, d, WEIGHT_STD),
                wv: rng.normal_matrix(d, d, WEIGHT_STD),
                wo: rng.normal_matrix(d, d, WEIGHT_STD),
                ln1_gain: vec![1.0; d],
                ln1_bias: vec![0.0; d],
                ln2_gain: vec![1.0; d],
                ln2_bias: vec![0.0; d],
                w1: rng.normal_matrix(config.mlp_hidden, d, WEIGHT_STD),
                b1: vec![0.0; config.mlp_hidden],
                w2: rng.normal_matrix(d, config.mlp_hidden, WEIGHT_STD),
                b2: vec![0.0; d],
            })
            .collect();
        Ok(Self {
            config,
            token_maps,
            cls_token,
            blocks,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// Raw input vector → `s×d` token matrix. Patch tokens are pure linear
    /// maps of the input (no bias), so they scale exactly with it; the CLS
    /// token is a frozen constant at row 0.
    pub fn tokenize(&self, x: &[f64]) -> Result<Matrix> {
        if x.len() != self.config.input_dim {
            return Err(Error::InvalidInput(format!(
                "input length {} does not match configured input_dim {}",
                x.len(),
                self.config.input_dim
            )));
        }
        let (s, d) = (self.config.num_tokens, self.config.embed_dim);
        let mut tokens = Matrix::zeros(s, d);
        tokens.row_mut(0).copy_from_slice(&self.cls_token);
        for (t, map) in self.token_maps.iter().enumerate() {
            let row = tokens.row_mut(t + 1);
            for i in 0..d {
                let mut acc = 0.0;
                for (j, xv) in x.iter().enumerate() {
                    acc += map.get(i, j) * xv;
                }
                row[i] = acc;
            }
        }
        Ok(tokens)
    }

    /// Forward pass with no adapter contributions.
    pub fn forward_plain(&self, x: &[f64]) -> Result<LayerTrace> {
        self.forward_with_adapters(x, &AdapterStack::none(self.config.num_layers))
    }

    /// Forward pass with LoRA deltas added to the configured projections of
    /// each block that has adapters in `stack`.
    pub fn forward_with_adapters(&self, x: &[f64], stack: &AdapterStack) -> Result<LayerTrace> {
        let cache = self.forward_cached(x, stack, stack.depth())?;
        Ok(cache.into_trace())
    }

    /// Forward through the first `upto` blocks only (`upto = L` for a full
    /// pass), recording every intermediate needed for [`Self::backward`].
    pub fn forward_cached(
        &self,
        x: &[f64],
        stack: &AdapterStack,
        upto: usize,
    ) -> Result<BackboneCache> {
        if upto > self.config.num_layers || stack.depth() < upto {
            return Err(Error::InvalidShape(format!(
                "forward depth {} exceeds stack depth {} or layers {}",
                upto,
                stack.depth(),
                self.config.num_layers
            )));
        }
        let tokens = self.tokenize(x)?;
        backward::run_forward(self, tokens, stack, upto)
    }

    pub(crate) fn check_adapter_shapes(&self, adapters: &[LoraAdapter]) -> Result<()> {
        let d = self.config.embed_dim;
        for ad in adapters {
            if ad.out_dim() != d || ad.in_dim() != d {
                return Err(Error::InvalidShape(format!(
                    "adapter for {:?} has shape {}x{} via rank {}, backbone expects {d}x{d}",
                    ad.target(),
                    ad.out_dim(),
                    ad.in_dim(),
                    ad.rank()
                )));
            }
            if !self.config.lora_targets.contains(&ad.target()) {
                return Err(Error::InvalidShape(format!(
                    "adapter targets {:?} which is not in the configured set {:?}",
                    ad.target(),
                    self.config.lora_targets
                )));
            }
        }
        Ok(())
    }

    /// Serializes config header plus the full parameter blob (little-endian
    /// f64) so a run can resume from the exact same frozen weights.
    pub fn save(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        self.write_into(&mut w);
        w.into_bytes()
    }

    pub(crate) fn write_into(&self, w: &mut Writer) {
        let c = &self.config;
        w.u64(c.num_layers as u64);
        w.u64(c.embed_dim as u64);
        w.u64(c.num_tokens as u64);
        w.u64(c.num_heads as u64);
        w.u64(c.mlp_hidden as u64);
        w.u64(c.input_dim as u64);
        w.u64(c.lora_targets.len() as u64);
        for t in &c.lora_targets {
            w.u64(t.code());
        }
        w.u64(c.seed);
        for m in &self.token_maps {
            w.matrix(m);
        }
        w.f64_slice(&self.cls_token);
        for b in &self.blocks {
            w.matrix(&b.wq);
            w.matrix(&b.wk);
            w.matrix(&b.wv);
            w.matrix(&b.wo);
            w.f64_slice(&b.ln1_gain);
            w.f64_slice(&b.ln1_bias);
            w.f64_slice(&b.ln2_gain);
            w.f64_slice(&b.ln2_bias);
            w.matrix(&b.w1);
            w.f64_slice(&b.b1);
            w.matrix(&b.w2);
            w.f64_slice(&b.b2);
        }
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_bytes(MAGIC, "backbone checkpoint magic")?;
        let bb = Self::read_from(&mut r)?;
        r.expect_end()?;
        Ok(bb)
    }

    pub(crate) fn read_from(r: &mut Reader) -> Result<Self> {
        let num_layers = r.u64()? as usize;
        let embed_dim = r.u64()? as usize;
        let num_tokens = r.u64()? as usize;
        let num_heads = r.u64()? as usize;
        let mlp_hidden = r.u64()? as usize;
        let input_dim = r.u64()? as usize;
        let n_targets = r.u64()? as usize;
        let mut lora_targets = Vec::with_capacity(n_targets);
        for _ in 0..n_targets {
            lora_targets.push(ProjKind::from_code(r.u64()?)?);
        }
        let seed = r.u64()?;
        let config = BackboneConfig {
            num_layers,
            embed_dim,
            num_tokens,
            num_heads,
            mlp_hidden,
            input_dim,
            lora_targets,
            seed,
        };
        config.validate()?;
        let token_maps = (0..num_tokens - 1)
            .map(|_| r.matrix(embed_dim, input_dim))
            .collect::<Result<Vec<_>>>()?;
        let cls_token = r.f64_vec(embed_dim)?;
        let mut blocks = Vec::with_capacity(num_layers);
        for _ in 0..num_layers {
            blocks.push(Block {
                wq: r.matrix(embed_dim, embed_dim)?,
                wk: r.matrix(embed_dim, embed_dim)?,
                wv: r.matrix(embed_dim, embed_dim)?,
                wo: r.matrix(embed_dim, embed_dim)?,
                ln1_gain: r.f64_vec(embed_dim)?,
                ln1_bias: r.f64_vec(embed_dim)?,
                ln2_gain: r.f64_vec(embed_dim)?,
                ln2_bias: r.f64_vec(embed_dim)?,
                w1: r.matrix(mlp_hidden, embed_dim)?,
                b1: r.f64_vec(mlp_hidden)?,
                w2: r.matrix(embed_dim, mlp_hidden)?,
                b2: r.f64_vec(embed_dim)?,
            });
        }
        Ok(Self {
            config,
            token_maps,
            cls_token,
            blocks,
        })
    }

    /// Fingerprint of every frozen parameter byte; the frozen-backbone
    /// contract is asserted by comparing this before and after training.
    pub fn param_fingerprint(&self) -> u64 {
        let mut hash = 0xcbf2_9ce4_8422_2325u64;
        let mut feed = |v: f64| {
            hash ^= v.to_bits();
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for m in &self.token_maps {
            m.data().iter().copied().for_each(&mut feed);
        }
        self.cls_token.iter().copied().for_each(&mut feed);
        for b in &self.blocks {
            for m in [&b.wq, &b.wk, &b.wv, &b.wo, &b.w1, &b.w2] {
                m.data().iter().copied().for_each(&mut feed);
            }
            for v in [&b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias, &b.b1, &b.b2] {
                v.iter().copied().for_each(&mut feed);
            }
        }
        hash
    }
}

pub(crate) fn make_trace(layers: Vec<Matrix>) -> LayerTrace {
    LayerTrace { layers }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters;
    use crate::numkit::Rng;

    fn small_backbone(seed: u64) -> Backbone {
        Backbone::new(BackboneConfig {
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    fn input(seed: u64, dim: usize) -> Vec<f64> {
        Rng::new(seed).normal_vec(dim)
    }

    #[test]
    fn tokenize_zero_input_keeps_only_cls() {
        let bb = small_backbone(1);
        let tokens = bb.tokenize(&[0.0; 16]).unwrap();
        assert_eq!(tokens.row(0), bb.cls_token.as_slice());
        for t in 1..tokens.rows() {
            assert!(tokens.row(t).iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn tokenize_is_deterministic_and_linear() {
        let bb = small_backbone(2);
        let x = input(10, 16);
        let t1 = bb.tokenize(&x).unwrap();
        let t2 = bb.tokenize(&x).unwrap();
        assert_eq!(t1.data(), t2.data());

        let doubled: Vec<f64> = x.iter().map(|v| v * 2.0).collect();
        let t2x = bb.tokenize(&doubled).unwrap();
        for t in 1..t1.rows() {
            for (a, b) in t1.row(t).iter().zip(t2x.row(t)) {
                assert_eq!(*b, *a * 2.0);
            }
        }
    }

    #[test]
    fn tokenize_rejects_wrong_length() {
        let bb = small_backbone(3);
        assert!(bb.tokenize(&[1.0; 5]).is_err());
    }

    #[test]
    fn forward_plain_bitwise_deterministic() {
        let bb = small_backbone(4);
        let x = input(20, 16);
        let a = bb.forward_plain(&x).unwrap();
        let b = bb.forward_plain(&x).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), bb.config().num_layers + 1);
    }

    #[test]
    fn different_seeds_give_different_embeddings() {
        let x = input(30, 16);
        let za = small_backbone(5).forward_plain(&x).unwrap();
        let zb = small_backbone(6).forward_plain(&x).unwrap();
        assert!(za.last().sub(zb.last()).frob_norm() > 1e-6);
    }

    #[test]
    fn cls_at_is_row_zero_everywhere() {
        let bb = small_backbone(7);
        let trace = bb.forward_plain(&input(40, 16)).unwrap();
        for layer in 0..trace.len() {
            assert_eq!(trace.cls_at(layer), trace.layer(layer).row(0));
        }
    }

    #[test]
    fn zero_adapters_match_plain_bitwise() {
        let bb = small_backbone(8);
        let mut rng = Rng::new(99);
        let per_block: Vec<Vec<adapters::LoraAdapter>> = (0..bb.config().num_layers)
            .map(|_| {
                bb.config()
                    .lora_targets
                    .iter()
                    .map(|&t| adapters::LoraAdapter::new_shared(4, 32, 32, t, &mut rng).unwrap())
                    .collect()
            })
            .collect();
        let stack = AdapterStack::from_blocks(&per_block);
        let x = input(50, 16);
        let with = bb.forward_with_adapters(&x, &stack).unwrap();
        let plain = bb.forward_plain(&x).unwrap();
        assert_eq!(with, plain);
    }

    #[test]
    fn nonzero_adapters_change_the_trace() {
        let bb = small_backbone(9);
        let mut rng = Rng::new(99);
        let mut per_block: Vec<Vec<adapters::LoraAdapter>> = (0..bb.config().num_layers)
            .map(|_| {
                bb.config()
                    .lora_targets
                    .iter()
                    .map(|&t| adapters::LoraAdapter::new_shared(4, 32, 32, t, &mut rng).unwrap())
                    .collect()
            })
            .collect();
        for ad in per_block.iter_mut().flatten() {
            ad.nudge_a(&mut rng, 0.1);
        }
        let stack = AdapterStack::from_blocks(&per_block);
        let x = input(60, 16);
        let with = bb.forward_with_adapters(&x, &stack).unwrap();
        let plain = bb.forward_plain(&x).unwrap();
        assert!(with.last().sub(plain.last()).frob_norm() > 1e-9);
    }

    #[test]
    fn prefix_forward_equals_truncated_full_forward() {
        let bb = small_backbone(10);
        let mut rng = Rng::new(31);
        let per_block: Vec<Vec<adapters::LoraAdapter>> = (0..bb.config().num_layers)
            .map(|_| {
                vec![{
                    let mut ad =
                        adapters::LoraAdapter::new_shared(4, 32, 32, ProjKind::Query, &mut rng)
                            .unwrap();
                    ad.nudge_a(&mut rng, 0.05);
                    ad
                }]
            })
            .collect();
        let stack = AdapterStack::from_blocks(&per_block);
        let x = input(70, 16);
        let l = 3;
        let prefix = bb.forward_cached(&x, &stack, l).unwrap().into_trace();
        let full = bb.forward_with_adapters(&x, &stack).unwrap();
        for layer in 0..=l {
            assert_eq!(prefix.layer(layer), full.layer(layer));
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_exact() {
        let bb = small_backbone(11);
        let bytes = bb.save();
        let loaded = Backbone::load(&bytes).unwrap();
        assert_eq!(loaded.save(), bytes);
        assert_eq!(loaded.param_fingerprint(), bb.param_fingerprint());
        let x = input(80, 16);
        assert_eq!(
            bb.forward_plain(&x).unwrap(),
            loaded.forward_plain(&x).unwrap()
        );
    }

    #[test]
    fn load_rejects_bad_magic() {
        let bb = small_backbone(12);
        let mut bytes = bb.save();
        bytes[0] ^= 0xFF;
        assert!(Backbone::load(&bytes).is_err());
    }
}
