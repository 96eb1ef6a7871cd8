//! Cached forward pass and the hand-written backward pass through the
//! block stack.
//!
//! The backward propagates `dL/dz` from the top of the (possibly truncated)
//! stack down to the tokens, accumulating gradients only into LoRA adapter
//! matrices; backbone parameters receive no gradient by construction. Every
//! formula here is pinned by finite-difference tests below and by the
//! crate-level gradient acceptance suite.

use super::{Backbone, LayerTrace, LN_EPS};
use crate::adapters::{AdapterGrads, AdapterStack, LoraAdapter, ProjKind};
use crate::error::Result;
use crate::numkit::{gelu, gelu_grad, Matrix};

/// Layer norm over each token row. Returns the output plus the normalized
/// rows and inverse standard deviations needed by the backward pass.
fn layer_norm(z: &Matrix, gain: &[f64], bias: &[f64]) -> (Matrix, Matrix, Vec<f64>) {
    let (s, d) = (z.rows(), z.cols());
    let mut out = Matrix::zeros(s, d);
    let mut xhat = Matrix::zeros(s, d);
    let mut inv_std = vec![0.0; s];
    for t in 0..s {
        let row = z.row(t);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std[t] = inv;
        let xh = xhat.row_mut(t);
        for (j, v) in row.iter().enumerate() {
            xh[j] = (v - mean) * inv;
        }
        let o = out.row_mut(t);
        for j in 0..d {
            o[j] = gain[j] * xhat.get(t, j) + bias[j];
        }
    }
    (out, xhat, inv_std)
}

/// Backward of [`layer_norm`] with respect to its input (gains frozen).
fn layer_norm_backward(dy: &Matrix, gain: &[f64], xhat: &Matrix, inv_std: &[f64]) -> Matrix {
    let (s, d) = (dy.rows(), dy.cols());
    let mut dx = Matrix::zeros(s, d);
    for t in 0..s {
        let g: Vec<f64> = (0..d).map(|j| dy.get(t, j) * gain[j]).collect();
        let mean_g = g.iter().sum::<f64>() / d as f64;
        let mean_gx = (0..d).map(|j| g[j] * xhat.get(t, j)).sum::<f64>() / d as f64;
        let row = dx.row_mut(t);
        for j in 0..d {
            row[j] = inv_std[t] * (g[j] - mean_g - xhat.get(t, j) * mean_gx);
        }
    }
    dx
}

fn find_adapter<'a>(adapters: &'a [LoraAdapter], target: ProjKind) -> Option<&'a LoraAdapter> {
    adapters.iter().find(|a| a.target() == target)
}

/// Per-block intermediates captured by the forward pass.
struct BlockCache {
    h1: Matrix,
    xhat1: Matrix,
    inv1: Vec<f64>,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// Attention probabilities per head, each `s×s`.
    probs: Vec<Matrix>,
    xhat2: Matrix,
    inv2: Vec<f64>,
    pre: Matrix,
}

/// Everything [`Backbone::backward`] needs: the layer trace of a (possibly
/// truncated) forward pass plus the per-block intermediates.
pub struct BackboneCache {
    layers: Vec<Matrix>,
    blocks: Vec<BlockCache>,
}

impl BackboneCache {
    /// Number of blocks the forward ran through.
    pub fn depth(&self) -> usize {
        self.blocks.len()
    }

    /// Token matrix after block `layer` (0 = tokenized input).
    pub fn layer(&self, layer: usize) -> &Matrix {
        &self.layers[layer]
    }

    pub fn cls_at(&self, layer: usize) -> &[f64] {
        self.layers[layer].row(0)
    }

    pub fn last(&self) -> &Matrix {
        self.layers.last().expect("cache is never empty")
    }

    pub fn into_trace(self) -> LayerTrace {
        super::make_trace(self.layers)
    }
}

pub(super) fn run_forward(
    bb: &Backbone,
    tokens: Matrix,
    stack: &AdapterStack,
    upto: usize,
) -> Result<BackboneCache> {
    let cfg = bb.config();
    let (heads, d) = (cfg.num_heads, cfg.embed_dim);
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut layers = Vec::with_capacity(upto + 1);
    let mut caches = Vec::with_capacity(upto);
    layers.push(tokens);

    for (i, block) in bb.blocks.iter().take(upto).enumerate() {
        let adapters = stack.block(i);
        bb.check_adapter_shapes(adapters)?;
        let z = layers.last().expect("at least the tokens");

        let (h1, xhat1, inv1) = layer_norm(z, &block.ln1_gain, &block.ln1_bias);
        let mut q = h1.matmul_transb(&block.wq);
        let mut k = h1.matmul_transb(&block.wk);
        let mut v = h1.matmul_transb(&block.wv);
        if let Some(ad) = find_adapter(adapters, ProjKind::Query) {
            q.add_scaled(&ad.delta(&h1), 1.0);
        }
        if let Some(ad) = find_adapter(adapters, ProjKind::Key) {
            k.add_scaled(&ad.delta(&h1), 1.0);
        }
        if let Some(ad) = find_adapter(adapters, ProjKind::Value) {
            v.add_scaled(&ad.delta(&h1), 1.0);
        }

        let s = z.rows();
        let mut probs = Vec::with_capacity(heads);
        let mut ctx = Matrix::zeros(s, d);
        for h in 0..heads {
            let off = h * dh;
            let mut p = Matrix::zeros(s, s);
            for ti in 0..s {
                let mut row: Vec<f64> = (0..s)
                    .map(|tj| {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += q.get(ti, off + c) * k.get(tj, off + c);
                        }
                        acc * scale
                    })
                    .collect();
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                p.row_mut(ti).copy_from_slice(&row);
            }
            for ti in 0..s {
                for c in 0..dh {
                    let mut acc = 0.0;
                    for tj in 0..s {
                        acc += p.get(ti, tj) * v.get(tj, off + c);
                    }
                    ctx.set(ti, off + c, acc);
                }
            }
            probs.push(p);
        }

        let o = ctx.matmul_transb(&block.wo);
        let zmid = z.add(&o);
        let (h2, xhat2, inv2) = layer_norm(&zmid, &block.ln2_gain, &block.ln2_bias);
        let mut pre = h2.matmul_transb(&block.w1);
        for t in 0..s {
            let row = pre.row_mut(t);
            for (j, b) in block.b1.iter().enumerate() {
                row[j] += b;
            }
        }
        let act = Matrix::from_fn(pre.rows(), pre.cols(), |i, j| gelu(pre.get(i, j)));
        let mut mout = act.matmul_transb(&block.w2);
        for t in 0..s {
            let row = mout.row_mut(t);
            for (j, b) in block.b2.iter().enumerate() {
                row[j] += b;
            }
        }
        let zout = zmid.add(&mout);

        caches.push(BlockCache {
            h1,
            xhat1,
            inv1,
            q,
            k,
            v,
            probs,
            xhat2,
            inv2,
            pre,
        });
        layers.push(zout);
    }

    Ok(BackboneCache {
        layers,
        blocks: caches,
    })
}

impl Backbone {
    /// Propagates `d_last = dL/dz_upto` down the cached stack, accumulating
    /// adapter gradients into `grads` (shaped like `stack`). Backbone
    /// parameters receive nothing.
    pub fn backward(
        &self,
        cache: &BackboneCache,
        d_last: &Matrix,
        stack: &AdapterStack,
        grads: &mut AdapterGrads,
    ) -> Result<()> {
        let cfg = self.config();
        let (heads, d) = (cfg.num_heads, cfg.embed_dim);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();

        let mut dz = d_last.clone();
        for i in (0..cache.blocks.len()).rev() {
            let block = &self.blocks[i];
            let bc = &cache.blocks[i];
            let adapters = stack.block(i);
            let s = dz.rows();

            // MLP path: zout = zmid + (gelu(h2 W1^T + b1)) W2^T + b2
            let dact = dz.matmul(&block.w2);
            let dpre = Matrix::from_fn(s, cfg.mlp_hidden, |t, j| {
                dact.get(t, j) * gelu_grad(bc.pre.get(t, j))
            });
            let dh2 = dpre.matmul(&block.w1);
            let mut dzmid = dz.clone();
            dzmid.add_scaled(
                &layer_norm_backward(&dh2, &block.ln2_gain, &bc.xhat2, &bc.inv2),
                1.0,
            );

            // Attention path: zmid = z + ctx Wo^T
            let dctx = dzmid.matmul(&block.wo);
            let mut dq = Matrix::zeros(s, d);
            let mut dk = Matrix::zeros(s, d);
            let mut dv = Matrix::zeros(s, d);
            for h in 0..heads {
                let off = h * dh;
                let p = &bc.probs[h];
                // dP = dctx_h V_h^T ; dV_h = P^T dctx_h
                let mut dp = Matrix::zeros(s, s);
                for ti in 0..s {
                    for tj in 0..s {
                        let mut acc = 0.0;
                        for c in 0..dh {
                            acc += dctx.get(ti, off + c) * bc.v.get(tj, off + c);
                        }
                        dp.set(ti, tj, acc);
                    }
                }
                for tj in 0..s {
                    for c in 0..dh {
                        let mut acc = 0.0;
                        for ti in 0..s {
                            acc += p.get(ti, tj) * dctx.get(ti, off + c);
                        }
                        dv.set(tj, off + c, acc);
                    }
                }
                // Softmax backward per row, then the 1/sqrt(dh) score scale.
                let mut ds = Matrix::zeros(s, s);
                for ti in 0..s {
                    let dot: f64 = (0..s).map(|tj| dp.get(ti, tj) * p.get(ti, tj)).sum();
                    for tj in 0..s {
                        ds.set(ti, tj, p.get(ti, tj) * (dp.get(ti, tj) - dot));
                    }
                }
                for ti in 0..s {
                    for c in 0..dh {
                        let mut accq = 0.0;
                        for tj in 0..s {
                            accq += ds.get(ti, tj) * bc.k.get(tj, off + c);
                        }
                        dq.set(ti, off + c, accq * scale);
                    }
                }
                for tj in 0..s {
                    for c in 0..dh {
                        let mut acck = 0.0;
                        for ti in 0..s {
                            acck += ds.get(ti, tj) * bc.q.get(ti, off + c);
                        }
                        dk.set(tj, off + c, acck * scale);
                    }
                }
            }

            // Projections: proj = h1 (W + AB)^T; accumulate adapter grads.
            let mut dh1 = Matrix::zeros(s, d);
            for (dproj, w, target) in [
                (&dq, &block.wq, ProjKind::Query),
                (&dk, &block.wk, ProjKind::Key),
                (&dv, &block.wv, ProjKind::Value),
            ] {
                dh1.add_scaled(&dproj.matmul(w), 1.0);
                if let Some(ad) = find_adapter(adapters, target) {
                    let idx = adapters
                        .iter()
                        .position(|a| a.target() == target)
                        .expect("adapter present");
                    let dproj_a = dproj.matmul(ad.a());
                    dh1.add_scaled(&dproj_a.matmul(ad.b()), 1.0);
                    let hb = bc.h1.matmul_transb(ad.b());
                    let da = dproj.matmul_transa(&hb);
                    grads.accumulate_a(i, idx, &da);
                    if ad.trainable_b() {
                        let db = dproj_a.matmul_transa(&bc.h1);
                        grads.accumulate_b(i, idx, &db);
                    }
                }
            }

            let mut dz_next = dzmid;
            dz_next.add_scaled(
                &layer_norm_backward(&dh1, &block.ln1_gain, &bc.xhat1, &bc.inv1),
                1.0,
            );
            dz = dz_next;
        }
        Ok(())
    }
}
