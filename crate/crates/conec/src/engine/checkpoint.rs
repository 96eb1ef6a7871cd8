//! Full-state checkpointing: magic `CONEC-CK1`, config headers, then every
//! learned parameter as little-endian f64. Loading a checkpoint and
//! re-evaluating reproduces the stored metrics exactly, because the stream
//! itself regenerates deterministically from the stored config.

use std::collections::BTreeMap;

use super::{EngineConfig, EngineState, EvalRow, RunRecord, StepMetrics};
use crate::adapters::{AdapterBank, LoraAdapter, ProjKind, SharedSnapshot};
use crate::backbone::Backbone;
use crate::codec::{Reader, Writer};
use crate::domainid::{DomainClassifier, DomainRouterState, TransformMlp};
use crate::error::{Error, Result};
use crate::heads::{ClassifierHead, HeadKind, LinearHead, StochasticHead};
use crate::mixtures::GmmModel;
use crate::stream::{Shift, StreamConfig};

const MAGIC: &[u8; 9] = b"CONEC-CK1";

/// Everything a checkpoint carries.
pub struct CheckpointContents {
    pub state: EngineState,
    pub stream_config: StreamConfig,
    pub order: Vec<usize>,
    pub record: RunRecord,
}

pub fn save_checkpoint(
    state: &EngineState,
    stream_config: &StreamConfig,
    order: &[usize],
    record: &RunRecord,
) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(MAGIC);
    write_engine_config(&mut w, state.config());
    write_stream_config(&mut w, stream_config);
    write_usize_vec(&mut w, order);

    w.u64(state.num_classes() as u64);
    w.u64(state.max_domains() as u64);
    state.backbone().write_into(&mut w);
    write_bank(&mut w, state.bank());
    w.u64(state.heads().len() as u64);
    for head in state.heads() {
        write_head(&mut w, head);
    }
    match state.snapshot() {
        Some(snap) => {
            w.bool(true);
            write_adapter_blocks(&mut w, snap.adapters());
            let norms = snap.row_norms_all();
            w.u64(norms.len() as u64);
            for block in norms {
                w.u64(block.len() as u64);
                for per_adapter in block {
                    w.f64_vec(per_adapter);
                }
            }
        }
        None => w.bool(false),
    }
    write_router(&mut w, state.router());
    w.u64(state.gmms().len() as u64);
    for ((domain, layer_idx), model) in state.gmms() {
        w.u64(*domain as u64);
        w.u64(*layer_idx as u64);
        write_gmm(&mut w, model);
    }
    write_usize_vec(&mut w, state.domain_ids());
    w.u64(state.router_trained as u64);
    write_record(&mut w, record);
    w.into_bytes()
}

pub fn load_checkpoint(bytes: &[u8]) -> Result<CheckpointContents> {
    let mut r = Reader::new(bytes);
    r.expect_bytes(MAGIC, "engine checkpoint magic")?;
    let config = read_engine_config(&mut r)?;
    let stream_config = read_stream_config(&mut r)?;
    let order = read_usize_vec(&mut r)?;

    let num_classes = r.u64()? as usize;
    let max_domains = r.u64()? as usize;
    let backbone = Backbone::read_from(&mut r)?;
    let bank = read_bank(&mut r)?;
    let n_heads = r.u64()? as usize;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        heads.push(read_head(&mut r)?);
    }
    let snapshot = if r.bool()? {
        let adapters = read_adapter_blocks(&mut r)?;
        let n_blocks = r.u64()? as usize;
        let mut norms = Vec::with_capacity(n_blocks);
        for _ in 0..n_blocks {
            let n_adapters = r.u64()? as usize;
            let mut per_block = Vec::with_capacity(n_adapters);
            for _ in 0..n_adapters {
                per_block.push(r.f64_vec_prefixed()?);
            }
            norms.push(per_block);
        }
        Some(SharedSnapshot::from_parts(adapters, norms))
    } else {
        None
    };
    let router = read_router(&mut r)?;
    let n_gmms = r.u64()? as usize;
    let mut gmms = BTreeMap::new();
    for _ in 0..n_gmms {
        let domain = r.u64()? as usize;
        let layer_idx = r.u64()? as usize;
        gmms.insert((domain, layer_idx), read_gmm(&mut r)?);
    }
    let domain_ids = read_usize_vec(&mut r)?;
    let router_trained = r.u64()? as usize;
    let record = read_record(&mut r)?;
    r.expect_end()?;

    let state = EngineState::from_parts(
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
    );
    Ok(CheckpointContents {
        state,
        stream_config,
        order,
        record,
    })
}

fn write_usize_vec(w: &mut Writer, v: &[usize]) {
    w.u64(v.len() as u64);
    for x in v {
        w.u64(*x as u64);
    }
}

fn read_usize_vec(r: &mut Reader) -> Result<Vec<usize>> {
    let n = r.u64()? as usize;
    (0..n).map(|_| Ok(r.u64()? as usize)).collect()
}

fn write_engine_config(w: &mut Writer, c: &EngineConfig) {
    for v in [
        c.lambda1, c.lambda2, c.tau, c.threshold, c.margin, c.lr_lora, c.lr_dc, c.lr_tm,
        c.momentum, c.eta, c.sigma_init, c.gmm_tol,
    ] {
        w.f64(v);
    }
    for v in [
        c.rank,
        c.batch,
        c.epochs,
        c.router_epochs,
        c.split,
        c.gmm_components,
        c.gmm_max_iter,
        c.synthetic_cap,
        c.num_layers,
        c.embed_dim,
        c.num_tokens,
        c.num_heads,
        c.mlp_hidden,
    ] {
        w.u64(v as u64);
    }
    w.u64(c.seed);
    for v in [
        c.sample_noise_at_inference,
        c.trainable_specific_b,
        c.specific_only,
        c.ball_loss_enabled,
        c.single_layer_router,
    ] {
        w.bool(v);
    }
    w.u64(head_kind_code(c.head_kind));
    w.u64(c.lora_targets.len() as u64);
    for t in &c.lora_targets {
        w.u64(t.code());
    }
}

fn read_engine_config(r: &mut Reader) -> Result<EngineConfig> {
    let mut f = |_: ()| r.f64();
    let lambda1 = f(())?;
    let lambda2 = f(())?;
    let tau = f(())?;
    let threshold = f(())?;
    let margin = f(())?;
    let lr_lora = f(())?;
    let lr_dc = f(())?;
    let lr_tm = f(())?;
    let momentum = f(())?;
    let eta = f(())?;
    let sigma_init = f(())?;
    let gmm_tol = f(())?;
    let rank = r.u64()? as usize;
    let batch = r.u64()? as usize;
    let epochs = r.u64()? as usize;
    let router_epochs = r.u64()? as usize;
    let split = r.u64()? as usize;
    let gmm_components = r.u64()? as usize;
    let gmm_max_iter = r.u64()? as usize;
    let synthetic_cap = r.u64()? as usize;
    let num_layers = r.u64()? as usize;
    let embed_dim = r.u64()? as usize;
    let num_tokens = r.u64()? as usize;
    let num_heads = r.u64()? as usize;
    let mlp_hidden = r.u64()? as usize;
    let seed = r.u64()?;
    let sample_noise_at_inference = r.bool()?;
    let trainable_specific_b = r.bool()?;
    let specific_only = r.bool()?;
    let ball_loss_enabled = r.bool()?;
    let single_layer_router = r.bool()?;
    let head_kind = head_kind_from_code(r.u64()?)?;
    let n_targets = r.u64()? as usize;
    let mut lora_targets = Vec::with_capacity(n_targets);
    for _ in 0..n_targets {
        lora_targets.push(ProjKind::from_code(r.u64()?)?);
    }
    Ok(EngineConfig {
        lambda1,
        lambda2,
        tau,
        threshold,
        margin,
        rank,
        lr_lora,
        lr_dc,
        lr_tm,
        momentum,
        batch,
        epochs,
        router_epochs,
        split,
        head_kind,
        eta,
        sigma_init,
        sample_noise_at_inference,
        trainable_specific_b,
        specific_only,
        ball_loss_enabled,
        single_layer_router,
        gmm_components,
        gmm_max_iter,
        gmm_tol,
        synthetic_cap,
        num_layers,
        embed_dim,
        num_tokens,
        num_heads,
        mlp_hidden,
        lora_targets,
        seed,
    })
}

fn head_kind_code(kind: HeadKind) -> u64 {
    match kind {
        HeadKind::Stochastic => 0,
        HeadKind::Cosine => 1,
        HeadKind::Linear => 2,
    }
}

fn head_kind_from_code(code: u64) -> Result<HeadKind> {
    match code {
        0 => Ok(HeadKind::Stochastic),
        1 => Ok(HeadKind::Cosine),
        2 => Ok(HeadKind::Linear),
        other => Err(Error::InvalidInput(format!("unknown head kind {other}"))),
    }
}

fn write_stream_config(w: &mut Writer, c: &StreamConfig) {
    for v in [
        c.num_domains,
        c.num_classes,
        c.raw_dim,
        c.train_per_class,
        c.test_per_class,
    ] {
        w.u64(v as u64);
    }
    w.f64(c.class_scale);
    w.f64(c.within_std);
    w.bool(c.unseen_test_shift);
    w.u64(c.seed);
    match &c.shifts {
        None => w.bool(false),
        Some(shifts) => {
            w.bool(true);
            w.u64(shifts.len() as u64);
            for s in shifts {
                write_shift(w, s);
            }
        }
    }
}

fn read_stream_config(r: &mut Reader) -> Result<StreamConfig> {
    let num_domains = r.u64()? as usize;
    let num_classes = r.u64()? as usize;
    let raw_dim = r.u64()? as usize;
    let train_per_class = r.u64()? as usize;
    let test_per_class = r.u64()? as usize;
    let class_scale = r.f64()?;
    let within_std = r.f64()?;
    let unseen_test_shift = r.bool()?;
    let seed = r.u64()?;
    let shifts = if r.bool()? {
        let n = r.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(read_shift(r)?);
        }
        Some(out)
    } else {
        None
    };
    Ok(StreamConfig {
        num_domains,
        num_classes,
        raw_dim,
        train_per_class,
        test_per_class,
        shifts,
        class_scale,
        within_std,
        unseen_test_shift,
        seed,
    })
}

fn write_shift(w: &mut Writer, s: &Shift) {
    w.f64(s.rotation_deg);
    w.f64(s.scale);
    w.f64(s.drift);
    w.f64(s.noise);
}

fn read_shift(r: &mut Reader) -> Result<Shift> {
    Ok(Shift {
        rotation_deg: r.f64()?,
        scale: r.f64()?,
        drift: r.f64()?,
        noise: r.f64()?,
    })
}

fn write_adapter(w: &mut Writer, ad: &LoraAdapter) {
    w.matrix(ad.a());
    w.matrix(ad.b());
    w.u64(ad.target().code());
    w.bool(ad.trainable_b());
}

fn read_adapter(r: &mut Reader) -> Result<LoraAdapter> {
    let a = r.matrix_any()?;
    let b = r.matrix_any()?;
    let target = ProjKind::from_code(r.u64()?)?;
    let trainable_b = r.bool()?;
    Ok(LoraAdapter::from_parts(a, b, target, trainable_b))
}

fn write_adapter_blocks(w: &mut Writer, blocks: &[Vec<LoraAdapter>]) {
    w.u64(blocks.len() as u64);
    for block in blocks {
        w.u64(block.len() as u64);
        for ad in block {
            write_adapter(w, ad);
        }
    }
}

fn read_adapter_blocks(r: &mut Reader) -> Result<Vec<Vec<LoraAdapter>>> {
    let n_blocks = r.u64()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let n = r.u64()? as usize;
        let mut block = Vec::with_capacity(n);
        for _ in 0..n {
            block.push(read_adapter(r)?);
        }
        blocks.push(block);
    }
    Ok(blocks)
}

fn write_bank(w: &mut Writer, bank: &AdapterBank) {
    w.u64(bank.split() as u64);
    w.u64(bank.depth() as u64);
    write_adapter_blocks(w, bank.shared());
    w.u64(bank.num_domains() as u64);
    for d in 0..bank.num_domains() {
        write_adapter_blocks(w, bank.specific(d));
    }
}

fn read_bank(r: &mut Reader) -> Result<AdapterBank> {
    let split = r.u64()? as usize;
    let depth = r.u64()? as usize;
    let shared = read_adapter_blocks(r)?;
    let n_domains = r.u64()? as usize;
    let mut specific = Vec::with_capacity(n_domains);
    for _ in 0..n_domains {
        specific.push(read_adapter_blocks(r)?);
    }
    Ok(AdapterBank::from_parts(shared, specific, split, depth))
}

fn write_head(w: &mut Writer, head: &ClassifierHead) {
    match head {
        ClassifierHead::Stochastic(h) => {
            w.u64(0);
            w.matrix(h.mu());
            w.matrix(h.sigma());
            w.f64(h.eta());
        }
        ClassifierHead::Cosine(h) => {
            w.u64(1);
            w.matrix(h.mu());
            w.matrix(h.sigma());
            w.f64(h.eta());
        }
        ClassifierHead::Linear(h) => {
            w.u64(2);
            w.matrix(h.w());
            w.matrix(h.bias());
        }
    }
}

fn read_head(r: &mut Reader) -> Result<ClassifierHead> {
    let tag = r.u64()?;
    match tag {
        0 | 1 => {
            let mu = r.matrix_any()?;
            let sigma = r.matrix_any()?;
            let eta = r.f64()?;
            let h = StochasticHead::from_parts(mu, sigma, eta);
            Ok(if tag == 0 {
                ClassifierHead::Stochastic(h)
            } else {
                ClassifierHead::Cosine(h)
            })
        }
        2 => {
            let w = r.matrix_any()?;
            let b = r.matrix_any()?;
            Ok(ClassifierHead::Linear(LinearHead::from_parts(w, b)))
        }
        other => Err(Error::InvalidInput(format!(
            "unknown head tag {other} in checkpoint"
        ))),
    }
}

fn write_router(w: &mut Writer, router: &DomainRouterState) {
    let (layers, centers, single_layer) = router.parts();
    w.u64(layers.len() as u64);
    for (mlp, clf) in layers {
        let (w1, b1, w2, b2) = mlp.weights();
        w.matrix(w1);
        w.f64_vec(b1);
        w.matrix(w2);
        w.f64_vec(b2);
        w.u64(mlp.layer as u64);
        let (cw, cb) = clf.weights();
        w.matrix(cw);
        w.f64_vec(cb);
        w.u64(clf.layer as u64);
    }
    w.f64(router.threshold());
    w.u64(centers.len() as u64);
    for ((domain, layer_idx), center) in centers {
        w.u64(*domain as u64);
        w.u64(*layer_idx as u64);
        w.f64_vec(center);
    }
    w.u64(router.active_domains() as u64);
    w.bool(single_layer);
}

fn read_router(r: &mut Reader) -> Result<DomainRouterState> {
    let n_layers = r.u64()? as usize;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        let w1 = r.matrix_any()?;
        let b1 = r.f64_vec_prefixed()?;
        let w2 = r.matrix_any()?;
        let b2 = r.f64_vec_prefixed()?;
        let mlp_layer = r.u64()? as usize;
        let mlp = TransformMlp::from_parts(w1, b1, w2, b2, mlp_layer);
        let cw = r.matrix_any()?;
        let cb = r.f64_vec_prefixed()?;
        let clf_layer = r.u64()? as usize;
        let clf = DomainClassifier::from_parts(cw, cb, clf_layer);
        layers.push((mlp, clf));
    }
    let threshold = r.f64()?;
    let n_centers = r.u64()? as usize;
    let mut centers = BTreeMap::new();
    for _ in 0..n_centers {
        let domain = r.u64()? as usize;
        let layer_idx = r.u64()? as usize;
        centers.insert((domain, layer_idx), r.f64_vec_prefixed()?);
    }
    let active = r.u64()? as usize;
    let single_layer = r.bool()?;
    Ok(DomainRouterState::from_parts(
        layers,
        threshold,
        centers,
        active,
        single_layer,
    ))
}

fn write_gmm(w: &mut Writer, model: &GmmModel) {
    w.u64(model.layer as u64);
    w.u64(model.domain as u64);
    w.u64(model.num_components() as u64);
    w.u64(model.dim() as u64);
    w.f64_slice(model.weights());
    for c in 0..model.num_components() {
        w.f64_slice(model.mean(c));
        w.matrix(model.cov(c));
    }
}

fn read_gmm(r: &mut Reader) -> Result<GmmModel> {
    let layer = r.u64()? as usize;
    let domain = r.u64()? as usize;
    let n_comp = r.u64()? as usize;
    let dim = r.u64()? as usize;
    let weights = r.f64_vec(n_comp)?;
    let mut means = Vec::with_capacity(n_comp);
    let mut covs = Vec::with_capacity(n_comp);
    for _ in 0..n_comp {
        means.push(r.f64_vec(dim)?);
        covs.push(r.matrix(dim, dim)?);
    }
    GmmModel::from_parts(weights, means, covs, layer, domain)
}

fn write_record(w: &mut Writer, record: &RunRecord) {
    write_usize_vec(w, &record.order);
    w.u64(record.steps.len() as u64);
    for step in &record.steps {
        w.u64(step.after_domain as u64);
        w.u64(step.rows.len() as u64);
        for row in &step.rows {
            w.u64(row.eval_domain as u64);
            w.f64(row.accuracy);
            w.f64(row.dc_accuracy);
            w.f64(row.oracle_accuracy);
            w.f64(row.exit_layer_mean);
        }
        w.f64(step.avg_accuracy);
        w.f64(step.avg_oracle);
        w.f64(step.avg_dc);
        w.f64(step.avg_exit_layer);
    }
    w.f64(record.avg);
    w.f64(record.last);
    w.f64(record.oracle_last);
    w.f64(record.dc_last);
    w.f64(record.exit_layer_last);
}

fn read_record(r: &mut Reader) -> Result<RunRecord> {
    let order = read_usize_vec(r)?;
    let n_steps = r.u64()? as usize;
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let after_domain = r.u64()? as usize;
        let n_rows = r.u64()? as usize;
        let mut rows = Vec::with_capacity(n_rows);
        for _ in 0..n_rows {
            rows.push(EvalRow {
                eval_domain: r.u64()? as usize,
                accuracy: r.f64()?,
                dc_accuracy: r.f64()?,
                oracle_accuracy: r.f64()?,
                exit_layer_mean: r.f64()?,
            });
        }
        steps.push(StepMetrics {
            after_domain,
            rows,
            avg_accuracy: r.f64()?,
            avg_oracle: r.f64()?,
            avg_dc: r.f64()?,
            avg_exit_layer: r.f64()?,
        });
    }
    Ok(RunRecord {
        order,
        steps,
        avg: r.f64()?,
        last: r.f64()?,
        oracle_last: r.f64()?,
        dc_last: r.f64()?,
        exit_layer_last: r.f64()?,
    })
}
