//! Experiment runner behind the `conec` binary.
//!
//! Modes: `train` (one run over one domain order), `eval` (re-evaluate a
//! checkpoint and verify it reproduces its stored metrics), `sweep` (average
//! over several domain orders), `ablation` (the component-removal grid) and
//! `dump-embeddings` (per-layer embedding CSV for external projection
//! plots). Every mode writes `metrics.csv`, `metrics.json` and `run.log`
//! into the output directory; the CSV and JSON are generated from the same
//! row list with the same float formatter, so they always carry identical
//! numbers. Domains are numbered 1-based on every user-facing surface.
//!
//! Exit codes: 0 ok, 2 config error, 3 numeric failure, 4 invariant
//! violation, 1 anything else.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use crate::adapters::ProjKind;
use crate::engine::{
    self, load_checkpoint, save_checkpoint, EngineConfig, EngineState, RunRecord,
};
use crate::error::{Error, Result};
use crate::heads::HeadKind;
use crate::stream::{self, DomainData, Shift, Split, StreamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    Sweep,
    Ablation,
    DumpEmbeddings,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Mode::Train),
            "eval" => Ok(Mode::Eval),
            "sweep" => Ok(Mode::Sweep),
            "ablation" => Ok(Mode::Ablation),
            "dump-embeddings" => Ok(Mode::DumpEmbeddings),
            other => Err(Error::Config(format!(
                "unknown mode '{other}' (train|eval|sweep|ablation|dump-embeddings)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunSpec {
    pub config_path: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub mode: Mode,
    pub seed_override: Option<u64>,
    /// 1-based domain numbers in arrival order.
    pub order_override: Option<Vec<usize>>,
    pub checkpoint: Option<PathBuf>,
}

pub const USAGE: &str = "usage: conec --mode MODE [--config PATH] [--out DIR] \
[--seed N] [--order \"3,1,2\"] [--checkpoint PATH]
modes: train | eval | sweep | ablation | dump-embeddings
exit codes: 0 ok, 2 config error, 3 numeric failure, 4 invariant violation";

pub fn parse_args(args: &[String]) -> Result<RunSpec> {
    let mut config_path = None;
    let mut out_dir = PathBuf::from("out");
    let mut mode = None;
    let mut seed_override = None;
    let mut order_override = None;
    let mut checkpoint = None;

    let mut it = args.iter();
    while let Some(arg) = it.next() {
        let mut value = |name: &str| -> Result<String> {
            it.next()
                .cloned()
                .ok_or_else(|| Error::Config(format!("{name} requires a value")))
        };
        match arg.as_str() {
            "--config" => config_path = Some(PathBuf::from(value("--config")?)),
            "--out" => out_dir = PathBuf::from(value("--out")?),
            "--mode" => mode = Some(Mode::parse(&value("--mode")?)?),
            "--seed" => {
                seed_override = Some(
                    value("--seed")?
                        .parse::<u64>()
                        .map_err(|_| Error::Config("--seed expects an unsigned integer".into()))?,
                )
            }
            "--order" => {
                let raw = value("--order")?;
                let order = raw
                    .split(',')
                    .map(|tok| {
                        tok.trim()
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad --order entry '{tok}'")))
                    })
                    .collect::<Result<Vec<usize>>>()?;
                order_override = Some(order);
            }
            "--checkpoint" => checkpoint = Some(PathBuf::from(value("--checkpoint")?)),
            "--help" | "-h" => {
                return Err(Error::Config(USAGE.to_string()));
            }
            other => return Err(Error::Config(format!("unknown argument '{other}'"))),
        }
    }
    let mode = mode.ok_or_else(|| Error::Config(format!("--mode is required\n{USAGE}")))?;
    Ok(RunSpec {
        config_path,
        out_dir,
        mode,
        seed_override,
        order_override,
        checkpoint,
    })
}

/// Process exit code for an error, per the documented contract.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Numeric(_) => 3,
        Error::Invariant(_) => 4,
        _ => 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Conec,
    Finetune,
}

/// Everything a config file can set.
#[derive(Debug, Clone)]
pub struct FileConfig {
    pub engine: EngineConfig,
    pub stream: StreamConfig,
    pub num_orders: usize,
    pub method: Method,
}

impl Default for FileConfig {
    fn default() -> Self {
        Self {
            engine: EngineConfig::default(),
            stream: StreamConfig::default(),
            num_orders: 5,
            method: Method::Conec,
        }
    }
}

impl FileConfig {
    /// Parses the flat `key = value` format. `#` starts a comment; unknown
    /// keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = FileConfig::default();
        let mut stream_seed_set = false;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad =
                |what: &str| Error::Config(format!("line {}: bad {what} '{value}'", lineno + 1));
            let parse_u = || value.parse::<usize>().map_err(|_| bad("integer"));
            let parse_f = || value.parse::<f64>().map_err(|_| bad("float"));
            let parse_b = || match value {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(bad("bool")),
            };
            match key {
                // stream
                "num_domains" => cfg.stream.num_domains = parse_u()?,
                "num_classes" => cfg.stream.num_classes = parse_u()?,
                "raw_dim" => cfg.stream.raw_dim = parse_u()?,
                "train_per_class" => cfg.stream.train_per_class = parse_u()?,
                "test_per_class" => cfg.stream.test_per_class = parse_u()?,
                "class_scale" => cfg.stream.class_scale = parse_f()?,
                "within_std" => cfg.stream.within_std = parse_f()?,
                "unseen_test_shift" => cfg.stream.unseen_test_shift = parse_b()?,
                "stream_seed" => {
                    cfg.stream.seed = value.parse().map_err(|_| bad("integer"))?;
                    stream_seed_set = true;
                }
                "shifts" => cfg.stream.shifts = Some(parse_shifts(value)?),
                // engine
                "lambda1" => cfg.engine.lambda1 = parse_f()?,
                "lambda2" => cfg.engine.lambda2 = parse_f()?,
                "tau" => cfg.engine.tau = parse_f()?,
                "threshold" => cfg.engine.threshold = parse_f()?,
                "margin" => cfg.engine.margin = parse_f()?,
                "rank" => cfg.engine.rank = parse_u()?,
                "lr_lora" => cfg.engine.lr_lora = parse_f()?,
                "lr_dc" => cfg.engine.lr_dc = parse_f()?,
                "lr_tm" => cfg.engine.lr_tm = parse_f()?,
                "momentum" => cfg.engine.momentum = parse_f()?,
                "batch" => cfg.engine.batch = parse_u()?,
                "epochs" => cfg.engine.epochs = parse_u()?,
                "router_epochs" => cfg.engine.router_epochs = parse_u()?,
                "split" => cfg.engine.split = parse_u()?,
                "head" => cfg.engine.head_kind = HeadKind::parse(value)?,
                "eta" => cfg.engine.eta = parse_f()?,
                "sigma_init" => cfg.engine.sigma_init = parse_f()?,
                "sample_noise_at_inference" => cfg.engine.sample_noise_at_inference = parse_b()?,
                "trainable_specific_b" => cfg.engine.trainable_specific_b = parse_b()?,
                "specific_only" => cfg.engine.specific_only = parse_b()?,
                "ball_loss" => cfg.engine.ball_loss_enabled = parse_b()?,
                "single_layer_router" => cfg.engine.single_layer_router = parse_b()?,
                "gmm_components" => cfg.engine.gmm_components = parse_u()?,
                "gmm_max_iter" => cfg.engine.gmm_max_iter = parse_u()?,
                "gmm_tol" => cfg.engine.gmm_tol = parse_f()?,
                "synthetic_cap" => cfg.engine.synthetic_cap = parse_u()?,
                "num_layers" => cfg.engine.num_layers = parse_u()?,
                "embed_dim" => cfg.engine.embed_dim = parse_u()?,
                "num_tokens" => cfg.engine.num_tokens = parse_u()?,
                "num_heads" => cfg.engine.num_heads = parse_u()?,
                "mlp_hidden" => cfg.engine.mlp_hidden = parse_u()?,
                "lora_targets" => cfg.engine.lora_targets = ProjKind::parse_set(value)?,
                "seed" => {
                    cfg.engine.seed = value.parse().map_err(|_| bad("integer"))?;
                    if !stream_seed_set {
                        cfg.stream.seed = cfg.engine.seed;
                    }
                }
                // run
                "num_orders" => cfg.num_orders = parse_u()?,
                "method" => {
                    cfg.method = match value {
                        "conec" => Method::Conec,
                        "finetune" => Method::Finetune,
                        _ => return Err(bad("method (conec|finetune)")),
                    }
                }
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key '{other}'",
                        lineno + 1
                    )))
                }
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply_overrides(&mut self, spec: &RunSpec) {
        if let Some(seed) = spec.seed_override {
            self.engine.seed = seed;
            self.stream.seed = seed;
        }
    }
}

/// One entry per domain, comma-separated. Each entry is `identity` or a
/// `+`-joined list of components: `rot:<deg>`, `scale:<f>`, `drift:<mag>`,
/// `noise:<sigma>` — e.g. `identity, rot:30+drift:5, drift:5`.
fn parse_shifts(value: &str) -> Result<Vec<Shift>> {
    value
        .split(',')
        .map(|tok| {
            let tok = tok.trim();
            if tok == "identity" {
                return Ok(Shift::identity());
            }
            let mut shift = Shift::identity();
            for part in tok.split('+') {
                let (kind, param) = part
                    .trim()
                    .split_once(':')
                    .ok_or_else(|| Error::Config(format!("bad shift component '{part}'")))?;
                let param: f64 = param
                    .parse()
                    .map_err(|_| Error::Config(format!("bad shift parameter in '{part}'")))?;
                match kind {
                    "rot" => shift.rotation_deg = param,
                    "scale" => shift.scale = param,
                    "drift" => shift.drift = param,
                    "noise" => shift.noise = param,
                    other => {
                        return Err(Error::Config(format!("unknown shift kind '{other}'")))
                    }
                }
            }
            Ok(shift)
        })
        .collect()
}

fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// One line of the metrics table. The label columns are strings so sweep
/// aggregates (`mean`/`std`) fit the fixed schema.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub order_id: String,
    pub after_domain: String,
    pub eval_domain: String,
    pub accuracy: f64,
    pub dc_accuracy: f64,
    pub oracle_accuracy: f64,
    pub exit_layer_mean: f64,
}

pub const METRICS_HEADER: &str =
    "order_id,after_domain,eval_domain,accuracy,dc_accuracy,oracle_accuracy,exit_layer_mean";

/// Detail rows of one run. Domains print 1-based.
pub fn record_rows(order_label: &str, record: &RunRecord) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for step in &record.steps {
        for row in &step.rows {
            rows.push(MetricsRow {
                order_id: order_label.to_string(),
                after_domain: step.after_domain.to_string(),
                eval_domain: (row.eval_domain + 1).to_string(),
                accuracy: row.accuracy,
                dc_accuracy: row.dc_accuracy,
                oracle_accuracy: row.oracle_accuracy,
                exit_layer_mean: row.exit_layer_mean,
            });
        }
    }
    rows
}

/// Sweep aggregates over the final step of each order: mean and standard
/// deviation of last accuracy, DC accuracy, oracle accuracy and exit layer.
pub fn aggregate_rows(records: &[RunRecord]) -> Vec<MetricsRow> {
    let n = records.len() as f64;
    let columns = [
        records.iter().map(|r| r.last).collect::<Vec<f64>>(),
        records.iter().map(|r| r.dc_last).collect::<Vec<f64>>(),
        records.iter().map(|r| r.oracle_last).collect::<Vec<f64>>(),
        records.iter().map(|r| r.exit_layer_last).collect::<Vec<f64>>(),
    ];
    let mean: Vec<f64> = columns.iter().map(|c| c.iter().sum::<f64>() / n).collect();
    let std: Vec<f64> = columns
        .iter()
        .zip(&mean)
        .map(|(c, m)| (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt())
        .collect();
    let row = |label: &str, vals: &[f64]| MetricsRow {
        order_id: label.to_string(),
        after_domain: "final".to_string(),
        eval_domain: "all".to_string(),
        accuracy: vals[0],
        dc_accuracy: vals[1],
        oracle_accuracy: vals[2],
        exit_layer_mean: vals[3],
    };
    vec![row("mean", &mean), row("std", &std)]
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.order_id,
            r.after_domain,
            r.eval_domain,
            fmt_f64(r.accuracy),
            fmt_f64(r.dc_accuracy),
            fmt_f64(r.oracle_accuracy),
            fmt_f64(r.exit_layer_mean)
        );
    }
    out
}

pub fn metrics_json(rows: &[MetricsRow]) -> String {
    let mut out = String::from("{\n  \"rows\": [\n");
    for (i, r) in rows.iter().enumerate() {
        let _ = write!(
            out,
            "    {{\"order_id\": \"{}\", \"after_domain\": \"{}\", \"eval_domain\": \"{}\", \
             \"accuracy\": {}, \"dc_accuracy\": {}, \"oracle_accuracy\": {}, \
             \"exit_layer_mean\": {}}}",
            r.order_id,
            r.after_domain,
            r.eval_domain,
            fmt_f64(r.accuracy),
            fmt_f64(r.dc_accuracy),
            fmt_f64(r.oracle_accuracy),
            fmt_f64(r.exit_layer_mean)
        );
        out.push_str(if i + 1 < rows.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");
    out
}

fn write_metrics(dir: &Path, rows: &[MetricsRow]) -> Result<()> {
    fs::write(dir.join("metrics.csv"), metrics_csv(rows))?;
    fs::write(dir.join("metrics.json"), metrics_json(rows))?;
    Ok(())
}

struct RunLog {
    lines: Vec<String>,
}

impl RunLog {
    fn new() -> Self {
        Self { lines: Vec::new() }
    }

    fn log(&mut self, msg: impl AsRef<str>) {
        let stamp = SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.lines.push(format!("[{stamp}] {}", msg.as_ref()));
    }

    fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("run.log"), self.lines.join("\n") + "\n")?;
        Ok(())
    }
}

/// 1-based user order → 0-based internal indices, validated as a full
/// permutation.
fn internal_order(user_order: &[usize], num_domains: usize) -> Result<Vec<usize>> {
    let mut seen = vec![false; num_domains];
    let mut out = Vec::with_capacity(user_order.len());
    for &d in user_order {
        if d == 0 || d > num_domains {
            return Err(Error::Config(format!(
                "order entry {d} out of range 1..={num_domains}"
            )));
        }
        if seen[d - 1] {
            return Err(Error::Config(format!("order repeats domain {d}")));
        }
        seen[d - 1] = true;
        out.push(d - 1);
    }
    if out.len() != num_domains {
        return Err(Error::Config(format!(
            "order must list all {num_domains} domains"
        )));
    }
    Ok(out)
}

fn order_label(order: &[usize]) -> String {
    order
        .iter()
        .map(|d| (d + 1).to_string())
        .collect::<Vec<_>>()
        .join("-")
}

/// Runs one full training pass with per-step logging.
fn drive_run(
    cfg: &FileConfig,
    domains: &[DomainData],
    order: &[usize],
    log: &mut RunLog,
) -> Result<(EngineState, RunRecord)> {
    log.log(format!("order {}", order_label(order)));
    let mut state = EngineState::new(
        cfg.engine.clone(),
        cfg.stream.raw_dim,
        cfg.stream.num_classes,
        cfg.stream.num_domains,
    )?;
    let mut steps = Vec::new();
    let mut seen: Vec<&DomainData> = Vec::new();
    for &idx in order {
        let data = domains.get(idx).ok_or_else(|| {
            Error::Config(format!("order references domain {} beyond stream", idx + 1))
        })?;
        let train_report = state.train_domain(data)?;
        log.log(format!(
            "domain {} trained: final ce {:.4}, kd {:.4}, train acc {:.4}",
            data.domain + 1,
            train_report.final_ce,
            train_report.final_kd,
            train_report.train_accuracy
        ));
        let router_report = state.train_router_step(data)?;
        log.log(format!(
            "domain {} router: per-layer dc acc [{}], {} synthetic per past domain",
            data.domain + 1,
            router_report
                .per_layer_accuracy
                .iter()
                .map(|a| format!("{a:.4}"))
                .collect::<Vec<_>>()
                .join(", "),
            router_report.synthetic_per_domain
        ));
        seen.push(data);
        let metrics = state.evaluate(&seen)?;
        log.log(format!(
            "after domain {}: avg acc {:.4}, dc {:.4}, oracle {:.4}, mean exit layer {:.2}",
            metrics.after_domain,
            metrics.avg_accuracy,
            metrics.avg_dc,
            metrics.avg_oracle,
            metrics.avg_exit_layer
        ));
        steps.push(metrics);
    }
    let record = RunRecord::from_steps(order.to_vec(), steps);
    Ok((state, record))
}

pub fn run(spec: &RunSpec) -> Result<()> {
    fs::create_dir_all(&spec.out_dir)?;
    let mut log = RunLog::new();
    let result = dispatch(spec, &mut log);
    // The log is best-effort output even when the run fails.
    if let Err(e) = &result {
        log.log(format!("error: {e}"));
    }
    log.write(&spec.out_dir).ok();
    result
}

fn dispatch(spec: &RunSpec, log: &mut RunLog) -> Result<()> {
    match spec.mode {
        Mode::Train => run_train(spec, log),
        Mode::Eval => run_eval(spec, log),
        Mode::Sweep => run_sweep(spec, log),
        Mode::Ablation => run_ablation(spec, log),
        Mode::DumpEmbeddings => run_dump(spec, log),
    }
}

fn load_config(spec: &RunSpec) -> Result<FileConfig> {
    let mut cfg = match &spec.config_path {
        Some(path) => FileConfig::load(path)?,
        None => FileConfig::default(),
    };
    cfg.apply_overrides(spec);
    cfg.stream.validate()?;
    cfg.engine.validate()?;
    Ok(cfg)
}

fn resolve_order(spec: &RunSpec, cfg: &FileConfig) -> Result<Vec<usize>> {
    match &spec.order_override {
        Some(user) => internal_order(user, cfg.stream.num_domains),
        None => Ok((0..cfg.stream.num_domains).collect()),
    }
}

fn run_train(spec: &RunSpec, log: &mut RunLog) -> Result<()> {
    let cfg = load_config(spec)?;
    let order = resolve_order(spec, &cfg)?;
    let domains = stream::generate(&cfg.stream)?;
    log.log(format!(
        "train: {} domains, {} classes, method {:?}, seed {}",
        cfg.stream.num_domains, cfg.stream.num_classes, cfg.method, cfg.engine.seed
    ));

    let rows = match cfg.method {
        Method::Conec => {
            let (state, record) = drive_run(&cfg, &domains, &order, log)?;
            let bytes = save_checkpoint(&state, &cfg.stream, &order, &record);
            fs::write(spec.out_dir.join("checkpoint.bin"), bytes)?;
            log.log("checkpoint written to checkpoint.bin");
            record_rows("0", &record)
        }
        Method::Finetune => {
            let record = engine::run_finetune(&cfg.engine, &cfg.stream, &domains, &order)?;
            log.log(format!(
                "finetune baseline: avg {:.4}, last {:.4}",
                record.avg, record.last
            ));
            record_rows("0", &record)
        }
    };
    write_metrics(&spec.out_dir, &rows)
}

fn run_eval(spec: &RunSpec, log: &mut RunLog) -> Result<()> {
    let path = spec
        .checkpoint
        .as_ref()
        .ok_or_else(|| Error::Config("eval mode requires --checkpoint".into()))?;
    let bytes = fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let contents = load_checkpoint(&bytes)?;
    log.log(format!(
        "eval: checkpoint with {} trained domains, order {}",
        contents.state.trained_domains(),
        order_label(&contents.order)
    ));

    let domains = stream::generate(&contents.stream_config)?;
    let seen: Vec<&DomainData> = contents.order.iter().map(|&i| &domains[i]).collect();
    let recomputed = contents.state.evaluate(&seen)?;
    let stored_last = contents
        .record
        .steps
        .last()
        .ok_or_else(|| Error::InvalidInput("checkpoint stores no metrics".into()))?;
    if &recomputed != stored_last {
        return Err(Error::Invariant(
            "re-evaluated metrics do not reproduce the stored record".into(),
        ));
    }
    log.log("re-evaluation reproduced the stored final-step metrics exactly");
    let rows = record_rows("0", &contents.record);
    write_metrics(&spec.out_dir, &rows)
}

fn run_sweep(spec: &RunSpec, log: &mut RunLog) -> Result<()> {
    if spec.order_override.is_some() {
        return Err(Error::Config(
            "--order conflicts with sweep mode (orders are generated)".into(),
        ));
    }
    let cfg = load_config(spec)?;
    let orders = stream::domain_orders(cfg.stream.num_domains, cfg.num_orders, cfg.engine.seed)?;
    let domains = stream::generate(&cfg.stream)?;
    log.log(format!(
        "sweep: {} orders over {} domains, method {:?}",
        orders.len(),
        cfg.stream.num_domains,
        cfg.method
    ));

    let mut rows = Vec::new();
    let mut records = Vec::new();
    for (k, order) in orders.iter().enumerate() {
        let record = match cfg.method {
            Method::Conec => {
                let (state, record) = drive_run(&cfg, &domains, order, log)?;
                let bytes = save_checkpoint(&state, &cfg.stream, order, &record);
                fs::write(spec.out_dir.join(format!("checkpoint_order{k}.bin")), bytes)?;
                record
            }
            Method::Finetune => engine::run_finetune(&cfg.engine, &cfg.stream, &domains, order)?,
        };
        log.log(format!(
            "order {} ({}): avg {:.4}, last {:.4}, dc {:.4}",
            k,
            order_label(order),
            record.avg,
            record.last,
            record.dc_last
        ));
        rows.extend(record_rows(&k.to_string(), &record));
        records.push(record);
    }
    rows.extend(aggregate_rows(&records));
    write_metrics(&spec.out_dir, &rows)
}

fn run_ablation(spec: &RunSpec, log: &mut RunLog) -> Result<()> {
    let cfg = load_config(spec)?;
    let order = resolve_order(spec, &cfg)?;
    let domains = stream::generate(&cfg.stream)?;
    log.log("ablation grid");

    let variants: Vec<(&str, fn(&mut FileConfig))> = vec![
        ("base", |_| {}),
        ("cosine_head", |c| c.engine.head_kind = HeadKind::Cosine),
        ("linear_head", |c| c.engine.head_kind = HeadKind::Linear),
        ("specific_only", |c| c.engine.specific_only = true),
        ("no_ball_loss", |c| c.engine.ball_loss_enabled = false),
        ("single_layer_dc", |c| c.engine.single_layer_router = true),
    ];

    let mut rows = Vec::new();
    let mut summary = String::from("description,avg,last,dc_last\n");
    for (name, tweak) in variants {
        let mut vcfg = cfg.clone();
        tweak(&mut vcfg);
        let (_, record) = drive_run(&vcfg, &domains, &order, log)?;
        log.log(format!(
            "variant {name}: avg {:.4}, last {:.4}, dc {:.4}",
            record.avg, record.last, record.dc_last
        ));
        let _ = writeln!(
            summary,
            "{name},{},{},{}",
            fmt_f64(record.avg),
            fmt_f64(record.last),
            fmt_f64(record.dc_last)
        );
        rows.extend(record_rows(name, &record));
    }
    fs::write(spec.out_dir.join("ablation.csv"), summary)?;
    write_metrics(&spec.out_dir, &rows)
}

fn run_dump(spec: &RunSpec, log: &mut RunLog) -> Result<()> {
    let (state, stream_config, order, record) = match &spec.checkpoint {
        Some(path) => {
            let bytes = fs::read(path).map_err(|e| {
                Error::Config(format!("cannot read checkpoint {}: {e}", path.display()))
            })?;
            let c = load_checkpoint(&bytes)?;
            log.log("dump-embeddings: state loaded from checkpoint");
            (c.state, c.stream_config, c.order, c.record)
        }
        None => {
            let cfg = load_config(spec)?;
            let order = resolve_order(spec, &cfg)?;
            let domains = stream::generate(&cfg.stream)?;
            log.log("dump-embeddings: training a fresh state first");
            let (state, record) = drive_run(&cfg, &domains, &order, log)?;
            (state, cfg.stream.clone(), order, record)
        }
    };

    let domains = stream::generate(&stream_config)?;
    let depth = state.config().num_layers;
    let dim = state.config().embed_dim;
    let mut csv = String::from("domain,class,layer");
    for j in 0..dim {
        let _ = write!(csv, ",e_{j}");
    }
    csv.push('\n');
    for (arrival, &dom_idx) in order.iter().enumerate() {
        let data = &domains[dom_idx];
        let stack = state.bank().stack_for(arrival);
        for (x, y) in &data.test {
            let trace = state.backbone().forward_with_adapters(x, &stack)?;
            for layer in 1..=depth {
                let _ = write!(csv, "{},{},{layer}", data.domain + 1, y);
                for v in trace.cls_at(layer) {
                    let _ = write!(csv, ",{v}");
                }
                csv.push('\n');
            }
        }
    }
    fs::write(spec.out_dir.join("embeddings.csv"), csv)?;
    log.log("embeddings written to embeddings.csv");

    // Also export the stream and the stored metrics for convenience.
    fs::write(
        spec.out_dir.join("stream_train.csv"),
        stream::export_csv(&domains, Split::Train),
    )?;
    fs::write(
        spec.out_dir.join("stream_test.csv"),
        stream::export_csv(&domains, Split::Test),
    )?;
    let rows = record_rows("0", &record);
    write_metrics(&spec.out_dir, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn args_parse_roundtrip() {
        let args: Vec<String> = [
            "--mode",
            "train",
            "--config",
            "cfg.txt",
            "--seed",
            "7",
            "--order",
            "3,1,2",
            "--out",
            "results",
            "--checkpoint",
            "ck.bin",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        let spec = parse_args(&args).unwrap();
        assert_eq!(spec.mode, Mode::Train);
        assert_eq!(spec.seed_override, Some(7));
        assert_eq!(spec.order_override, Some(vec![3, 1, 2]));
        assert_eq!(spec.out_dir, PathBuf::from("results"));
    }

    #[test]
    fn unknown_arguments_and_modes_are_config_errors() {
        let args = vec!["--frobnicate".to_string()];
        assert!(matches!(parse_args(&args), Err(Error::Config(_))));
        let args = vec!["--mode".to_string(), "dance".to_string()];
        assert!(matches!(parse_args(&args), Err(Error::Config(_))));
        let args = vec![];
        assert!(matches!(parse_args(&args), Err(Error::Config(_))));
    }

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let cfg = FileConfig::parse(
            "num_domains = 3\nlambda1 = 4.5\nhead = cosine\nseed = 99\n# comment\n\nshifts = identity, rot:45, rot:30+drift:2.5\n",
        )
        .unwrap();
        assert_eq!(cfg.stream.num_domains, 3);
        assert_eq!(cfg.engine.lambda1, 4.5);
        assert_eq!(cfg.engine.head_kind, HeadKind::Cosine);
        assert_eq!(cfg.engine.seed, 99);
        assert_eq!(cfg.stream.seed, 99);
        assert_eq!(
            cfg.stream.shifts.as_ref().unwrap()[1],
            Shift::rotation(45.0)
        );

        assert!(FileConfig::parse("nonsense_key = 1\n").is_err());
        assert!(FileConfig::parse("lambda1\n").is_err());
        assert!(FileConfig::parse("lambda1 = many\n").is_err());
    }

    #[test]
    fn stream_seed_override_order_is_respected() {
        let cfg = FileConfig::parse("stream_seed = 5\nseed = 9\n").unwrap();
        assert_eq!(cfg.stream.seed, 5);
        assert_eq!(cfg.engine.seed, 9);
        let cfg = FileConfig::parse("seed = 9\nstream_seed = 5\n").unwrap();
        assert_eq!(cfg.stream.seed, 5);
    }

    #[test]
    fn sweeps_default_to_five_domain_orders() {
        assert_eq!(FileConfig::default().num_orders, 5);
    }

    #[test]
    fn internal_order_validation() {
        assert_eq!(internal_order(&[3, 1, 2], 3).unwrap(), vec![2, 0, 1]);
        assert!(internal_order(&[0, 1, 2], 3).is_err());
        assert!(internal_order(&[1, 1, 2], 3).is_err());
        assert!(internal_order(&[1, 2], 3).is_err());
        assert!(internal_order(&[1, 2, 4], 3).is_err());
    }

    #[test]
    fn csv_and_json_carry_identical_numbers() {
        let rows = vec![MetricsRow {
            order_id: "0".into(),
            after_domain: "2".into(),
            eval_domain: "1".into(),
            accuracy: 0.912345678901,
            dc_accuracy: 1.0 / 3.0,
            oracle_accuracy: 0.95,
            exit_layer_mean: 1.25,
        }];
        let csv = metrics_csv(&rows);
        let json = metrics_json(&rows);
        for v in [0.912345678901f64, 1.0 / 3.0, 0.95, 1.25] {
            let s = fmt_f64(v);
            assert!(csv.contains(&s), "csv missing {s}");
            assert!(json.contains(&s), "json missing {s}");
            let reparsed: f64 = s.parse().unwrap();
            assert_eq!(reparsed.to_bits(), v.to_bits());
        }
    }

    #[test]
    fn exit_codes_map_error_kinds() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Numeric("x".into())), 3);
        assert_eq!(exit_code(&Error::Invariant("x".into())), 4);
        assert_eq!(exit_code(&Error::InvalidInput("x".into())), 1);
    }
}
