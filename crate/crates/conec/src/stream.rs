//! Synthetic domain-incremental benchmark generator.
//!
//! One shared label space; class-conditional Gaussians with means on a
//! scaled coordinate simplex; each domain applies a controlled transform
//! (plane rotation, scaling, mean drift, extra noise) to its samples. The
//! joint distribution therefore shifts across domains while the labels stay
//! aligned, which is exactly the regime the engine is built for — and every
//! transform is analytic, so tests can check the generated shifts in closed
//! form.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::{norm, Rng};

/// Per-domain input transform: rotation, scaling, mean drift and extra
/// noise compose (in that order), each defaulting to a no-op. A domain’s
/// drift direction is a seeded unit vector of its own.
#[derive(Debug, Clone, PartialEq)]
pub struct Shift {
    /// Rotates every consecutive coordinate pair `(2i, 2i+1)` by this angle.
    pub rotation_deg: f64,
    pub scale: f64,
    /// Magnitude of the per-domain drift offset.
    pub drift: f64,
    /// Standard deviation of extra isotropic noise.
    pub noise: f64,
}

impl Default for Shift {
    fn default() -> Self {
        Self {
            rotation_deg: 0.0,
            scale: 1.0,
            drift: 0.0,
            noise: 0.0,
        }
    }
}

impl Shift {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn rotation(degrees: f64) -> Self {
        Self {
            rotation_deg: degrees,
            ..Self::default()
        }
    }

    pub fn drift(magnitude: f64) -> Self {
        Self {
            drift: magnitude,
            ..Self::default()
        }
    }

    pub fn scaling(factor: f64) -> Self {
        Self {
            scale: factor,
            ..Self::default()
        }
    }

    pub fn noisy(sigma: f64) -> Self {
        Self {
            noise: sigma,
            ..Self::default()
        }
    }

    pub fn with_drift(mut self, magnitude: f64) -> Self {
        self.drift = magnitude;
        self
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_deg == 0.0 && self.scale == 1.0 && self.drift == 0.0 && self.noise == 0.0
    }

    pub fn describe(&self) -> String {
        if self.is_identity() {
            return "identity".to_string();
        }
        let mut parts = Vec::new();
        if self.rotation_deg != 0.0 {
            parts.push(format!("rot({}deg)", self.rotation_deg));
        }
        if self.scale != 1.0 {
            parts.push(format!("scale({})", self.scale));
        }
        if self.drift != 0.0 {
            parts.push(format!("drift({})", self.drift));
        }
        if self.noise != 0.0 {
            parts.push(format!("noise({})", self.noise));
        }
        parts.join("+")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StreamConfig {
    pub num_domains: usize,
    pub num_classes: usize,
    pub raw_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// One shift per domain; `None` selects the default schedule.
    pub shifts: Option<Vec<Shift>>,
    /// Norm of the class means (corners of a scaled coordinate simplex).
    pub class_scale: f64,
    /// Within-class standard deviation of the base Gaussians.
    pub within_std: f64,
    /// When set, test samples additionally pass through a held-out 15°
    /// rotation their domain never trained on.
    pub unseen_test_shift: bool,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            num_domains: 5,
            num_classes: 4,
            raw_dim: 16,
            train_per_class: 200,
            test_per_class: 100,
            shifts: None,
            class_scale: 8.0,
            within_std: 1.0,
            unseen_test_shift: false,
            seed: 0,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains == 0 || self.num_classes == 0 {
            return Err(Error::Config("domains and classes must be positive".into()));
        }
        if self.raw_dim < 2 {
            return Err(Error::Config("raw_dim must be at least 2".into()));
        }
        if self.num_classes > self.raw_dim {
            return Err(Error::Config(format!(
                "{} classes do not fit on a {}-dim coordinate simplex",
                self.num_classes, self.raw_dim
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "per-class sample counts must be positive".into(),
            ));
        }
        if self.class_scale <= 0.0 || self.within_std <= 0.0 {
            return Err(Error::Config(
                "class_scale and within_std must be positive".into(),
            ));
        }
        if let Some(shifts) = &self.shifts {
            if shifts.len() != self.num_domains {
                return Err(Error::Config(format!(
                    "{} shifts configured for {} domains",
                    shifts.len(),
                    self.num_domains
                )));
            }
        }
        Ok(())
    }

    /// The shift schedule in effect: configured, or the default that
    /// interleaves ±30°/±60° rotations with mean drifts. Every domain past
    /// the first also drifts along its own seeded direction, which keeps the
    /// domains identifiable while the rotations move the class structure.
    pub fn effective_shifts(&self) -> Vec<Shift> {
        if let Some(shifts) = &self.shifts {
            return shifts.clone();
        }
        let drift = 5.0;
        let pattern = [
            Shift::identity(),
            Shift::rotation(30.0).with_drift(drift),
            Shift::drift(drift),
            Shift::rotation(-60.0).with_drift(drift),
            Shift::rotation(60.0).with_drift(drift),
        ];
        (0..self.num_domains)
            .map(|b| {
                let base = pattern[b % pattern.len()].clone();
                if b >= pattern.len() {
                    // Later domains reuse the pattern with stronger drift so
                    // they stay distinguishable from earlier twins.
                    base.with_drift(drift * (1.0 + (b / pattern.len()) as f64))
                } else {
                    base
                }
            })
            .collect()
    }

    /// Class mean for `class`: `class_scale · e_class`.
    pub fn class_mean(&self, class: usize) -> Vec<f64> {
        let mut mean = vec![0.0; self.raw_dim];
        mean[class] = self.class_scale;
        mean
    }
}

/// One domain's train and test splits.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainData {
    pub domain: usize,
    pub train: Vec<(Vec<f64>, usize)>,
    pub test: Vec<(Vec<f64>, usize)>,
}

/// Seeded unit drift direction for a domain.
fn drift_direction(seed: u64, domain: usize, dim: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed).derive(0xD41F7 ^ domain as u64);
    let mut dir = rng.normal_vec(dim);
    let n = norm(&dir);
    for v in &mut dir {
        *v /= n;
    }
    dir
}

/// Rotates consecutive coordinate pairs by `degrees`.
pub fn rotate_pairs(x: &[f64], degrees: f64) -> Vec<f64> {
    let theta = degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let mut out = x.to_vec();
    let mut i = 0;
    while i + 1 < x.len() {
        out[i] = cos * x[i] - sin * x[i + 1];
        out[i + 1] = sin * x[i] + cos * x[i + 1];
        i += 2;
    }
    out
}

fn apply_shift(x: &[f64], shift: &Shift, drift_dir: &[f64], rng: &mut Rng) -> Vec<f64> {
    let mut out = if shift.rotation_deg != 0.0 {
        rotate_pairs(x, shift.rotation_deg)
    } else {
        x.to_vec()
    };
    if shift.scale != 1.0 {
        for v in &mut out {
            *v *= shift.scale;
        }
    }
    if shift.drift != 0.0 {
        for (v, d) in out.iter_mut().zip(drift_dir) {
            *v += shift.drift * d;
        }
    }
    if shift.noise != 0.0 {
        for v in &mut out {
            *v += shift.noise * rng.normal();
        }
    }
    out
}

/// Generates the full stream. Deterministic: the same config produces
/// bitwise-identical datasets.
pub fn generate(config: &StreamConfig) -> Result<Vec<DomainData>> {
    config.validate()?;
    let shifts = config.effective_shifts();
    let mut rng = Rng::new(config.seed).derive(0x57EA);
    let mut domains = Vec::with_capacity(config.num_domains);
    for (b, shift) in shifts.iter().enumerate() {
        let drift_dir = drift_direction(config.seed, b, config.raw_dim);
        let draw_split = |count: usize, is_test: bool, rng: &mut Rng| {
            let mut pairs = Vec::with_capacity(count * config.num_classes);
            for class in 0..config.num_classes {
                let mean = config.class_mean(class);
                for _ in 0..count {
                    let base: Vec<f64> = mean
                        .iter()
                        .map(|m| m + config.within_std * rng.normal())
                        .collect();
                    let mut x = apply_shift(&base, shift, &drift_dir, rng);
                    if is_test && config.unseen_test_shift {
                        x = rotate_pairs(&x, 15.0);
                    }
                    pairs.push((x, class));
                }
            }
            pairs
        };
        let train = draw_split(config.train_per_class, false, &mut rng);
        let test = draw_split(config.test_per_class, true, &mut rng);
        domains.push(DomainData {
            domain: b,
            train,
            test,
        });
    }
    Ok(domains)
}

fn factorial_at_least(n: usize, bound: usize) -> bool {
    let mut acc: usize = 1;
    for i in 2..=n {
        acc = acc.saturating_mul(i);
        if acc >= bound {
            return true;
        }
    }
    acc >= bound
}

/// Deterministic distinct domain orders; the first is always the identity
/// permutation `0..B`.
pub fn domain_orders(num_domains: usize, num_orders: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if num_orders == 0 {
        return Err(Error::Config("num_orders must be at least 1".into()));
    }
    if !factorial_at_least(num_domains, num_orders) {
        return Err(Error::Config(format!(
            "cannot produce {num_orders} distinct orders of {num_domains} domains"
        )));
    }
    let identity: Vec<usize> = (0..num_domains).collect();
    let mut orders = vec![identity.clone()];
    let mut rng = Rng::new(seed).derive(0x0BDE5);
    let mut attempts = 0usize;
    while orders.len() < num_orders {
        let mut perm = identity.clone();
        rng.shuffle(&mut perm);
        if !orders.contains(&perm) {
            orders.push(perm);
        }
        attempts += 1;
        if attempts > 10_000 * num_orders {
            return Err(Error::Numeric(
                "failed to sample distinct domain orders".into(),
            ));
        }
    }
    Ok(orders)
}

/// Which split of a stream to serialize.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// CSV with header `x_0,...,x_{n-1},label,domain`. Floats are printed in
/// shortest round-trip form, so importing reproduces the stream bit-exactly.
pub fn export_csv(domains: &[DomainData], split: Split) -> String {
    let dim = domains
        .first()
        .and_then(|d| d.train.first())
        .map(|(x, _)| x.len())
        .unwrap_or(0);
    let mut out = String::new();
    for j in 0..dim {
        out.push_str(&format!("x_{j},"));
    }
    out.push_str("label,domain\n");
    for dom in domains {
        let rows = match split {
            Split::Train => &dom.train,
            Split::Test => &dom.test,
        };
        for (x, y) in rows {
            for v in x {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{y},{}\n", dom.domain));
        }
    }
    out
}

/// Parses [`export_csv`] output back into per-domain sample lists.
pub fn import_csv(csv: &str) -> Result<BTreeMap<usize, Vec<(Vec<f64>, usize)>>> {
    let mut lines = csv.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::InvalidInput("empty csv".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[cols.len() - 2] != "label" || cols[cols.len() - 1] != "domain" {
        return Err(Error::InvalidInput(
            "csv header must end with label,domain".into(),
        ));
    }
    let dim = cols.len() - 2;
    let mut by_domain: BTreeMap<usize, Vec<(Vec<f64>, usize)>> = BTreeMap::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::InvalidInput(format!(
                "csv row {} has {} fields, expected {}",
                lineno + 2,
                fields.len(),
                dim + 2
            )));
        }
        let parse_err =
            |what: &str| Error::InvalidInput(format!("bad {what} on row {}", lineno + 2));
        let x = fields[..dim]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| parse_err("float")))
            .collect::<Result<Vec<f64>>>()?;
        let label: usize = fields[dim].parse().map_err(|_| parse_err("label"))?;
        let domain: usize = fields[dim + 1].parse().map_err(|_| parse_err("domain"))?;
        by_domain.entry(domain).or_default().push((x, label));
    }
    Ok(by_domain)
}
