//! Per-layer, per-domain Gaussian mixture models.
//!
//! After a domain is trained, each layer's CLS embeddings are summarized by
//! a small full-covariance mixture fit with EM. When later domains train
//! the auxiliary domain classifiers, synthetic embeddings of past domains
//! are replayed by sampling these mixtures (categorical over the component
//! weights, then a Cholesky-transformed normal draw).
//!
//! Numerical hygiene: densities go through Cholesky factors (no explicit
//! inverses), every M-step adds trace-scaled diagonal jitter so
//! near-degenerate layers stay factorizable, and an emptied component is
//! re-seeded at a random data point with the global covariance.

use crate::error::{Error, Result};
use crate::numkit::{cholesky, solve_lower, Matrix, Rng};

const LN_2PI: f64 = 1.837_877_066_409_345_3;
const COV_JITTER_REL: f64 = 1e-6;

/// One fitted mixture: weights on the simplex, full-covariance components,
/// and the (layer, domain) slot it models.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    means: Vec<Vec<f64>>,
    covs: Vec<Matrix>,
    pub layer: usize,
    pub domain: usize,
    ll_trace: Vec<f64>,
}

impl GmmModel {
    pub fn from_parts(
        weights: Vec<f64>,
        means: Vec<Vec<f64>>,
        covs: Vec<Matrix>,
        layer: usize,
        domain: usize,
    ) -> Result<Self> {
        let c = weights.len();
        if c == 0 || means.len() != c || covs.len() != c {
            return Err(Error::InvalidShape(
                "component counts of weights/means/covs disagree".into(),
            ));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|w| *w < 0.0 || *w > 1.0) || (sum - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidInput(format!(
                "weights must lie on the simplex (sum {sum})"
            )));
        }
        Ok(Self {
            weights,
            means,
            covs,
            layer,
            domain,
            ll_trace: Vec::new(),
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    pub fn cov(&self, c: usize) -> &Matrix {
        &self.covs[c]
    }

    /// Log-likelihood after each EM iteration of the fit that produced this
    /// model (diagnostic; empty for models built from parts).
    pub fn ll_trace(&self) -> &[f64] {
        &self.ll_trace
    }

    /// Mixture log-density via logsumexp over the components.
    pub fn logpdf(&self, z: &[f64]) -> Result<f64> {
        let mut terms = Vec::with_capacity(self.num_components());
        for c in 0..self.num_components() {
            if self.weights[c] == 0.0 {
                continue;
            }
            terms.push(self.weights[c].ln() + gaussian_logpdf(z, &self.means[c], &self.covs[c])?);
        }
        Ok(logsumexp(&terms))
    }

    /// Draws `n` rows: component by categorical(ω), then `ν + L·ε`.
    pub fn sample(&self, n: usize, rng: &mut Rng) -> Result<Matrix> {
        let d = self.dim();
        let factors: Vec<Matrix> = self
            .covs
            .iter()
            .map(cholesky)
            .collect::<Result<Vec<_>>>()
            .map_err(|e| {
                Error::Numeric(format!(
                    "sampling GMM for domain {} layer {}: {e}",
                    self.domain, self.layer
                ))
            })?;
        let mut out = Matrix::zeros(n, d);
        for i in 0..n {
            let mut u = rng.uniform();
            let mut comp = self.num_components() - 1;
            for (c, w) in self.weights.iter().enumerate() {
                if u < *w {
                    comp = c;
                    break;
                }
                u -= w;
            }
            let eps = rng.normal_vec(d);
            let l = &factors[comp];
            let row = out.row_mut(i);
            for r in 0..d {
                let mut acc = self.means[comp][r];
                for k in 0..=r {
                    acc += l.get(r, k) * eps[k];
                }
                row[r] = acc;
            }
        }
        Ok(out)
    }

    /// CSV dump of `(layer, domain, component, weight, mean…, cov diagonal…)`
    /// for external inspection.
    pub fn to_csv(&self) -> String {
        let d = self.dim();
        let mut out = String::from("layer,domain,component,weight");
        for j in 0..d {
            out.push_str(&format!(",nu_{j}"));
        }
        for j in 0..d {
            out.push_str(&format!(",kdiag_{j}"));
        }
        out.push('\n');
        for c in 0..self.num_components() {
            out.push_str(&format!(
                "{},{},{c},{}",
                self.layer, self.domain, self.weights[c]
            ));
            for j in 0..d {
                out.push_str(&format!(",{}", self.means[c][j]));
            }
            for j in 0..d {
                out.push_str(&format!(",{}", self.covs[c].get(j, j)));
            }
            out.push('\n');
        }
        out
    }
}

/// Multivariate normal log-density via the Cholesky factor of `K`.
pub fn gaussian_logpdf(z: &[f64], nu: &[f64], k: &Matrix) -> Result<f64> {
    let d = nu.len();
    if z.len() != d || k.rows() != d || k.cols() != d {
        return Err(Error::InvalidShape(format!(
            "logpdf dims disagree: z {}, nu {}, K {}x{}",
            z.len(),
            d,
            k.rows(),
            k.cols()
        )));
    }
    let l = cholesky(k)?;
    let logdet: f64 = (0..d).map(|i| l.get(i, i).ln()).sum::<f64>() * 2.0;
    let diff: Vec<f64> = z.iter().zip(nu).map(|(a, b)| a - b).collect();
    let y = solve_lower(&l, &diff);
    let quad: f64 = y.iter().map(|v| v * v).sum();
    Ok(-0.5 * (d as f64 * LN_2PI + logdet + quad))
}

fn logsumexp(terms: &[f64]) -> f64 {
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

fn sample_mean(samples: &Matrix) -> Vec<f64> {
    let (n, d) = (samples.rows(), samples.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(i)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n as f64;
    }
    mean
}

fn weighted_covariance(samples: &Matrix, resp: &[f64], mean: &[f64], total: f64) -> Matrix {
    let d = samples.cols();
    let mut cov = Matrix::zeros(d, d);
    for i in 0..samples.rows() {
        let r = resp[i];
        if r == 0.0 {
            continue;
        }
        let row = samples.row(i);
        for a in 0..d {
            let da = row[a] - mean[a];
            for b in 0..=a {
                let v = cov.get(a, b) + r * da * (row[b] - mean[b]);
                cov.set(a, b, v);
            }
        }
    }
    for a in 0..d {
        for b in 0..=a {
            let v = cov.get(a, b) / total;
            cov.set(a, b, v);
            cov.set(b, a, v);
        }
    }
    cov
}

/// Trace-scaled diagonal jitter applied after every M-step.
fn add_jitter(cov: &mut Matrix) {
    let d = cov.rows();
    let jitter = COV_JITTER_REL * cov.trace() / d as f64;
    for i in 0..d {
        cov.set(i, i, cov.get(i, i) + jitter);
    }
}

/// Population covariance of all samples plus jitter; the fallback component
/// shape and the EM covariance initializer.
fn global_covariance(samples: &Matrix) -> Matrix {
    let mean = sample_mean(samples);
    let resp = vec![1.0; samples.rows()];
    let mut cov = weighted_covariance(samples, &resp, &mean, samples.rows() as f64);
    add_jitter(&mut cov);
    cov
}

/// k-means++-style seeding: the first mean is a uniform draw, each further
/// mean is drawn with probability proportional to squared distance from the
/// nearest already-chosen mean.
fn seed_means(samples: &Matrix, c: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let n = samples.rows();
    let mut means: Vec<Vec<f64>> = vec![samples.row(rng.index(n)).to_vec()];
    while means.len() < c {
        let dists: Vec<f64> = (0..n)
            .map(|i| {
                means
                    .iter()
                    .map(|m| {
                        samples
                            .row(i)
                            .iter()
                            .zip(m)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        if total == 0.0 {
            // All points coincide with existing means; fall back to uniform.
            means.push(samples.row(rng.index(n)).to_vec());
            continue;
        }
        let mut u = rng.uniform() * total;
        let mut chosen = n - 1;
        for (i, dist) in dists.iter().enumerate() {
            if u < *dist {
                chosen = i;
                break;
            }
            u -= dist;
        }
        means.push(samples.row(chosen).to_vec());
    }
    means
}

/// Fits a `c`-component mixture by EM. The log-likelihood is recorded per
/// iteration and is nondecreasing; fitting stops at `tol` relative
/// improvement or after `max_iter` iterations.
pub fn fit_em(
    samples: &Matrix,
    c: usize,
    rng: &mut Rng,
    max_iter: usize,
    tol: f64,
) -> Result<GmmModel> {
    let (n, d) = (samples.rows(), samples.cols());
    if c == 0 || n < c {
        return Err(Error::InvalidInput(format!(
            "cannot fit {c} components to {n} samples"
        )));
    }
    if d == 0 {
        return Err(Error::InvalidShape("zero-dimensional samples".into()));
    }
    if !samples.is_finite() {
        return Err(Error::InvalidInput("EM samples must be finite".into()));
    }

    let global_cov = global_covariance(samples);
    let mut weights = vec![1.0 / c as f64; c];
    let mut means = seed_means(samples, c, rng);
    let mut covs = vec![global_cov.clone(); c];

    let mut ll_trace = Vec::new();
    let mut resp = Matrix::zeros(n, c);
    for _ in 0..max_iter {
        // E-step with the current parameters; also yields the data
        // log-likelihood for the monotonicity trace.
        let mut ll = 0.0;
        for i in 0..n {
            let z = samples.row(i);
            let terms: Vec<f64> = (0..c)
                .map(|k| {
                    if weights[k] == 0.0 {
                        f64::NEG_INFINITY
                    } else {
                        weights[k].ln()
                            + gaussian_logpdf(z, &means[k], &covs[k]).unwrap_or(f64::NEG_INFINITY)
                    }
                })
                .collect();
            let lse = logsumexp(&terms);
            ll += lse;
            for k in 0..c {
                resp.set(i, k, (terms[k] - lse).exp());
            }
        }
        let improved = ll_trace
            .last()
            .map(|prev: &f64| (ll - prev).abs() / prev.abs().max(1.0) >= tol)
            .unwrap_or(true);
        ll_trace.push(ll);
        if !improved {
            break;
        }

        // M-step.
        let mut nk: Vec<f64> = (0..c)
            .map(|k| (0..n).map(|i| resp.get(i, k)).sum())
            .collect();
        for k in 0..c {
            if nk[k] < 1e-10 {
                // Re-seed the emptied component at a random data point.
                means[k] = samples.row(rng.index(n)).to_vec();
                covs[k] = global_cov.clone();
                nk[k] = 1.0;
                continue;
            }
            let col: Vec<f64> = (0..n).map(|i| resp.get(i, k)).collect();
            let mut mean = vec![0.0; d];
            for i in 0..n {
                let r = col[i];
                for (m, v) in mean.iter_mut().zip(samples.row(i)) {
                    *m += r * v;
                }
            }
            for m in &mut mean {
                *m /= nk[k];
            }
            let mut cov = weighted_covariance(samples, &col, &mean, nk[k]);
            add_jitter(&mut cov);
            means[k] = mean;
            covs[k] = cov;
        }
        let total: f64 = nk.iter().sum();
        for (w, nkk) in weights.iter_mut().zip(&nk) {
            *w = nkk / total;
        }
    }

    Ok(GmmModel {
        weights,
        means,
        covs,
        layer: 0,
        domain: 0,
        ll_trace,
    })
}
