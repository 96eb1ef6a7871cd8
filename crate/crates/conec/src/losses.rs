//! Training objectives: cross-entropy, temperature-scaled distillation,
//! the ball-generator hinge, and the joint losses that combine them.
//!
//! Every function returns the loss value together with its analytic
//! gradient with respect to the differentiable argument; the gradient
//! acceptance suite checks each one against central finite differences.
//! Distillation uses the conventional soft cross-entropy sign
//! (`−Σ t·log s`), which is the direction that actually pulls the student
//! toward the teacher, and applies no `τ²` rescaling.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numkit::softmax;

/// Loss bookkeeping for one step: the weighted total plus the raw terms.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub ce: f64,
    pub kd: f64,
    pub ball: f64,
}

/// `−log softmax(logits)[label]` with gradient `softmax(logits) − onehot`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::InvalidInput(format!(
            "label {label} out of range for {} logits",
            logits.len()
        )));
    }
    let probs = softmax(logits, 1.0)?;
    let p = probs[label].max(f64::MIN_POSITIVE);
    let loss = -p.ln();
    let mut grad = probs;
    grad[label] -= 1.0;
    Ok((loss, grad))
}

/// Soft cross-entropy between temperature-scaled teacher and student
/// distributions: `−Σ_i softmax(teacher/τ)_i · log softmax(student/τ)_i`.
/// The teacher is detached — gradient flows only into the student logits,
/// as `(softmax(student/τ) − softmax(teacher/τ)) / τ`.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    if student_logits.len() != teacher_logits.len() {
        return Err(Error::InvalidShape(format!(
            "student has {} logits, teacher {}",
            student_logits.len(),
            teacher_logits.len()
        )));
    }
    let s = softmax(student_logits, tau)?;
    let t = softmax(teacher_logits, tau)?;
    let loss: f64 = t
        .iter()
        .zip(&s)
        .map(|(ti, si)| -ti * si.max(f64::MIN_POSITIVE).ln())
        .sum();
    let grad: Vec<f64> = s.iter().zip(&t).map(|(si, ti)| (si - ti) / tau).collect();
    Ok((loss, grad))
}

/// Ball-generator hinge over transformed embeddings.
///
/// For every sample with domain label `i` and every other domain center
/// `j ≠ i`, contributes `max(0, d(z, μ_i) + r − d(z, μ_j))` with Euclidean
/// `d`. Returns the summed loss and per-sample embedding gradients
/// (subgradient 0 exactly at a hinge kink). A single active domain has no
/// negative pairs and yields zero loss.
pub fn ball_loss(
    embeddings: &[Vec<f64>],
    domain_labels: &[usize],
    centers: &BTreeMap<usize, Vec<f64>>,
    margin: f64,
) -> Result<(f64, Vec<Vec<f64>>)> {
    if embeddings.len() != domain_labels.len() {
        return Err(Error::InvalidShape(format!(
            "{} embeddings but {} domain labels",
            embeddings.len(),
            domain_labels.len()
        )));
    }
    if margin < 0.0 {
        return Err(Error::InvalidInput(format!(
            "margin must be nonnegative, got {margin}"
        )));
    }
    let dim = embeddings.first().map(|z| z.len()).unwrap_or(0);
    let mut grads: Vec<Vec<f64>> = embeddings.iter().map(|_| vec![0.0; dim]).collect();
    if centers.len() < 2 {
        return Ok((0.0, grads));
    }
    let mut total = 0.0;
    for (idx, (z, &own)) in embeddings.iter().zip(domain_labels).enumerate() {
        let own_center = centers.get(&own).ok_or_else(|| {
            Error::InvalidInput(format!("no ball center stored for domain {own}"))
        })?;
        let (d_own, dir_own) = distance_and_direction(z, own_center);
        for (&other, other_center) in centers.iter() {
            if other == own {
                continue;
            }
            let (d_other, dir_other) = distance_and_direction(z, other_center);
            let hinge = d_own + margin - d_other;
            if hinge > 0.0 {
                total += hinge;
                let g = &mut grads[idx];
                for k in 0..dim {
                    g[k] += dir_own[k] - dir_other[k];
                }
            }
        }
    }
    Ok((total, grads))
}

/// Euclidean distance plus the unit direction `(z − c)/‖z − c‖` (zero when
/// the sample sits exactly on the center — the subgradient choice).
fn distance_and_direction(z: &[f64], center: &[f64]) -> (f64, Vec<f64>) {
    let diff: Vec<f64> = z.iter().zip(center).map(|(a, b)| a - b).collect();
    let dist = diff.iter().map(|v| v * v).sum::<f64>().sqrt();
    if dist == 0.0 {
        return (0.0, vec![0.0; z.len()]);
    }
    (dist, diff.iter().map(|v| v / dist).collect())
}

/// Classification-stage joint loss: `ce + λ₁·kd`.
pub fn joint_dil_loss(ce: f64, kd: f64, lambda1: f64) -> Result<LossReport> {
    if lambda1 < 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda1 must be nonnegative, got {lambda1}"
        )));
    }
    Ok(LossReport {
        total: ce + lambda1 * kd,
        ce,
        kd,
        ball: 0.0,
    })
}

/// Auxiliary-stage joint loss: `ce + λ₂·ball`.
pub fn joint_aux_loss(ce: f64, ball: f64, lambda2: f64) -> Result<LossReport> {
    if lambda2 < 0.0 {
        return Err(Error::InvalidInput(format!(
            "lambda2 must be nonnegative, got {lambda2}"
        )));
    }
    Ok(LossReport {
        total: ce + lambda2 * ball,
        ce,
        kd: 0.0,
        ball,
    })
}
