//! Expertise-guided losses.
//!
//! All three expert objectives are softmax cross-entropy on logits shifted by
//! a class-dependent offset `α·log π − β·log π̄`:
//!
//! | expert   | (α, β) | loss                 |
//! |----------|--------|----------------------|
//! | forward  | (0, 0) | plain cross-entropy  |
//! | uniform  | (1, 0) | balanced softmax     |
//! | backward | (1, λ) | inverse softmax      |
//!
//! Values are computed in log space; the gradient with respect to the raw
//! logits is `(softmax(v + offset) − onehot(y)) / batch`.

use serde::{Deserialize, Serialize};

use crate::data::ClassPrior;
use crate::error::{Error, Result};
use crate::numkit::{logsumexp_parts, softmax, Matrix};

/// Default inverse-loss strength.
pub const DEFAULT_LAMBDA: f64 = 2.0;

/// Coefficients on `log π` and `log π̄` added to an expert's logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertAdjustment {
    pub alpha: f64,
    pub beta: f64,
}

impl ExpertAdjustment {
    pub const CROSS_ENTROPY: Self = Self { alpha: 0.0, beta: 0.0 };
    pub const BALANCED: Self = Self { alpha: 1.0, beta: 0.0 };

    pub fn inverse(lambda: f64) -> Self {
        Self { alpha: 1.0, beta: lambda }
    }

    /// Per-class offsets `α·log π_k − β·log π̄_k`.
    pub fn offsets(&self, prior: &ClassPrior) -> Result<Vec<f64>> {
        if let Some(k) = prior
            .pi
            .iter()
            .chain(&prior.pi_bar)
            .position(|&p| !(p > 0.0))
        {
            return Err(Error::Domain(format!(
                "prior entry {} is not strictly positive",
                k % prior.class_count()
            )));
        }
        Ok(prior
            .pi
            .iter()
            .zip(&prior.pi_bar)
            .map(|(p, q)| self.alpha * p.ln() - self.beta * q.ln())
            .collect())
    }
}

/// Adjustments for a `k`-expert model: expert 1 is plain cross-entropy and
/// experts 2..k use `α = 1` with `β` evenly spaced over `[0, λ]`. With two
/// experts the second one is the inverse-softmax expert.
pub fn expert_adjustments(k: usize, lambda: f64) -> Vec<ExpertAdjustment> {
    let mut out = vec![ExpertAdjustment::CROSS_ENTROPY];
    match k {
        0 | 1 => out.truncate(k),
        2 => out.push(ExpertAdjustment::inverse(lambda)),
        _ => out.extend((0..k - 1).map(|i| {
            ExpertAdjustment::inverse(lambda * i as f64 / (k - 2) as f64)
        })),
    }
    out
}

/// `softmax(v + α·log π − β·log π̄)`.
pub fn adjusted_probs(v: &[f64], prior: &ClassPrior, adj: &ExpertAdjustment) -> Result<Vec<f64>> {
    let offsets = adj.offsets(prior)?;
    if offsets.len() != v.len() {
        return Err(Error::Shape(format!(
            "{} logits for a {}-class prior",
            v.len(),
            offsets.len()
        )));
    }
    let shifted: Vec<f64> = v.iter().zip(&offsets).map(|(a, b)| a + b).collect();
    Ok(softmax(&shifted))
}

/// Batch-mean loss and its gradient with respect to the unadjusted logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad_logits: Matrix,
}

/// Cross-entropy of `softmax(v + offsets)` against `labels`.
pub fn shifted_ce(logits: &Matrix, labels: &[usize], offsets: &[f64]) -> Result<LossValue> {
    let (batch, classes) = logits.shape();
    if labels.len() != batch {
        return Err(Error::Shape(format!("{batch} logit rows for {} labels", labels.len())));
    }
    if offsets.len() != classes {
        return Err(Error::Shape(format!("{} offsets for {classes} classes", offsets.len())));
    }
    if batch == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let inv_batch = 1.0 / batch as f64;
    let mut grad = Matrix::zeros(batch, classes);
    let mut shifted = vec![0.0; classes];
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index(format!("label {y} with {classes} classes")));
        }
        for ((s, v), o) in shifted.iter_mut().zip(logits.row(i)).zip(offsets) {
            *s = v + o;
        }
        let (max, tail) = logsumexp_parts(&shifted);
        total += (max - shifted[y]) + tail;
        let row = grad.row_mut(i);
        for (g, s) in row.iter_mut().zip(&shifted) {
            *g = ((s - max) - tail).exp() * inv_batch;
        }
        row[y] -= inv_batch;
    }
    Ok(LossValue {
        value: total * inv_batch,
        grad_logits: grad,
    })
}

/// Softmax cross-entropy.
pub fn ce_loss(logits: &Matrix, labels: &[usize]) -> Result<LossValue> {
    shifted_ce(logits, labels, &vec![0.0; logits.cols()])
}

/// Balanced softmax: cross-entropy on `v + log π`.
pub fn bal_loss(logits: &Matrix, labels: &[usize], prior: &ClassPrior) -> Result<LossValue> {
    expert_loss(logits, labels, prior, &ExpertAdjustment::BALANCED)
}

/// Inverse softmax: cross-entropy on `v + log π − λ·log π̄`.
pub fn inv_loss(
    logits: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
    lambda: f64,
) -> Result<LossValue> {
    if !(lambda >= 0.0) {
        return Err(Error::Domain(format!("lambda {lambda} must be >= 0")));
    }
    expert_loss(logits, labels, prior, &ExpertAdjustment::inverse(lambda))
}

/// Loss of one expert under an arbitrary adjustment.
pub fn expert_loss(
    logits: &Matrix,
    labels: &[usize],
    prior: &ClassPrior,
    adj: &ExpertAdjustment,
) -> Result<LossValue> {
    shifted_ce(logits, labels, &adj.offsets(prior)?)
}
