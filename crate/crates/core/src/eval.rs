//! Evaluation protocol and diagnostics: top-1 accuracy overall and per
//! many/medium/few group, mean max-probability confidence, plug-in
//! `I(Ŷ;Y)` and `H(Ŷ)`, view stability, and the class hard-mean identity
//! check on L2-normalized predictions.

use serde::{Deserialize, Serialize};

use crate::data::{ClassGroups, Dataset, Group, ViewConfig};
use crate::error::{Error, Result};
use crate::model::ExpertModel;
use crate::numkit::{argmax, Matrix, RngState};
use crate::ttaggr::stability_batched;

/// Batch size used when measuring stability during evaluation.
pub const EVAL_BATCH: usize = 128;

fn check_rows(preds: &Matrix, labels: &[usize]) -> Result<()> {
    if preds.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} prediction rows for {} labels",
            preds.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// Argmax of every row, ties to the lowest class index.
pub fn predicted_labels(preds: &Matrix) -> Vec<usize> {
    preds.row_iter().map(argmax).collect()
}

/// Fraction of rows whose argmax equals the label.
pub fn top1(preds: &Matrix, labels: &[usize]) -> Result<f64> {
    check_rows(preds, labels)?;
    if labels.is_empty() {
        return Err(Error::Shape("top-1 of an empty set".into()));
    }
    let correct = predicted_labels(preds)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(correct as f64 / labels.len() as f64)
}

/// Accuracy restricted to each group; `None` when the group has no samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default)]
struct Tally {
    correct: usize,
    total: usize,
}

impl Tally {
    fn rate(self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

pub fn group_accuracy(preds: &Matrix, labels: &[usize], groups: &ClassGroups) -> Result<GroupAccuracy> {
    check_rows(preds, labels)?;
    let mut tallies = [Tally::default(); 3];
    for (pred, &y) in predicted_labels(preds).into_iter().zip(labels) {
        let slot = match groups.group_of(y) {
            Some(Group::Many) => 0,
            Some(Group::Medium) => 1,
            Some(Group::Few) => 2,
            None => return Err(Error::Index(format!("class {y} is in no group"))),
        };
        tallies[slot].total += 1;
        tallies[slot].correct += usize::from(pred == y);
    }
    Ok(GroupAccuracy {
        many: tallies[0].rate(),
        medium: tallies[1].rate(),
        few: tallies[2].rate(),
    })
}

/// Mean of the largest probability in each row.
pub fn confidence(preds: &Matrix) -> f64 {
    let n = preds.rows();
    preds
        .row_iter()
        .map(|r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / n as f64
}

fn xlogx(p: f64) -> f64 {
    if p > 0.0 {
        p * p.ln()
    } else {
        0.0
    }
}

/// Plug-in `(I(Ŷ;Y), H(Ŷ))` in nats from hard predictions.
pub fn mi_and_entropy(pred_labels: &[usize], labels: &[usize], classes: usize) -> Result<(f64, f64)> {
    if pred_labels.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} labels",
            pred_labels.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Shape("mutual information of an empty set".into()));
    }
    let mut joint = vec![0usize; classes * classes];
    for (&p, &y) in pred_labels.iter().zip(labels) {
        if p >= classes || y >= classes {
            return Err(Error::Index(format!("class pair ({p}, {y}) with {classes} classes")));
        }
        joint[p * classes + y] += 1;
    }
    let n = labels.len() as f64;
    let mut pred_marginal = vec![0.0; classes];
    let mut label_marginal = vec![0.0; classes];
    for p in 0..classes {
        for y in 0..classes {
            let q = joint[p * classes + y] as f64 / n;
            pred_marginal[p] += q;
            label_marginal[y] += q;
        }
    }
    let entropy = -pred_marginal.iter().map(|&p| xlogx(p)).sum::<f64>();
    let mut mi = 0.0;
    for p in 0..classes {
        for y in 0..classes {
            let q = joint[p * classes + y] as f64 / n;
            if q > 0.0 {
                mi += q * (q / (pred_marginal[p] * label_marginal[y])).ln();
            }
        }
    }
    Ok((mi.max(0.0), entropy.max(0.0)))
}

/// Both sides of `Σ_k [Σ_{j∈Z_k} ‖ŷ_j‖² − |Z_k|·‖c_k‖²] = Σ_k Σ_{j∈Z_k} ‖ŷ_j − c_k‖²`,
/// where `c_k` is the mean prediction of class `k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdentityCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

/// Scales every row to unit L2 norm.
pub fn l2_normalize_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= norm);
    }
    out
}

/// Evaluates the class hard-mean identity on unit-norm prediction vectors.
pub fn identity_check(vectors: &Matrix, labels: &[usize]) -> Result<IdentityCheck> {
    check_rows(vectors, labels)?;
    for (i, row) in vectors.row_iter().enumerate() {
        let sq: f64 = row.iter().map(|x| x * x).sum();
        if (sq.sqrt() - 1.0).abs() > 1e-12 {
            return Err(Error::Precondition(format!(
                "vector {i} has L2 norm {}, expected 1",
                sq.sqrt()
            )));
        }
    }
    let classes = labels.iter().max().map_or(0, |&m| m + 1);
    let dim = vectors.cols();
    let mut sums = Matrix::zeros(classes, dim);
    let mut counts = vec![0usize; classes];
    for (row, &y) in vectors.row_iter().zip(labels) {
        counts[y] += 1;
        for (s, x) in sums.row_mut(y).iter_mut().zip(row) {
            *s += x;
        }
    }
    let mut centers = sums;
    for (k, &n) in counts.iter().enumerate() {
        if n > 0 {
            centers.row_mut(k).iter_mut().for_each(|c| *c /= n as f64);
        }
    }
    let mut lhs = 0.0;
    for (k, &n) in counts.iter().enumerate() {
        let center_sq: f64 = centers.row(k).iter().map(|c| c * c).sum();
        let member_sq: f64 = vectors
            .row_iter()
            .zip(labels)
            .filter(|(_, &y)| y == k)
            .map(|(r, _)| r.iter().map(|x| x * x).sum::<f64>())
            .sum();
        lhs += member_sq - n as f64 * center_sq;
    }
    let rhs: f64 = vectors
        .row_iter()
        .zip(labels)
        .map(|(r, &y)| {
            r.iter()
                .zip(centers.row(y))
                .map(|(x, c)| (x - c).powi(2))
                .sum::<f64>()
        })
        .sum();
    Ok(IdentityCheck {
        lhs,
        rhs,
        residual: (lhs - rhs).abs(),
    })
}

/// Every metric for one model, weight vector and test set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub top1: f64,
    pub group_acc: GroupAccuracy,
    pub confidence: f64,
    pub mi_nats: f64,
    pub entropy_nats: f64,
    pub stability: f64,
    pub weights_used: Vec<f64>,
}

pub fn evaluate(
    model: &ExpertModel,
    test: &Dataset,
    weights: &[f64],
    groups: &ClassGroups,
    view: &ViewConfig,
    rng: &mut RngState,
) -> Result<EvalReport> {
    let preds = model.predict(&test.features, weights)?;
    let hard = predicted_labels(&preds);
    let (mi_nats, entropy_nats) = mi_and_entropy(&hard, &test.labels, model.classes())?;
    let stability = stability_batched(model, &test.features, weights, view, EVAL_BATCH, rng)?.s;
    Ok(EvalReport {
        samples: test.len(),
        top1: top1(&preds, &test.labels)?,
        group_acc: group_accuracy(&preds, &test.labels, groups)?,
        confidence: confidence(&preds),
        mi_nats,
        entropy_nats,
        stability,
        weights_used: weights.to_vec(),
    })
}

/// One-hot weight vector selecting a single expert.
pub fn one_hot(experts: usize, k: usize) -> Vec<f64> {
    let mut w = vec![0.0; experts];
    w[k] = 1.0;
    w
}

pub const CSV_HEADER: &str =
    "split,variant,samples,many,medium,few,top1,confidence,mi_nats,entropy_nats,stability,weights";

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl EvalReport {
    /// One row under [`CSV_HEADER`]; absent groups are empty fields and the
    /// weights are `;`-separated.
    pub fn csv_row(&self, split: &str, variant: &str) -> String {
        let weights: Vec<String> = self.weights_used.iter().map(|w| w.to_string()).collect();
        format!(
            "{split},{variant},{},{},{},{},{},{},{},{},{},{}",
            self.samples,
            opt_field(self.group_acc.many),
            opt_field(self.group_acc.medium),
            opt_field(self.group_acc.few),
            self.top1,
            self.confidence,
            self.mi_nats,
            self.entropy_nats,
            self.stability,
            weights.join(";"),
        )
    }
}
