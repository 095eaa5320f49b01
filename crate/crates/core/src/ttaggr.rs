//! Test-time aggregation: learn expert weights on unlabeled data by
//! maximizing the agreement between predictions for two perturbed views of
//! each sample.
//!
//! The weights are `w = softmax(raw)`; only `raw` is optimized and the model
//! stays frozen. For one sample with view logits `v¹_k`, `v²_k`:
//!
//! ```text
//! p¹ = softmax(Σ_k w_k·v¹_k),  p² = softmax(Σ_k w_k·v²_k),  s = p¹·p²
//! ∂s/∂z¹ = p¹ ⊙ (p² − s),      ∂s/∂w_k = ∂s/∂z¹·v¹_k + ∂s/∂z²·v²_k
//! ∂S/∂raw = w ⊙ (g − (w·g))
//! ```

use serde::{Deserialize, Serialize};

use crate::data::{gen_views_batch, Dataset, ViewConfig};
use crate::error::{Error, Result};
use crate::model::{ensemble_logits, ExpertModel};
use crate::numkit::{dot, softmax, Matrix, RngState};
use crate::train::{sgd_update, SgdParams};

pub const DEFAULT_STOP_THRESHOLD: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub nesterov: bool,
    pub stop_threshold: f64,
    pub view: ViewConfig,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 256,
            lr: 0.2,
            momentum: 0.9,
            nesterov: true,
            stop_threshold: DEFAULT_STOP_THRESHOLD,
            view: ViewConfig::default(),
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.view.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Domain("batch_size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Domain(format!("lr {} must be finite and >= 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Domain(format!("momentum {} must be in [0, 1)", self.momentum)));
        }
        if !(0.0..1.0).contains(&self.stop_threshold) {
            return Err(Error::Domain(format!(
                "stop_threshold {} must be in [0, 1)",
                self.stop_threshold
            )));
        }
        Ok(())
    }
}

/// Aggregation weights, kept on the simplex through a softmax of `raw`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationState {
    pub raw: Vec<f64>,
    pub w: Vec<f64>,
    pub stop_threshold: f64,
    /// Completed adaptation epochs.
    pub epoch: usize,
    pub stopped: bool,
}

impl AggregationState {
    /// Uniform weights (`raw = 0`).
    pub fn uniform(experts: usize, stop_threshold: f64) -> Self {
        Self::from_raw(vec![0.0; experts], stop_threshold)
    }

    pub fn from_raw(raw: Vec<f64>, stop_threshold: f64) -> Self {
        let w = softmax(&raw);
        Self {
            raw,
            w,
            stop_threshold,
            epoch: 0,
            stopped: false,
        }
    }

    fn set_raw(&mut self, raw: &[f64]) {
        self.raw.copy_from_slice(raw);
        self.w = softmax(&self.raw);
    }

    pub fn should_stop(&self) -> bool {
        self.w.iter().any(|&w| w <= self.stop_threshold)
    }
}

/// Mean view agreement over a set of batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub s: f64,
    pub per_batch: Vec<f64>,
}

fn check_views(v1: &[Matrix], v2: &[Matrix], k: usize) -> Result<()> {
    if v1.len() != k || v2.len() != k {
        return Err(Error::Shape(format!(
            "{} and {} view logit sets for {k} weights",
            v1.len(),
            v2.len()
        )));
    }
    let shape = v1[0].shape();
    if v1.iter().chain(v2).any(|m| m.shape() != shape) {
        return Err(Error::Shape("view logits differ in shape".into()));
    }
    Ok(())
}

/// Mean of `p¹ᵢ·p²ᵢ` for fixed per-expert view logits and weights `w`.
pub fn stability_from_logits(v1: &[Matrix], v2: &[Matrix], w: &[f64]) -> Result<f64> {
    check_views(v1, v2, w.len())?;
    let p1 = ensemble_logits(v1, w)?.softmax_rows();
    let p2 = ensemble_logits(v2, w)?.softmax_rows();
    let n = p1.rows();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    Ok(p1.row_iter().zip(p2.row_iter()).map(|(a, b)| dot(a, b)).sum::<f64>() / n as f64)
}

/// `S` and `∂S/∂raw` for fixed view logits.
pub fn stability_and_grad(v1: &[Matrix], v2: &[Matrix], raw: &[f64]) -> Result<(f64, Vec<f64>)> {
    let k = raw.len();
    check_views(v1, v2, k)?;
    let w = softmax(raw);
    let p1 = ensemble_logits(v1, &w)?.softmax_rows();
    let p2 = ensemble_logits(v2, &w)?.softmax_rows();
    let (n, classes) = p1.shape();
    if n == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad_w = vec![0.0; k];
    let mut dz1 = vec![0.0; classes];
    let mut dz2 = vec![0.0; classes];
    for i in 0..n {
        let (a, b) = (p1.row(i), p2.row(i));
        let s = dot(a, b);
        total += s;
        for c in 0..classes {
            dz1[c] = a[c] * (b[c] - s);
            dz2[c] = b[c] * (a[c] - s);
        }
        for (g, (x1, x2)) in grad_w.iter_mut().zip(v1.iter().zip(v2)) {
            *g += dot(&dz1, x1.row(i)) + dot(&dz2, x2.row(i));
        }
    }
    let inv_n = 1.0 / n as f64;
    grad_w.iter_mut().for_each(|g| *g *= inv_n);
    let mean_g = dot(&w, &grad_w);
    let grad_raw = w.iter().zip(&grad_w).map(|(wk, gk)| wk * (gk - mean_g)).collect();
    Ok((total * inv_n, grad_raw))
}

fn view_logits(
    model: &ExpertModel,
    batch: &Matrix,
    view: &ViewConfig,
    rng: &mut RngState,
) -> Result<(Vec<Matrix>, Vec<Matrix>)> {
    let (x1, x2) = gen_views_batch(batch, view, rng);
    Ok((model.expert_logits(&x1)?, model.expert_logits(&x2)?))
}

/// Stability of one batch under the current weights.
pub fn stability(
    model: &ExpertModel,
    batch: &Matrix,
    state: &AggregationState,
    view: &ViewConfig,
    rng: &mut RngState,
) -> Result<StabilityReport> {
    let (v1, v2) = view_logits(model, batch, view, rng)?;
    let s = stability_from_logits(&v1, &v2, &state.w)?;
    Ok(StabilityReport {
        s,
        per_batch: vec![s],
    })
}

/// Stability of a whole feature set, visited in order in chunks of
/// `batch_size`; `s` is the sample-weighted mean.
pub fn stability_batched(
    model: &ExpertModel,
    features: &Matrix,
    weights: &[f64],
    view: &ViewConfig,
    batch_size: usize,
    rng: &mut RngState,
) -> Result<StabilityReport> {
    let n = features.rows();
    if n == 0 || batch_size == 0 {
        return Err(Error::Shape("stability needs samples and a positive batch size".into()));
    }
    let mut per_batch = Vec::new();
    let mut total = 0.0;
    let indices: Vec<usize> = (0..n).collect();
    for idx in indices.chunks(batch_size) {
        let (v1, v2) = view_logits(model, &features.select_rows(idx), view, rng)?;
        let s = stability_from_logits(&v1, &v2, weights)?;
        total += s * idx.len() as f64;
        per_batch.push(s);
    }
    Ok(StabilityReport {
        s: total / n as f64,
        per_batch,
    })
}

/// `∂S/∂raw` for one batch. Passing a clone of the generator used for
/// [`stability`] reproduces the same views.
pub fn stability_grad_w(
    model: &ExpertModel,
    batch: &Matrix,
    state: &AggregationState,
    view: &ViewConfig,
    rng: &mut RngState,
) -> Result<Vec<f64>> {
    let (v1, v2) = view_logits(model, batch, view, rng)?;
    Ok(stability_and_grad(&v1, &v2, &state.raw)?.1)
}

/// Per-epoch adaptation record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptEpoch {
    pub epoch: usize,
    #[serde(rename = "S")]
    pub s: f64,
    pub w: Vec<f64>,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptOutcome {
    pub state: AggregationState,
    pub trace: Vec<AdaptEpoch>,
}

/// Learns aggregation weights on unlabeled `features`.
///
/// Starts from uniform weights, shuffles the samples every epoch, draws
/// fresh views for every batch and takes one ascent step on `S` per batch.
/// After each epoch, stops if any weight is `<= stop_threshold`.
pub fn adapt(
    model: &ExpertModel,
    features: &Matrix,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let n = features.rows();
    if n == 0 {
        return Err(Error::Shape("no test samples to adapt on".into()));
    }
    let k = model.experts();
    let mut state = AggregationState::uniform(k, cfg.stop_threshold);
    let mut velocity = vec![0.0; k];
    let sgd = SgdParams {
        lr: cfg.lr,
        momentum: cfg.momentum,
        nesterov: cfg.nesterov,
        weight_decay: 0.0,
    };
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        let mut s_sum = 0.0;
        for (batch, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (v1, v2) = view_logits(model, &features.select_rows(idx), &cfg.view, rng)?;
            let (s, grad) = stability_and_grad(&v1, &v2, &state.raw)?;
            if !s.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::AdaptationDiverged { epoch, batch });
            }
            s_sum += s * idx.len() as f64;
            let ascent: Vec<f64> = grad.iter().map(|g| -g).collect();
            let mut raw = state.raw.clone();
            sgd_update(&mut raw, &ascent, &mut velocity, &sgd);
            state.set_raw(&raw);
        }
        state.epoch = epoch + 1;
        state.stopped = state.should_stop();
        trace.push(AdaptEpoch {
            epoch,
            s: s_sum / n as f64,
            w: state.w.clone(),
            stopped: state.stopped,
        });
        if state.stopped {
            break;
        }
    }
    Ok(AdaptOutcome { state, trace })
}

/// [`adapt`] on a dataset's features; labels are never read.
pub fn adapt_dataset(
    model: &ExpertModel,
    test: &Dataset,
    cfg: &AdaptConfig,
    rng: &mut RngState,
) -> Result<AdaptOutcome> {
    adapt(model, &test.features, cfg, rng)
}
