//! Synthetic long-tailed data: count profiles, Gaussian-mixture samples,
//! test splits with a chosen class skew, class priors, two-view
//! perturbations and many/medium/few class groups.
//!
//! Class indices are zero-based everywhere; "class 1" of a profile is index 0.

mod io;

pub use io::{load_dataset, save_dataset, sidecar_path, DatasetMeta, DATASET_MAGIC, DATASET_VERSION};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{Matrix, RngState};

/// Shape of a class-count profile.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Class 1 largest, counts shrink with the class index.
    Forward,
    Uniform,
    /// Forward profile with the class order reversed.
    Backward,
}

impl std::fmt::Display for Direction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Direction::Forward => "forward",
            Direction::Uniform => "uniform",
            Direction::Backward => "backward",
        })
    }
}

/// Per-class sample counts together with how they were generated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LongTailProfile {
    pub class_count: usize,
    pub counts: Vec<usize>,
    pub rho: f64,
    pub direction: Direction,
    pub max_count: usize,
}

impl LongTailProfile {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Observed `max(n_k) / min(n_k)`.
    pub fn imbalance_ratio(&self) -> f64 {
        let max = self.counts.iter().copied().max().unwrap_or(0);
        let min = self.counts.iter().copied().min().unwrap_or(0);
        max as f64 / min as f64
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Builds the per-class counts for `class_count` classes whose largest class
/// has `max_count` samples and whose largest/smallest ratio is `rho`.
///
/// Forward counts are `round(N · ρ^(−j/(C−1)))` for zero-based `j`; backward
/// is the same list reversed. Counts are clamped to at least one sample.
pub fn make_profile(
    class_count: usize,
    max_count: usize,
    rho: f64,
    direction: Direction,
) -> Result<LongTailProfile> {
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::Domain(format!("imbalance ratio {rho} must be >= 1")));
    }
    if class_count < 2 {
        return Err(Error::Domain(format!("need at least 2 classes, got {class_count}")));
    }
    if max_count < 1 {
        return Err(Error::Domain("max_count must be >= 1".into()));
    }
    let span = (class_count - 1) as f64;
    let forward: Vec<usize> = (0..class_count)
        .map(|j| {
            if direction == Direction::Uniform {
                max_count
            } else {
                round_half_up(max_count as f64 * rho.powf(-(j as f64) / span)).max(1)
            }
        })
        .collect();
    let counts = match direction {
        Direction::Backward => forward.into_iter().rev().collect(),
        _ => forward,
    };
    Ok(LongTailProfile {
        class_count,
        counts,
        rho: if direction == Direction::Uniform { 1.0 } else { rho },
        direction,
        max_count,
    })
}

/// Features with zero-based labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub profile: LongTailProfile,
}

impl Dataset {
    /// Checks the structural invariants: one label per row, labels in range,
    /// per-class counts matching the profile, finite features.
    pub fn validate(&self) -> Result<()> {
        if self.features.rows() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} feature rows for {} labels",
                self.features.rows(),
                self.labels.len()
            )));
        }
        let counts = self.class_counts()?;
        if counts != self.profile.counts {
            return Err(Error::Format(format!(
                "label counts {counts:?} disagree with profile {:?}",
                self.profile.counts
            )));
        }
        if !self.features.is_finite() {
            return Err(Error::Numeric("dataset features contain non-finite values".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_count(&self) -> usize {
        self.profile.class_count
    }

    pub fn class_counts(&self) -> Result<Vec<usize>> {
        let classes = self.profile.class_count;
        let mut counts = vec![0; classes];
        for (i, &y) in self.labels.iter().enumerate() {
            *counts.get_mut(y).ok_or_else(|| {
                Error::Index(format!("label {y} of sample {i} exceeds {classes} classes"))
            })? += 1;
        }
        Ok(counts)
    }
}

/// Deterministic class-mean layout: class `k` sits at angle `2πk/C` on a
/// circle of radius `separation` in the first two coordinates.
pub fn class_means(class_count: usize, dim: usize, separation: f64) -> Matrix {
    let mut means = Matrix::zeros(class_count, dim);
    for k in 0..class_count {
        let angle = std::f64::consts::TAU * k as f64 / class_count as f64;
        means.set(k, 0, separation * angle.cos());
        means.set(k, 1, separation * angle.sin());
    }
    means
}

/// Samples `profile.counts[k]` points from `N(μ_k, I)` for each class, grouped
/// by class in index order.
pub fn gen_gaussian_mixture(
    profile: &LongTailProfile,
    dim: usize,
    separation: f64,
    rng: &mut RngState,
) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::Domain(format!("feature dimension {dim} must be >= 2")));
    }
    if !(separation >= 0.0) {
        return Err(Error::Domain(format!("separation {separation} must be >= 0")));
    }
    let means = class_means(profile.class_count, dim, separation);
    let total = profile.total();
    let mut data = Vec::with_capacity(total * dim);
    let mut labels = Vec::with_capacity(total);
    for (k, &n) in profile.counts.iter().enumerate() {
        for _ in 0..n {
            data.extend(means.row(k).iter().map(|m| m + rng.normal()));
            labels.push(k);
        }
    }
    Ok(Dataset {
        features: Matrix::from_vec(total, dim, data)?,
        labels,
        profile: profile.clone(),
    })
}

/// Subsamples a class-balanced pool, without replacement, down to the
/// counts of `make_profile(C, N, rho, direction)` where `N` is the pool's
/// per-class count. Selected samples keep their pool order.
pub fn make_test_split(
    pool: &Dataset,
    rho: f64,
    direction: Direction,
    rng: &mut RngState,
) -> Result<Dataset> {
    let pool_counts = pool.class_counts()?;
    let per_class = pool_counts[0];
    if pool_counts.iter().any(|&n| n != per_class) {
        return Err(Error::Precondition(format!(
            "test pool must be class-balanced, got counts {pool_counts:?}"
        )));
    }
    let profile = make_profile(pool.class_count(), per_class, rho, direction)?;
    if direction == Direction::Uniform || rho == 1.0 {
        let mut same = pool.clone();
        same.profile = profile;
        return Ok(same);
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); pool.class_count()];
    for (i, &y) in pool.labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut keep = Vec::with_capacity(profile.total());
    for (k, members) in by_class.iter().enumerate() {
        let want = profile.counts[k];
        if want > members.len() {
            return Err(Error::Capacity(format!(
                "class {k} needs {want} samples but the pool holds {}",
                members.len()
            )));
        }
        keep.extend(rng.sample_indices(members.len(), want)?.into_iter().map(|i| members[i]));
    }
    keep.sort_unstable();
    Ok(Dataset {
        features: pool.features.select_rows(&keep),
        labels: keep.iter().map(|&i| pool.labels[i]).collect(),
        profile,
    })
}

/// Training label frequencies `pi` and their order-reversed counterpart.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub pi: Vec<f64>,
    pub pi_bar: Vec<f64>,
}

impl ClassPrior {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if let Some(k) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Domain(format!("class {k} has no samples")));
        }
        let total: usize = counts.iter().sum();
        let pi: Vec<f64> = counts.iter().map(|&n| n as f64 / total as f64).collect();
        Ok(Self::from_pi(pi))
    }

    pub fn uniform(class_count: usize) -> Self {
        Self::from_pi(vec![1.0 / class_count as f64; class_count])
    }

    fn from_pi(pi: Vec<f64>) -> Self {
        let pi_bar = pi.iter().rev().copied().collect();
        Self { pi, pi_bar }
    }

    pub fn class_count(&self) -> usize {
        self.pi.len()
    }

    /// The prior obtained by swapping `pi` and `pi_bar`.
    pub fn flipped(&self) -> Self {
        Self {
            pi: self.pi_bar.clone(),
            pi_bar: self.pi.clone(),
        }
    }
}

/// `π_k = n_k / n` over the training labels.
pub fn empirical_prior(train: &Dataset) -> Result<ClassPrior> {
    ClassPrior::from_counts(&train.class_counts()?)
}

/// Parameters of the stochastic two-view perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViewConfig {
    /// Standard deviation of additive Gaussian noise.
    pub noise_sigma: f64,
    /// Per-coordinate probability of zeroing.
    pub mask_prob: f64,
    /// Half-width of the uniform multiplicative jitter `1 + U(−s, s)`.
    pub scale_jitter: f64,
}

impl ViewConfig {
    pub const IDENTITY: ViewConfig = ViewConfig {
        noise_sigma: 0.0,
        mask_prob: 0.0,
        scale_jitter: 0.0,
    };

    pub fn validate(&self) -> Result<()> {
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(Error::Domain(format!("noise_sigma {} must be >= 0", self.noise_sigma)));
        }
        if !(0.0..=1.0).contains(&self.mask_prob) {
            return Err(Error::Domain(format!("mask_prob {} must be in [0, 1]", self.mask_prob)));
        }
        if !(self.scale_jitter >= 0.0) || !self.scale_jitter.is_finite() {
            return Err(Error::Domain(format!("scale_jitter {} must be >= 0", self.scale_jitter)));
        }
        Ok(())
    }
}

impl Default for ViewConfig {
    fn default() -> Self {
        Self {
            noise_sigma: 0.5,
            mask_prob: 0.1,
            scale_jitter: 0.1,
        }
    }
}

fn perturb_into(x: &[f64], out: &mut [f64], cfg: &ViewConfig, rng: &mut RngState) {
    let scale = if cfg.scale_jitter > 0.0 {
        1.0 + rng.uniform_range(-cfg.scale_jitter, cfg.scale_jitter)
    } else {
        1.0
    };
    for (o, &xi) in out.iter_mut().zip(x) {
        let mut v = xi * scale;
        if cfg.noise_sigma > 0.0 {
            v += cfg.noise_sigma * rng.normal();
        }
        if cfg.mask_prob > 0.0 && rng.bernoulli(cfg.mask_prob) {
            v = 0.0;
        }
        *o = v;
    }
}

/// Two independent perturbations of one feature vector.
pub fn gen_views(x: &[f64], cfg: &ViewConfig, rng: &mut RngState) -> (Vec<f64>, Vec<f64>) {
    let mut first = vec![0.0; x.len()];
    let mut second = vec![0.0; x.len()];
    perturb_into(x, &mut first, cfg, rng);
    perturb_into(x, &mut second, cfg, rng);
    (first, second)
}

/// Row-by-row [`gen_views`] over a batch; draws happen in row order, first
/// view before second.
pub fn gen_views_batch(x: &Matrix, cfg: &ViewConfig, rng: &mut RngState) -> (Matrix, Matrix) {
    let mut first = Matrix::zeros(x.rows(), x.cols());
    let mut second = Matrix::zeros(x.rows(), x.cols());
    for r in 0..x.rows() {
        perturb_into(x.row(r), first.row_mut(r), cfg, rng);
        perturb_into(x.row(r), second.row_mut(r), cfg, rng);
    }
    (first, second)
}

/// How many/medium/few boundaries are chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum GroupThresholds {
    /// Absolute training-count bounds.
    Fixed { many: f64, few: f64 },
    /// Percentiles (0..=100) of the training counts, linearly interpolated.
    Percentile { many: f64, few: f64 },
}

impl GroupThresholds {
    /// Many-shot above 100 training samples, few-shot below 20.
    pub const FIXED_100_20: GroupThresholds = GroupThresholds::Fixed {
        many: 100.0,
        few: 20.0,
    };
    pub const DESK_SCALE: GroupThresholds = GroupThresholds::Percentile {
        many: 60.0,
        few: 20.0,
    };

    /// Absolute `(many, few)` bounds for the given counts.
    pub fn resolve(&self, counts: &[usize]) -> Result<(f64, f64)> {
        let (many, few) = match *self {
            GroupThresholds::Fixed { many, few } => (many, few),
            GroupThresholds::Percentile { many, few } => {
                for p in [many, few] {
                    if !(0.0..=100.0).contains(&p) {
                        return Err(Error::Domain(format!("percentile {p} outside [0, 100]")));
                    }
                }
                (percentile(counts, many), percentile(counts, few))
            }
        };
        if !(many > few) {
            return Err(Error::Precondition(format!(
                "many-shot threshold {many} must exceed few-shot threshold {few}"
            )));
        }
        Ok((many, few))
    }
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self::DESK_SCALE
    }
}

/// Linear-interpolation percentile of integer counts.
pub fn percentile(counts: &[usize], pct: f64) -> f64 {
    let mut sorted: Vec<f64> = counts.iter().map(|&n| n as f64).collect();
    sorted.sort_by(f64::total_cmp);
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = pct / 100.0 * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Partition of class indices by training count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassGroups {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

/// Which of the three groups a class falls in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl ClassGroups {
    pub fn group_of(&self, class: usize) -> Option<Group> {
        if self.many.contains(&class) {
            Some(Group::Many)
        } else if self.medium.contains(&class) {
            Some(Group::Medium)
        } else if self.few.contains(&class) {
            Some(Group::Few)
        } else {
            None
        }
    }

    pub fn class_count(&self) -> usize {
        self.many.len() + self.medium.len() + self.few.len()
    }
}

/// `many = {k : n_k > many}`, `few = {k : n_k < few}`, the rest medium.
pub fn class_groups(counts: &[usize], thresholds: &GroupThresholds) -> Result<ClassGroups> {
    let (many_bound, few_bound) = thresholds.resolve(counts)?;
    let mut groups = ClassGroups {
        many: Vec::new(),
        medium: Vec::new(),
        few: Vec::new(),
    };
    for (k, &n) in counts.iter().enumerate() {
        let n = n as f64;
        if n > many_bound {
            groups.many.push(k);
        } else if n < few_bound {
            groups.few.push(k);
        } else {
            groups.medium.push(k);
        }
    }
    Ok(groups)
}
