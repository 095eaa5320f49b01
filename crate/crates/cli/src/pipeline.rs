//! In-memory pipeline stages. The subcommands in [`crate::commands`] wrap
//! these with file I/O; tests and batch experiments call them directly.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use tade::data::{
    class_groups, empirical_prior, gen_gaussian_mixture, make_profile, make_test_split, Dataset,
    Direction,
};
use tade::eval::{evaluate, EvalReport};
use tade::model::{check_simplex, Checkpoint, ExpertModel};
use tade::numkit::RngState;
use tade::train::{epoch_rng, train_epoch, OptState};
use tade::ttaggr::{adapt, AdaptOutcome};

use crate::config::{RunConfig, Stage, INIT_STREAM};
use crate::error::{CliError, CliResult};

const TRAIN_STREAM: u64 = 0;
const POOL_STREAM: u64 = 1;
const FIRST_SPLIT_STREAM: u64 = 2;

pub struct GeneratedData {
    pub train: Dataset,
    pub pool: Dataset,
    /// Named test splits in [`RunConfig::splits`] order.
    pub splits: Vec<(String, Dataset)>,
}

pub fn generate(cfg: &RunConfig) -> CliResult<GeneratedData> {
    cfg.validate()?;
    let d = &cfg.data;
    let seed = cfg.stage_seed(Stage::Data);
    let profile = make_profile(d.classes, d.max_count, d.rho_train, Direction::Forward)?;
    let train = gen_gaussian_mixture(&profile, d.dim, d.separation, &mut RngState::new(seed, TRAIN_STREAM))?;
    let pool_profile = make_profile(d.classes, d.test_per_class, 1.0, Direction::Uniform)?;
    let pool = gen_gaussian_mixture(&pool_profile, d.dim, d.separation, &mut RngState::new(seed, POOL_STREAM))?;
    let splits = cfg
        .splits()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mut rng = RngState::new(seed, FIRST_SPLIT_STREAM + i as u64);
            Ok((s.name(), make_test_split(&pool, s.rho, s.direction, &mut rng)?))
        })
        .collect::<CliResult<_>>()?;
    Ok(GeneratedData { train, pool, splits })
}

/// One line of the training stats stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss_ce: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub loss_bal: Option<f64>,
    pub loss_inv: f64,
    pub expert_losses: Vec<f64>,
    pub wall_ms: u64,
}

pub fn fresh_checkpoint(cfg: &RunConfig, train: &Dataset) -> CliResult<Checkpoint> {
    let mut rng = RngState::new(cfg.stage_seed(Stage::Train), INIT_STREAM);
    let model = ExpertModel::init(cfg.model_spec(), &mut rng)?;
    Ok(Checkpoint {
        velocity: Some(vec![0.0; model.param_count()]),
        model,
        seed: cfg.seed,
        train_counts: train.class_counts()?,
        epochs_completed: 0,
    })
}

/// Continues `ckpt` up to epoch `stop_after` (default: the configured total).
///
/// The learning-rate schedule always spans the configured total, so a run
/// that stops early and is resumed later retraces a single uninterrupted run.
pub fn train_model<F>(
    cfg: &RunConfig,
    train: &Dataset,
    mut ckpt: Checkpoint,
    stop_after: Option<usize>,
    mut on_epoch: F,
) -> CliResult<Checkpoint>
where
    F: FnMut(&EpochRecord) -> CliResult<()>,
{
    cfg.validate()?;
    if ckpt.model.spec() != &cfg.model_spec() {
        return Err(CliError::Input("checkpoint architecture differs from the config".into()));
    }
    if ckpt.seed != cfg.seed {
        return Err(CliError::Input(format!(
            "checkpoint was trained with seed {}, config has {}",
            ckpt.seed, cfg.seed
        )));
    }
    let tcfg = cfg.train_config();
    let velocity = ckpt
        .velocity
        .take()
        .ok_or_else(|| CliError::Input("checkpoint has no optimizer state to resume from".into()))?;
    let mut opt = OptState::from_flat(&ckpt.model, &velocity)?;
    let prior = empirical_prior(train)?;
    let end = stop_after.unwrap_or(tcfg.epochs).min(tcfg.epochs);
    let k = ckpt.model.experts();
    for epoch in ckpt.epochs_completed..end {
        let started = Instant::now();
        let stats = train_epoch(&mut ckpt.model, train, &prior, &tcfg, &mut opt, epoch, &mut epoch_rng(tcfg.seed, epoch))?;
        ckpt.epochs_completed = epoch + 1;
        let losses = stats.expert_losses;
        on_epoch(&EpochRecord {
            epoch,
            lr: stats.lr,
            loss_ce: losses[0],
            loss_bal: (k > 2).then(|| losses[1]),
            loss_inv: losses[k - 1],
            expert_losses: losses,
            wall_ms: started.elapsed().as_millis() as u64,
        })?;
    }
    ckpt.velocity = Some(opt.velocity.to_flat());
    Ok(ckpt)
}

pub fn adapt_split(cfg: &RunConfig, model: &ExpertModel, split: &str, data: &Dataset) -> CliResult<AdaptOutcome> {
    let stream = cfg.split_index(split)? as u64;
    let mut rng = RngState::new(cfg.stage_seed(Stage::Adapt), stream);
    Ok(adapt(model, &data.features, &cfg.adapt, &mut rng)?)
}

pub fn eval_split(
    cfg: &RunConfig,
    ckpt: &Checkpoint,
    split: &str,
    data: &Dataset,
    weights: &[f64],
) -> CliResult<EvalReport> {
    check_simplex(weights, ckpt.model.experts())?;
    let groups = class_groups(&ckpt.train_counts, &cfg.eval.groups)?;
    let stream = cfg.split_index(split)? as u64;
    let mut rng = RngState::new(cfg.stage_seed(Stage::Eval), stream);
    Ok(evaluate(&ckpt.model, data, weights, &groups, &cfg.adapt.view, &mut rng)?)
}

pub fn uniform_weights(experts: usize) -> Vec<f64> {
    vec![1.0 / experts as f64; experts]
}
