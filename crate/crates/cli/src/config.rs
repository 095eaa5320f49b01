//! Run configuration: one JSON document holding every stage's settings.
//!
//! Missing keys take their defaults and unknown keys are rejected. The
//! top-level `seed` is split into independent per-stage seeds so that, for
//! example, changing adaptation settings never perturbs the generated data.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tade::data::{Direction, GroupThresholds};
use tade::model::ModelSpec;
use tade::numkit::RngState;
use tade::train::TrainConfig;
use tade::ttaggr::AdaptConfig;

use crate::error::{CliError, CliResult, WithPath};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub classes: usize,
    pub dim: usize,
    /// Size of the largest training class.
    pub max_count: usize,
    pub rho_train: f64,
    /// Per-class size of the balanced pool the test splits are drawn from.
    pub test_per_class: usize,
    pub test_rhos: Vec<f64>,
    /// Radius of the circle the class means sit on.
    pub separation: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            classes: 10,
            dim: 16,
            max_count: 2000,
            rho_train: 100.0,
            test_per_class: 100,
            test_rhos: vec![2.0, 5.0, 10.0, 25.0, 50.0],
            separation: 4.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub experts: usize,
    pub backbone: Vec<usize>,
    pub head: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            experts: 3,
            backbone: vec![64, 64],
            head: vec![32],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub groups: GroupThresholds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathConfig {
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for PathConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("run"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: EvalConfig,
    pub paths: PathConfig,
}

/// Pipeline stages that draw random numbers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data = 1,
    Train = 2,
    Adapt = 3,
    Eval = 4,
}

/// Stream used for model initialization; training epochs use streams `0..epochs`.
pub const INIT_STREAM: u64 = u64::MAX;

impl RunConfig {
    pub fn from_json(text: &str) -> CliResult<Self> {
        serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::from_json(&fs::read_to_string(path).at(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn stage_seed(&self, stage: Stage) -> u64 {
        RngState::new(self.seed, 0).substream(stage as u64).seed()
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            input_dim: self.data.dim,
            backbone: self.model.backbone.clone(),
            head: self.model.head.clone(),
            experts: self.model.experts,
            classes: self.data.classes,
        }
    }

    /// Training config carrying the training-stage seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.stage_seed(Stage::Train),
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        let d = &self.data;
        if std::iter::once(&d.rho_train).chain(&d.test_rhos).any(|&r| r < 1.0 || !r.is_finite()) {
            return Err(CliError::Config("imbalance ratios must be finite and >= 1".into()));
        }
        if d.test_per_class == 0 || d.max_count == 0 {
            return Err(CliError::Config("class sizes must be positive".into()));
        }
        self.model_spec().validate()?;
        self.train.validate()?;
        self.adapt.validate()?;
        Ok(())
    }

    /// Test splits in canonical order: uniform, then forward and backward for
    /// every ratio above one.
    pub fn splits(&self) -> Vec<SplitSpec> {
        let mut out = vec![SplitSpec {
            direction: Direction::Uniform,
            rho: 1.0,
        }];
        for &rho in &self.data.test_rhos {
            if rho > 1.0 {
                for direction in [Direction::Forward, Direction::Backward] {
                    out.push(SplitSpec { direction, rho });
                }
            }
        }
        out
    }

    /// Position of a split name in [`RunConfig::splits`]; doubles as its RNG stream.
    pub fn split_index(&self, name: &str) -> CliResult<usize> {
        self.splits()
            .iter()
            .position(|s| s.name() == name)
            .ok_or_else(|| CliError::Input(format!("unknown split `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub direction: Direction,
    pub rho: f64,
}

impl SplitSpec {
    /// `uniform`, `forward_50`, `backward_2.5`, ...
    pub fn name(&self) -> String {
        match self.direction {
            Direction::Uniform => "uniform".to_string(),
            d => format!("{d}_{}", self.rho),
        }
    }
}
