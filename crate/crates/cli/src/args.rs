//! Command-line surface. Values are resolved in the order config file, then
//! `TADE_SEED`, then flags; later sources win.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{cmd_adapt, cmd_eval, cmd_gen_data, cmd_train, TrainOptions, WeightsSource};
use crate::config::RunConfig;
use crate::error::CliResult;
use crate::report::cmd_report;

#[derive(Debug, Parser)]
#[command(name = "tade", version, about = "Long-tailed expert training and test-time aggregation")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run configuration; missing keys take defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Top-level seed, split into per-stage seeds.
    #[arg(long, global = true, env = "TADE_SEED")]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the training set, the balanced test pool and all test splits.
    GenData,
    /// Train the experts and write a checkpoint plus per-epoch stats.
    Train(TrainArgs),
    /// Learn aggregation weights on unlabeled test splits.
    Adapt(AdaptArgs),
    /// Evaluate test splits with uniform, fixed or adapted weights.
    Eval(EvalArgs),
    /// Summarize evaluation CSV files.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Continue from the checkpoint in the run directory.
    #[arg(long)]
    pub resume: bool,
    /// Checkpoint and exit once this many epochs are complete.
    #[arg(long)]
    pub stop_after: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    /// Split names such as `forward_50`, or `all`.
    #[arg(long = "split", required = true, num_args = 1..)]
    pub splits: Vec<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub stop_threshold: Option<f64>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Split names such as `forward_50`, or `all`.
    #[arg(long = "split", required = true, num_args = 1..)]
    pub splits: Vec<String>,
    /// Weights file (bare JSON array or an adapt output) used for every split.
    #[arg(long, conflicts_with = "adapted")]
    pub weights: Option<PathBuf>,
    /// Use each split's own adapted weights from the run directory.
    #[arg(long)]
    pub adapted: bool,
    /// Label for the CSV rows and report files; defaults to `uniform`,
    /// `adapted` or `custom` according to the weights source.
    #[arg(long)]
    pub variant: Option<String>,
    /// Append one row per split to this CSV file.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Evaluation CSV files.
    pub csv: Vec<PathBuf>,
    /// Output directory; defaults to `<run_dir>/report`.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

impl Cli {
    pub fn resolve_config(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.common.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.common.seed {
            cfg.seed = seed;
        }
        if let Some(dir) = &self.common.data_dir {
            cfg.paths.data_dir = dir.clone();
        }
        if let Some(dir) = &self.common.run_dir {
            cfg.paths.run_dir = dir.clone();
        }
        match &self.command {
            Command::Train(a) => {
                set(&mut cfg.train.epochs, a.epochs);
                set(&mut cfg.train.lr0, a.lr);
                set(&mut cfg.train.batch_size, a.batch_size);
                set(&mut cfg.train.lambda, a.lambda);
            }
            Command::Adapt(a) => {
                set(&mut cfg.adapt.epochs, a.epochs);
                set(&mut cfg.adapt.lr, a.lr);
                set(&mut cfg.adapt.batch_size, a.batch_size);
                set(&mut cfg.adapt.stop_threshold, a.stop_threshold);
            }
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Runs the parsed command, printing a short summary to stdout.
pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = cli.resolve_config()?;
    match &cli.command {
        Command::GenData => {
            for path in cmd_gen_data(&cfg)? {
                println!("wrote {}", path.display());
            }
        }
        Command::Train(a) => {
            let opts = TrainOptions {
                resume: a.resume,
                stop_after: a.stop_after,
            };
            let ckpt = cmd_train(&cfg, &opts)?;
            println!(
                "trained {} of {} epochs -> {}",
                ckpt.epochs_completed,
                cfg.train.epochs,
                crate::commands::checkpoint_path(&cfg).display()
            );
        }
        Command::Adapt(a) => {
            for w in cmd_adapt(&cfg, &a.splits)? {
                let stop = if w.stopped { " (stopped)" } else { "" };
                println!("{}: w = {:?} after {} epochs{stop}", w.split, w.w, w.epochs_run);
            }
        }
        Command::Eval(a) => {
            let (source, default_variant) = match (&a.weights, a.adapted) {
                (Some(path), _) => (WeightsSource::File(path.clone()), "custom"),
                (None, true) => (WeightsSource::Adapted, "adapted"),
                (None, false) => (WeightsSource::Uniform, "uniform"),
            };
            let variant = a.variant.as_deref().unwrap_or(default_variant);
            for (split, r) in cmd_eval(&cfg, &a.splits, &source, variant, a.csv.as_deref())? {
                println!("{split} [{variant}]: top1 {:.4}, mi {:.4} nats", r.top1, r.mi_nats);
            }
        }
        Command::Report(a) => {
            let out_dir = a.out_dir.clone().unwrap_or_else(|| cfg.paths.run_dir.join("report"));
            for path in cmd_report(&a.csv, &out_dir)? {
                println!("wrote {}", path.display());
            }
        }
    }
    Ok(())
}
