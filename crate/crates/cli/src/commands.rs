//! Subcommand bodies: each reads its inputs from disk, runs one pipeline
//! stage and writes its artifacts.
//!
//! Layout under the configured directories:
//!
//! ```text
//! data_dir/train.bin, pool.bin, test_<split>.bin   (+ .json sidecars)
//! run_dir/model.ckpt, train_stats.jsonl
//! run_dir/weights_<split>.json, adapt_<split>.jsonl
//! run_dir/eval_<split>_<variant>.json
//! ```

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tade::data::{load_dataset, save_dataset, Dataset};
use tade::eval::{EvalReport, CSV_HEADER};
use tade::model::{load_checkpoint, save_checkpoint, Checkpoint};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, WithPath};
use crate::pipeline::{adapt_split, eval_split, fresh_checkpoint, generate, train_model, uniform_weights};

pub fn train_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("train.bin")
}

pub fn pool_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.data_dir.join("pool.bin")
}

pub fn split_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.paths.data_dir.join(format!("test_{split}.bin"))
}

pub fn checkpoint_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run_dir.join("model.ckpt")
}

pub fn stats_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.run_dir.join("train_stats.jsonl")
}

pub fn weights_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.paths.run_dir.join(format!("weights_{split}.json"))
}

pub fn trace_path(cfg: &RunConfig, split: &str) -> PathBuf {
    cfg.paths.run_dir.join(format!("adapt_{split}.jsonl"))
}

pub fn eval_path(cfg: &RunConfig, split: &str, variant: &str) -> PathBuf {
    cfg.paths.run_dir.join(format!("eval_{split}_{variant}.json"))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).at(dir)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value).expect("value serializes");
    text.push('\n');
    fs::write(path, text).at(path)
}

fn load_split(path: &Path) -> CliResult<Dataset> {
    load_dataset(path).at(path)
}

/// Expands `all` into every configured split and checks the other names.
pub fn resolve_splits(cfg: &RunConfig, requested: &[String]) -> CliResult<Vec<String>> {
    if requested.is_empty() {
        return Err(CliError::Input("no split given".into()));
    }
    if requested.iter().any(|s| s == "all") {
        return Ok(cfg.splits().iter().map(|s| s.name()).collect());
    }
    for name in requested {
        cfg.split_index(name)?;
    }
    Ok(requested.to_vec())
}

/// Writes the training set, the balanced pool and every test split; returns
/// the `.bin` paths written.
pub fn cmd_gen_data(cfg: &RunConfig) -> CliResult<Vec<PathBuf>> {
    let data = generate(cfg)?;
    create_dir(&cfg.paths.data_dir)?;
    let mut written = Vec::new();
    let mut save = |path: PathBuf, set: &Dataset| -> CliResult<()> {
        save_dataset(&path, set).at(&path)?;
        written.push(path);
        Ok(())
    };
    save(train_path(cfg), &data.train)?;
    save(pool_path(cfg), &data.pool)?;
    for (name, split) in &data.splits {
        save(split_path(cfg, name), split)?;
    }
    Ok(written)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from the existing checkpoint instead of starting over.
    pub resume: bool,
    /// Stop (and checkpoint) once this many epochs are complete.
    pub stop_after: Option<usize>,
}

pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> CliResult<Checkpoint> {
    let train = load_split(&train_path(cfg))?;
    create_dir(&cfg.paths.run_dir)?;
    let ckpt_path = checkpoint_path(cfg);
    let stats = stats_path(cfg);
    let (start, stats_file) = if opts.resume {
        let ckpt = load_checkpoint(&ckpt_path).at(&ckpt_path)?;
        let file = OpenOptions::new().create(true).append(true).open(&stats).at(&stats)?;
        (ckpt, file)
    } else {
        (fresh_checkpoint(cfg, &train)?, File::create(&stats).at(&stats)?)
    };
    if start.train_counts != train.class_counts()? {
        return Err(CliError::Input("checkpoint was trained on a different training set".into()));
    }
    let mut out = BufWriter::new(stats_file);
    let ckpt = train_model(cfg, &train, start, opts.stop_after, |rec| {
        let line = serde_json::to_string(rec).expect("record serializes");
        writeln!(out, "{line}").at(&stats)?;
        out.flush().at(&stats)
    })?;
    save_checkpoint(&ckpt_path, &ckpt).at(&ckpt_path)?;
    Ok(ckpt)
}

/// Adaptation result as written to `weights_<split>.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsFile {
    pub split: String,
    pub w: Vec<f64>,
    pub raw: Vec<f64>,
    pub epochs_run: usize,
    pub stopped: bool,
    pub stop_threshold: f64,
}

/// A weights file may be a full [`WeightsFile`] or a bare JSON array.
#[derive(Deserialize)]
#[serde(untagged)]
enum WeightsDoc {
    Bare(Vec<f64>),
    Full { w: Vec<f64> },
}

pub fn read_weights(path: &Path) -> CliResult<Vec<f64>> {
    let text = fs::read_to_string(path).at(path)?;
    let doc: WeightsDoc = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("{}: not a weights file: {e}", path.display())))?;
    Ok(match doc {
        WeightsDoc::Bare(w) | WeightsDoc::Full { w } => w,
    })
}

pub fn cmd_adapt(cfg: &RunConfig, splits: &[String]) -> CliResult<Vec<WeightsFile>> {
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = load_checkpoint(&ckpt_path).at(&ckpt_path)?;
    create_dir(&cfg.paths.run_dir)?;
    let mut results = Vec::new();
    for split in resolve_splits(cfg, splits)? {
        let data = load_split(&split_path(cfg, &split))?;
        let outcome = adapt_split(cfg, &ckpt.model, &split, &data)?;
        let trace = trace_path(cfg, &split);
        let lines: String = outcome
            .trace
            .iter()
            .map(|e| serde_json::to_string(e).expect("trace serializes") + "\n")
            .collect();
        fs::write(&trace, lines).at(&trace)?;
        let file = WeightsFile {
            split: split.clone(),
            w: outcome.state.w,
            raw: outcome.state.raw,
            epochs_run: outcome.state.epoch,
            stopped: outcome.state.stopped,
            stop_threshold: outcome.state.stop_threshold,
        };
        write_json(&weights_path(cfg, &split), &file)?;
        results.push(file);
    }
    Ok(results)
}

/// Where `cmd_eval` takes its aggregation weights from.
#[derive(Debug, Clone, PartialEq)]
pub enum WeightsSource {
    Uniform,
    /// One weight vector for every split.
    File(PathBuf),
    /// Each split's own `weights_<split>.json` from the run directory.
    Adapted,
}

fn check_variant(variant: &str) -> CliResult<()> {
    let ok = !variant.is_empty()
        && variant.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_');
    if ok {
        Ok(())
    } else {
        Err(CliError::Input(format!("variant name `{variant}` must be [A-Za-z0-9_-]+")))
    }
}

/// Evaluates the splits on worker threads; reports come back in split order
/// and, when `csv` is given, are appended to it as rows.
pub fn cmd_eval(
    cfg: &RunConfig,
    splits: &[String],
    weights: &WeightsSource,
    variant: &str,
    csv: Option<&Path>,
) -> CliResult<Vec<(String, EvalReport)>> {
    check_variant(variant)?;
    let ckpt_path = checkpoint_path(cfg);
    let ckpt = load_checkpoint(&ckpt_path).at(&ckpt_path)?;
    let splits = resolve_splits(cfg, splits)?;
    let fixed = match weights {
        WeightsSource::Uniform => Some(uniform_weights(ckpt.model.experts())),
        WeightsSource::File(path) => Some(read_weights(path)?),
        WeightsSource::Adapted => None,
    };
    let jobs = splits
        .iter()
        .map(|split| {
            let w = match &fixed {
                Some(w) => w.clone(),
                None => read_weights(&weights_path(cfg, split))?,
            };
            Ok((split.clone(), load_split(&split_path(cfg, split))?, w))
        })
        .collect::<CliResult<Vec<_>>>()?;
    let reports: Vec<(String, EvalReport)> = std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .iter()
            .map(|(split, data, w)| {
                let ckpt = &ckpt;
                scope.spawn(move || eval_split(cfg, ckpt, split, data, w).map(|r| (split.clone(), r)))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<CliResult<_>>()
    })?;
    create_dir(&cfg.paths.run_dir)?;
    for (split, report) in &reports {
        write_json(&eval_path(cfg, split, variant), report)?;
    }
    if let Some(path) = csv {
        append_csv(path, reports.iter().map(|(s, r)| r.csv_row(s, variant)))?;
    }
    Ok(reports)
}

fn append_csv(path: &Path, rows: impl Iterator<Item = String>) -> CliResult<()> {
    let fresh = fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let file = OpenOptions::new().create(true).append(true).open(path).at(path)?;
    let mut out = BufWriter::new(file);
    if fresh {
        writeln!(out, "{CSV_HEADER}").at(path)?;
    }
    for row in rows {
        writeln!(out, "{row}").at(path)?;
    }
    out.flush().at(path)
}
