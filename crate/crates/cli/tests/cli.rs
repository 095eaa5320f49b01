use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tade::data::load_dataset;
use tade::model::load_checkpoint;
use tade::numkit::argmax;
use tade_cli::pipeline::fresh_checkpoint;
use tade_cli::RunConfig;
use tempfile::TempDir;

const SMALL: &str = r#"{
  "data": { "max_count": 240, "test_per_class": 30 },
  "model": { "backbone": [16], "head": [8] },
  "train": { "epochs": 4, "batch_size": 64 },
  "adapt": { "epochs": 2, "batch_size": 64 }
}"#;

struct Workspace {
    dir: TempDir,
}

impl Workspace {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("cfg.json"), SMALL).unwrap();
        Self { dir }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, None)
    }

    fn run_env(&self, args: &[&str], seed_env: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_tade"));
        cmd.args(args).args(["--config", "cfg.json"]).current_dir(self.dir.path());
        match seed_env {
            Some(seed) => cmd.env("TADE_SEED", seed),
            None => cmd.env_remove("TADE_SEED"),
        };
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) {
        let out = self.run(args);
        assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    }

    fn config(&self) -> RunConfig {
        let mut cfg = RunConfig::load(&self.path("cfg.json")).unwrap();
        cfg.paths.data_dir = self.path("data");
        cfg.paths.run_dir = self.path("run");
        cfg
    }

    fn json(&self, rel: &str) -> Value {
        serde_json::from_str(&fs::read_to_string(self.path(rel)).unwrap()).unwrap()
    }
}

fn bytes(path: &Path) -> Vec<u8> {
    fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

#[test]
fn gen_data_writes_every_split_and_is_repeatable() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    let cfg = ws.config();
    let splits = cfg.splits();
    assert_eq!(splits.len(), 11);
    let before: Vec<Vec<u8>> = splits
        .iter()
        .map(|s| bytes(&ws.path(&format!("data/test_{}.bin", s.name()))))
        .collect();
    ws.ok(&["gen-data"]);
    for (split, old) in splits.iter().zip(&before) {
        assert_eq!(&bytes(&ws.path(&format!("data/test_{}.bin", split.name()))), old);
    }
    let train = load_dataset(&ws.path("data/train.bin")).unwrap();
    let counts = train.class_counts().unwrap();
    assert_eq!(counts[0], 240);
    assert!(counts.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn zero_epochs_leaves_the_initialization() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--epochs", "0"]);
    let mut cfg = ws.config();
    cfg.train.epochs = 0;
    let train = load_dataset(&ws.path("data/train.bin")).unwrap();
    let expected = fresh_checkpoint(&cfg, &train).unwrap();
    let saved = load_checkpoint(&ws.path("run/model.ckpt")).unwrap();
    assert_eq!(saved.model, expected.model);
    assert_eq!(saved.epochs_completed, 0);
}

#[test]
fn interrupted_training_resumes_to_the_same_checkpoint() {
    let straight = Workspace::new();
    straight.ok(&["gen-data"]);
    straight.ok(&["train"]);

    let resumed = Workspace::new();
    resumed.ok(&["gen-data"]);
    resumed.ok(&["train", "--stop-after", "2"]);
    assert_eq!(load_checkpoint(&resumed.path("run/model.ckpt")).unwrap().epochs_completed, 2);
    resumed.ok(&["train", "--resume"]);

    assert_eq!(bytes(&straight.path("run/model.ckpt")), bytes(&resumed.path("run/model.ckpt")));
    let stats = fs::read_to_string(resumed.path("run/train_stats.jsonl")).unwrap();
    let epochs: Vec<u64> = stats
        .lines()
        .map(|l| serde_json::from_str::<Value>(l).unwrap()["epoch"].as_u64().unwrap())
        .collect();
    assert_eq!(epochs, [0, 1, 2, 3]);
}

#[test]
fn zero_adaptation_epochs_give_uniform_weights() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--epochs", "1"]);
    ws.ok(&["adapt", "--split", "uniform", "forward_5", "--epochs", "0"]);
    for split in ["uniform", "forward_5"] {
        let w = ws.json(&format!("run/weights_{split}.json"));
        let w: Vec<f64> = w["w"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect();
        assert_eq!(w, vec![1.0 / 3.0; 3]);
    }
}

#[test]
fn exit_codes_follow_the_error_kind() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["train", "--epochs", "1"]);

    fs::write(ws.path("bad.json"), "[0.5, 0.7, -0.2]").unwrap();
    let out = ws.run(&["eval", "--split", "uniform", "--weights", "bad.json"]);
    assert_eq!(out.status.code(), Some(4));

    fs::write(ws.path("empty.csv"), "").unwrap();
    assert_eq!(ws.run(&["report", "empty.csv"]).status.code(), Some(5));

    let out = ws.run(&["adapt", "--split", "no_such_split"]);
    assert_eq!(out.status.code(), Some(5));

    fs::write(ws.path("blocker"), "a file, not a directory").unwrap();
    let out = ws.run(&["gen-data", "--data-dir", "blocker/data"]);
    assert_eq!(out.status.code(), Some(2));

    let out = ws.run(&["train", "--run-dir", "missing", "--resume"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn seed_flag_overrides_environment() {
    let from_env = Workspace::new();
    assert!(from_env.run_env(&["gen-data"], Some("11")).status.success());
    let from_flag = Workspace::new();
    assert!(from_flag.run_env(&["gen-data", "--seed", "11"], Some("3")).status.success());
    let default = Workspace::new();
    default.ok(&["gen-data"]);

    let a = bytes(&from_env.path("data/train.bin"));
    assert_eq!(a, bytes(&from_flag.path("data/train.bin")));
    assert_ne!(a, bytes(&default.path("data/train.bin")));
}

#[test]
fn one_hot_weights_report_the_single_expert() {
    let ws = Workspace::new();
    ws.ok(&["gen-data"]);
    ws.ok(&["train"]);
    fs::write(ws.path("last.json"), "[0.0, 0.0, 1.0]").unwrap();
    ws.ok(&["eval", "--split", "backward_10", "--weights", "last.json", "--variant", "tail", "--csv", "r.csv"]);
    ws.ok(&["eval", "--split", "backward_10", "--csv", "r.csv"]);
    ws.ok(&["report", "r.csv", "--out-dir", "rep"]);

    let ckpt = load_checkpoint(&ws.path("run/model.ckpt")).unwrap();
    let test = load_dataset(&ws.path("data/test_backward_10.bin")).unwrap();
    let logits = ckpt.model.expert_logits(&test.features).unwrap();
    let hits = logits[2]
        .row_iter()
        .zip(&test.labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    let expected = hits as f64 / test.labels.len() as f64;

    let reported = ws.json("run/eval_backward_10_tail.json")["top1"].as_f64().unwrap();
    assert!((reported - expected).abs() < 1e-12, "{reported} vs {expected}");
    let summary = fs::read_to_string(ws.path("rep/summary.md")).unwrap();
    assert!(summary.contains("tail"));
    assert!(ws.path("rep/plot_tail.tsv").exists());
}
