//! Assembles evaluation CSV rows into a markdown summary and one plot-ready
//! TSV per weights variant.
//!
//! Splits are ordered along a signed log-ratio axis: forward splits at
//! `-ln ρ`, the uniform split at 0 and backward splits at `+ln ρ`. Repeated
//! `(split, variant)` rows, e.g. from several seeds, are averaged.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Deserialize;
use tade::eval::CSV_HEADER;

use crate::error::{CliError, CliResult, WithPath};

pub const BASELINE_VARIANT: &str = "uniform";

#[derive(Debug, Clone, Deserialize)]
struct CsvRow {
    split: String,
    variant: String,
    #[allow(dead_code)]
    samples: usize,
    many: Option<f64>,
    medium: Option<f64>,
    few: Option<f64>,
    top1: f64,
    confidence: f64,
    mi_nats: f64,
    #[allow(dead_code)]
    entropy_nats: f64,
    #[allow(dead_code)]
    stability: f64,
    #[allow(dead_code)]
    weights: String,
}

/// Mean metrics of one `(split, variant)` cell.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub runs: usize,
    pub top1: f64,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub confidence: f64,
    pub mi_nats: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    /// Splits in axis order.
    pub splits: Vec<String>,
    /// Variants with the baseline first, the rest alphabetical.
    pub variants: Vec<String>,
    pub cells: BTreeMap<(String, String), Cell>,
}

/// Signed log-ratio position of a split name; `None` for unrecognized names.
pub fn split_axis(name: &str) -> Option<f64> {
    if name == "uniform" {
        return Some(0.0);
    }
    let (direction, rho) = name.split_once('_')?;
    let rho: f64 = rho.parse().ok().filter(|r: &f64| *r >= 1.0)?;
    match direction {
        "forward" => Some(-rho.ln()),
        "backward" => Some(rho.ln()),
        _ => None,
    }
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn mean_opt(xs: &[Option<f64>]) -> Option<f64> {
    let present: Vec<f64> = xs.iter().flatten().copied().collect();
    (!present.is_empty()).then(|| mean(&present))
}

fn read_rows(path: &Path) -> CliResult<Vec<CsvRow>> {
    let text = fs::read_to_string(path).at(path)?;
    let header = text.lines().next().unwrap_or_default();
    if header.trim_end() != CSV_HEADER {
        return Err(CliError::Input(format!(
            "{}: header `{header}` does not match `{CSV_HEADER}`",
            path.display()
        )));
    }
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| CliError::Input(format!("{}: {e}", path.display()))))
        .collect()
}

pub fn build_report(csvs: &[PathBuf]) -> CliResult<Report> {
    let mut grouped: BTreeMap<(String, String), Vec<CsvRow>> = BTreeMap::new();
    for path in csvs {
        for row in read_rows(path)? {
            grouped.entry((row.split.clone(), row.variant.clone())).or_default().push(row);
        }
    }
    if grouped.is_empty() {
        return Err(CliError::Input("no evaluation rows to report".into()));
    }
    let cells: BTreeMap<(String, String), Cell> = grouped
        .into_iter()
        .map(|(key, rows)| {
            let col = |f: fn(&CsvRow) -> f64| mean(&rows.iter().map(f).collect::<Vec<_>>());
            let opt = |f: fn(&CsvRow) -> Option<f64>| mean_opt(&rows.iter().map(f).collect::<Vec<_>>());
            let cell = Cell {
                runs: rows.len(),
                top1: col(|r| r.top1),
                many: opt(|r| r.many),
                medium: opt(|r| r.medium),
                few: opt(|r| r.few),
                confidence: col(|r| r.confidence),
                mi_nats: col(|r| r.mi_nats),
            };
            (key, cell)
        })
        .collect();

    let mut splits: Vec<String> = cells.keys().map(|(s, _)| s.clone()).collect();
    splits.dedup();
    splits.sort_by(|a, b| match (split_axis(a), split_axis(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => a.cmp(b),
    });
    let mut variants: Vec<String> = cells.keys().map(|(_, v)| v.clone()).collect();
    variants.sort();
    variants.dedup();
    if let Some(i) = variants.iter().position(|v| v == BASELINE_VARIANT) {
        let base = variants.remove(i);
        variants.insert(0, base);
    }
    Ok(Report {
        splits,
        variants,
        cells,
    })
}

impl Report {
    pub fn cell(&self, split: &str, variant: &str) -> Option<&Cell> {
        self.cells.get(&(split.to_string(), variant.to_string()))
    }

    /// Top-1 of `variant` minus the baseline's on `split`, when both exist.
    pub fn delta(&self, split: &str, variant: &str) -> Option<f64> {
        if variant == BASELINE_VARIANT {
            return None;
        }
        Some(self.cell(split, variant)?.top1 - self.cell(split, BASELINE_VARIANT)?.top1)
    }

    fn compared(&self) -> Vec<&String> {
        let has_base = self.variants.iter().any(|v| v == BASELINE_VARIANT);
        self.variants
            .iter()
            .filter(|v| has_base && v.as_str() != BASELINE_VARIANT)
            .collect()
    }

    /// Top-1 accuracy (percent) per split and variant, with one delta
    /// column per non-baseline variant when a baseline is present.
    pub fn markdown(&self) -> String {
        let pct = |x: f64| format!("{:.2}", 100.0 * x);
        let compared = self.compared();
        let mut head = vec!["split".to_string()];
        head.extend(self.variants.iter().map(|v| format!("{v} top1")));
        head.extend(compared.iter().map(|v| format!("Δ {v} − {BASELINE_VARIANT}")));
        let mut out = String::from("# Evaluation summary\n\n");
        writeln!(out, "| {} |", head.join(" | ")).unwrap();
        writeln!(out, "|{}", "---|".repeat(head.len())).unwrap();
        for split in &self.splits {
            let mut row = vec![split.clone()];
            row.extend(
                self.variants
                    .iter()
                    .map(|v| self.cell(split, v).map(|c| pct(c.top1)).unwrap_or_default()),
            );
            row.extend(compared.iter().map(|v| {
                self.delta(split, v)
                    .map(|d| format!("{:+.2}", 100.0 * d))
                    .unwrap_or_default()
            }));
            writeln!(out, "| {} |", row.join(" | ")).unwrap();
        }
        out
    }

    /// Plot data for one variant: one line per split in axis order.
    pub fn tsv(&self, variant: &str) -> String {
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        let mut out = String::from("split\taxis\ttop1\tmany\tmedium\tfew\tconfidence\tmi_nats\truns\tdelta_top1\n");
        for split in &self.splits {
            let Some(c) = self.cell(split, variant) else { continue };
            writeln!(
                out,
                "{split}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                opt(split_axis(split)),
                c.top1,
                opt(c.many),
                opt(c.medium),
                opt(c.few),
                c.confidence,
                c.mi_nats,
                c.runs,
                opt(self.delta(split, variant)),
            )
            .unwrap();
        }
        out
    }
}

/// Writes `summary.md` and `plot_<variant>.tsv` into `out_dir`; returns the
/// paths written.
pub fn cmd_report(csvs: &[PathBuf], out_dir: &Path) -> CliResult<Vec<PathBuf>> {
    let report = build_report(csvs)?;
    fs::create_dir_all(out_dir).at(out_dir)?;
    let mut written = vec![out_dir.join("summary.md")];
    fs::write(&written[0], report.markdown()).at(&written[0])?;
    for variant in &report.variants {
        let path = out_dir.join(format!("plot_{variant}.tsv"));
        fs::write(&path, report.tsv(variant)).at(&path)?;
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(split: &str, variant: &str, top1: f64) -> String {
        format!("{split},{variant},100,0.9,,0.2,{top1},0.7,1.1,2.0,0.5,0.3;0.3;0.4")
    }

    fn write_csv(dir: &Path, name: &str, rows: &[String]) -> PathBuf {
        let path = dir.join(name);
        let mut text = format!("{CSV_HEADER}\n");
        for r in rows {
            text.push_str(r);
            text.push('\n');
        }
        fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn axis_orders_forward_uniform_backward() {
        assert_eq!(split_axis("uniform"), Some(0.0));
        assert!(split_axis("forward_50").unwrap() < split_axis("forward_2").unwrap());
        assert!(split_axis("backward_2").unwrap() < split_axis("backward_50").unwrap());
        assert_eq!(split_axis("sideways_3"), None);
        assert_eq!(split_axis("forward_x"), None);
    }

    #[test]
    fn single_row_gives_single_row_table() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(dir.path(), "a.csv", &[row("forward_50", "uniform", 0.5)]);
        let report = build_report(&[csv]).unwrap();
        let md = report.markdown();
        let body: Vec<&str> = md.lines().filter(|l| l.starts_with("| forward")).collect();
        assert_eq!(body, vec!["| forward_50 | 50.00 |"]);
        assert!(!md.contains('Δ'));
    }

    #[test]
    fn delta_is_adapted_minus_uniform() {
        let dir = tempfile::tempdir().unwrap();
        let csv = write_csv(
            dir.path(),
            "a.csv",
            &[
                row("backward_50", "adapted", 0.70),
                row("backward_50", "uniform", 0.65),
                row("uniform", "uniform", 0.6),
                row("uniform", "adapted", 0.6),
                row("forward_50", "uniform", 0.7),
                row("forward_50", "adapted", 0.72),
            ],
        );
        let report = build_report(&[csv]).unwrap();
        assert_eq!(report.splits, vec!["forward_50", "uniform", "backward_50"]);
        assert_eq!(report.variants, vec!["uniform", "adapted"]);
        assert!((report.delta("backward_50", "adapted").unwrap() - 0.05).abs() < 1e-12);
        assert!(report.delta("backward_50", "uniform").is_none());
        assert!(report.markdown().contains("| backward_50 | 65.00 | 70.00 | +5.00 |"));
        let tsv = report.tsv("adapted");
        assert_eq!(tsv.lines().count(), 4);
        assert!(tsv.lines().nth(3).unwrap().starts_with("backward_50\t"));
    }

    #[test]
    fn repeated_rows_are_averaged_across_files() {
        let dir = tempfile::tempdir().unwrap();
        let a = write_csv(dir.path(), "a.csv", &[row("uniform", "uniform", 0.5)]);
        let b = write_csv(dir.path(), "b.csv", &[row("uniform", "uniform", 0.7)]);
        let report = build_report(&[a, b]).unwrap();
        let cell = report.cell("uniform", "uniform").unwrap();
        assert_eq!(cell.runs, 2);
        assert!((cell.top1 - 0.6).abs() < 1e-12);
        assert_eq!(cell.medium, None);
    }

    #[test]
    fn empty_and_mismatched_inputs_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let empty = write_csv(dir.path(), "e.csv", &[]);
        assert!(matches!(build_report(&[empty]), Err(CliError::Input(_))));
        assert!(matches!(build_report(&[]), Err(CliError::Input(_))));
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "split,variant,top1\nuniform,uniform,0.5\n").unwrap();
        assert!(matches!(build_report(&[bad]), Err(CliError::Input(_))));
    }
}
