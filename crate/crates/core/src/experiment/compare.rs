use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::run::quantile;
use super::ExperimentError;

/// Metric columns of a comparison, in output order.
pub const COMPARED_METRICS: [&str; 6] = [
    "final_r1",
    "mean_neg_sim",
    "same_cluster_frac",
    "uov1",
    "steps_to_threshold",
    "epoch_seconds",
];

const CELL_COLUMNS: [&str; 8] = [
    "arm",
    "seed",
    "final_r1_i2t",
    "final_r1_t2i",
    "mean_neg_sim",
    "same_cluster_frac",
    "uov1",
    "steps_to_threshold",
];
const TIMING_COLUMNS: [&str; 3] = ["arm", "seed", "epoch_seconds_median"];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

impl Stat {
    fn of(v: &[f64]) -> Self {
        Stat { median: quantile(v, 0.5), q1: quantile(v, 0.25), q3: quantile(v, 0.75) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmStats {
    /// `<result dir name>/<arm>`.
    pub label: String,
    pub cells: usize,
    /// Parallel to [`COMPARED_METRICS`].
    pub stats: Vec<Stat>,
    /// Median minus the first arm's median, per metric.
    pub deltas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonTable {
    pub arms: Vec<ArmStats>,
}

fn read_table(path: &Path, required: &[&str]) -> Result<Vec<HashMap<String, String>>, ExperimentError> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => ExperimentError::io(path, io),
        other => ExperimentError::InvalidPlan(format!("{}: {other:?}", path.display())),
    })?;
    let headers = r.headers()?.clone();
    if let Some(col) = required.iter().find(|c| !headers.iter().any(|h| h == **c)) {
        return Err(ExperimentError::SchemaMismatch { path: path.to_path_buf(), column: col.to_string() });
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(headers.iter().zip(rec.iter()).map(|(h, v)| (h.to_string(), v.to_string())).collect());
    }
    Ok(rows)
}

fn num(row: &HashMap<String, String>, col: &str) -> Option<f64> {
    row.get(col).and_then(|v| v.parse::<f64>().ok()).filter(|v| !v.is_nan())
}

/// Per-arm medians and IQRs across the result directories of finished
/// runs, with deltas against the first arm listed.
pub fn compare(dirs: &[PathBuf]) -> Result<ComparisonTable, ExperimentError> {
    let mut arms = Vec::new();
    for dir in dirs {
        let cells = read_table(&dir.join("cells.csv"), &CELL_COLUMNS)?;
        let timing = read_table(&dir.join("cells_timing.csv"), &TIMING_COLUMNS)?;
        let secs: HashMap<(String, String), f64> = timing
            .iter()
            .filter_map(|t| Some(((t["arm"].clone(), t["seed"].clone()), num(t, "epoch_seconds_median")?)))
            .collect();
        let tag = dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| dir.display().to_string());
        let mut order: Vec<String> = Vec::new();
        for c in &cells {
            if !order.contains(&c["arm"]) {
                order.push(c["arm"].clone());
            }
        }
        for arm in order {
            let mine: Vec<&HashMap<String, String>> = cells.iter().filter(|c| c["arm"] == arm).collect();
            let column = |f: &dyn Fn(&HashMap<String, String>) -> Option<f64>| -> Vec<f64> {
                mine.iter().filter_map(|c| f(c)).collect()
            };
            let values = [
                column(&|c| Some(0.5 * (num(c, "final_r1_i2t")? + num(c, "final_r1_t2i")?))),
                column(&|c| num(c, "mean_neg_sim")),
                column(&|c| num(c, "same_cluster_frac")),
                column(&|c| num(c, "uov1")),
                column(&|c| num(c, "steps_to_threshold")),
                column(&|c| secs.get(&(c["arm"].clone(), c["seed"].clone())).copied()),
            ];
            arms.push(ArmStats {
                label: format!("{tag}/{arm}"),
                cells: mine.len(),
                stats: values.iter().map(|v| Stat::of(v)).collect(),
                deltas: Vec::new(),
            });
        }
    }
    if let Some(first) = arms.first().map(|a| a.stats.clone()) {
        for a in &mut arms {
            a.deltas = a.stats.iter().zip(&first).map(|(s, f)| s.median - f.median).collect();
        }
    }
    Ok(ComparisonTable { arms })
}

impl ComparisonTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("label,cells");
        for m in COMPARED_METRICS {
            let _ = write!(out, ",{m}_median,{m}_q1,{m}_q3,{m}_delta");
        }
        out.push('\n');
        for a in &self.arms {
            let _ = write!(out, "{},{}", a.label, a.cells);
            for (s, d) in a.stats.iter().zip(&a.deltas) {
                let _ = write!(out, ",{},{},{},{}", s.median, s.q1, s.q3, d);
            }
            out.push('\n');
        }
        out
    }

    /// Aligned text table of medians with IQRs and deltas.
    pub fn to_text(&self) -> String {
        let mut rows = vec![{
            let mut h = vec!["arm".to_string(), "cells".to_string()];
            h.extend(COMPARED_METRICS.iter().map(|m| m.to_string()));
            h
        }];
        for a in &self.arms {
            let mut r = vec![a.label.clone(), a.cells.to_string()];
            for (s, d) in a.stats.iter().zip(&a.deltas) {
                r.push(if s.median.is_nan() {
                    "-".into()
                } else {
                    format!("{:.4} [{:.4}, {:.4}] ({:+.4})", s.median, s.q1, s.q3, d)
                });
            }
            rows.push(r);
        }
        let widths: Vec<usize> =
            (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in rows {
            let line: Vec<String> = r.iter().zip(&widths).map(|(v, w)| format!("{v:<w$}")).collect();
            out.push_str(line.join("  ").trim_end());
            out.push('\n');
        }
        out
    }
}
