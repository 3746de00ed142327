//! Run manifests, metric files and markdown tables.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use onh_core::evaluation::{AggregateReport, MetricsReport, RocPoint};
use serde::{Deserialize, Serialize};

/// Written as `run.json` next to the frozen `config.toml`.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub seed: u64,
    pub version: String,
    /// Artifacts relative to the output directory.
    pub outputs: Vec<String>,
}

pub struct Outputs {
    root: PathBuf,
    files: Vec<String>,
}

impl Outputs {
    pub fn new(root: &Path) -> Self {
        Outputs {
            root: root.to_path_buf(),
            files: Vec::new(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of `rel` under the output directory, recorded as an artifact.
    pub fn file(&mut self, rel: impl AsRef<Path>) -> anyhow::Result<PathBuf> {
        let rel = rel.as_ref();
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string_lossy().replace('\\', "/"));
        Ok(path)
    }

    /// Records files a stage wrote under `rel_dir`.
    pub fn record_dir(&mut self, rel_dir: &str, names: &[&str]) {
        for n in names {
            if self.root.join(rel_dir).join(n).exists() {
                self.files.push(format!("{rel_dir}/{n}"));
            }
        }
    }

    pub fn into_files(mut self) -> Vec<String> {
        self.files.sort();
        self.files.dedup();
        self.files
    }
}

pub const STAGE_FILES: [&str; 5] = ["train_log.jsonl", "best.ckpt", "last.ckpt", "model.ckpt", "summary.json"];

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsReport]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct RocRow {
    threshold: f64,
    fpr: f64,
    tpr: f64,
}

pub fn write_roc_csv(path: &Path, points: &[RocPoint]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in points {
        w.serialize(RocRow {
            threshold: p.threshold,
            fpr: p.fpr,
            tpr: p.tpr,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_roc_csv(path: &Path) -> anyhow::Result<Vec<RocPoint>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: RocRow = row?;
        out.push(RocPoint {
            threshold: row.threshold,
            fpr: row.fpr,
            tpr: row.tpr,
        });
    }
    Ok(out)
}

fn cell(report: &AggregateReport, key: &str) -> String {
    match report.metrics.get(key) {
        Some(s) => format!("{:.4} ± {:.4}", s.mean, s.std),
        None => "n/a".into(),
    }
}

/// Depth table: correlation and RMSE per method.
pub fn depth_table(rows: &[(String, &AggregateReport)]) -> String {
    let mut s = String::from("| Method | Corr | RMSE |\n|---|---|---|\n");
    for (name, r) in rows {
        s += &format!("| {name} | {} | {} |\n", cell(r, "corr"), cell(r, "rmse"));
    }
    s
}

/// Segmentation table: overlap error, balanced accuracy, Dice, CDR error and AUC.
pub fn seg_table(rows: &[(String, &AggregateReport)]) -> String {
    let keys = ["e_disc", "e_cup", "a_disc", "a_cup", "d_disc", "d_cup", "delta_e"];
    let mut s = String::from("| Method | E_disc | E_cup | A_disc | A_cup | D_disc | D_cup | δE | AUC |\n");
    s += "|---|---|---|---|---|---|---|---|---|\n";
    for (name, r) in rows {
        let cells: Vec<String> = keys.iter().map(|k| cell(r, k)).collect();
        let auc = r.auc.map_or("n/a".into(), |a| format!("{a:.4}"));
        s += &format!("| {name} | {} | {auc} |\n", cells.join(" | "));
    }
    s
}

/// Tables for whichever metric groups the report holds.
pub fn tables(name: &str, report: &AggregateReport) -> String {
    let mut s = String::new();
    let row = [(name.to_string(), report)];
    if report.metrics.contains_key("rmse") {
        s += &depth_table(&row);
    }
    if report.metrics.keys().any(|k| k.starts_with("e_") || k.starts_with("d_")) {
        if !s.is_empty() {
            s.push('\n');
        }
        s += &seg_table(&row);
    }
    s
}

/// Per-fold cross-validation row.
#[derive(Debug, Serialize)]
pub struct FoldRow {
    pub fold: usize,
    pub id: String,
    pub rmse: f64,
    pub corr: f64,
}

pub fn write_fold_csv(path: &Path, rows: &[FoldRow]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Split assignment written by half-split training.
#[derive(Debug, Serialize)]
pub struct SplitFile {
    pub seed: u64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

pub type Metadata = BTreeMap<String, String>;
