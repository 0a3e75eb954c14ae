//! Metrics files: one CSV per seed plus a JSON summary per run directory.

use std::fs;
use std::path::{Path, PathBuf};

use super::config::RunConfig;
use super::runner::{ExperimentResult, Summary};
use super::RoundRecord;
use crate::error::{Error, Result};
use crate::tensors::ALL_GROUPS;

pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.toml";

/// Columns shared by every run, before the per-group columns.
pub const BASE_COLUMNS: [&str; 7] = [
    "round",
    "train_loss",
    "eval_loss",
    "eval_acc",
    "sim_score",
    "scale_ratio",
    "oracle_eta",
];

pub fn metrics_file_name(seed: u64) -> String {
    format!("metrics_seed{seed}.csv")
}

pub fn header(group_names: &[String]) -> Vec<String> {
    let mut cols: Vec<String> = BASE_COLUMNS.iter().map(|s| s.to_string()).collect();
    cols.push(format!("{ALL_GROUPS}.gsi"));
    for g in group_names {
        cols.push(format!("{g}.gsi"));
        cols.push(format!("{g}.multiplier"));
    }
    cols.push("sampled".into());
    cols
}

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

fn row(r: &RoundRecord) -> Vec<String> {
    let mut out = vec![
        r.round.to_string(),
        r.train_loss.to_string(),
        opt(r.eval_loss),
        opt(r.eval_acc),
        opt(r.sim_score),
        opt(r.scale_ratio),
        opt(r.oracle_eta),
        opt(r.gsi_all),
    ];
    for g in &r.groups {
        out.push(opt(g.gsi));
        out.push(g.multiplier.to_string());
    }
    let ids: Vec<String> = r.sampled.iter().map(|k| k.to_string()).collect();
    out.push(ids.join(";"));
    out
}

/// Writes per-round metrics. Floats use shortest round-trip formatting and
/// missing values are empty cells, so identical runs give identical bytes.
pub fn write_metrics_csv(path: &Path, group_names: &[String], records: &[RoundRecord]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header(group_names))?;
    for r in records {
        w.write_record(row(r))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// A metrics CSV read back as strings.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn column(&self, name: &str) -> Option<Vec<&str>> {
        let idx = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[idx].as_str()).collect())
    }

    /// Numeric column; empty cells are skipped.
    pub fn floats(&self, name: &str) -> Option<Vec<f64>> {
        let col = self.column(name)?;
        Some(col.iter().filter_map(|s| s.parse().ok()).collect())
    }
}

pub fn read_metrics_csv(path: &Path) -> Result<MetricsTable> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(file);
    let header = r.headers()?.iter().map(str::to_string).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(MetricsTable { header, rows })
}

pub fn write_summary(path: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// Writes config, per-seed CSVs and the summary into `dir`; returns the CSV paths.
pub fn write_run_dir(dir: &Path, cfg: &RunConfig, result: &ExperimentResult) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, cfg.to_toml_string()).map_err(|e| Error::io(&cfg_path, e))?;
    let mut paths = Vec::new();
    for run in &result.runs {
        let groups: Vec<String> = run.final_params.group_names().map(str::to_string).collect();
        let path = dir.join(metrics_file_name(run.seed));
        write_metrics_csv(&path, &groups, &run.records)?;
        paths.push(path);
    }
    write_summary(&dir.join(SUMMARY_FILE), &result.summary)?;
    Ok(paths)
}

/// Metrics CSVs in `dir`, sorted by name.
pub fn list_metrics_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("metrics_seed") && n.ends_with(".csv"))
        })
        .collect();
    out.sort();
    Ok(out)
}
