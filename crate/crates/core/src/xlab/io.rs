//! Metric files: the JSONL log, its CSV twin, and the per-task escape table.
//!
//! `metrics.csv` columns: `step,task,loss_norm,eval,nc_dist,wall_ms` (empty cell = absent).
//! `escape.csv` columns: `task,t_plateau,t_exit,budget,escaped` (empty cell = not reached).

use std::fs;
use std::io::BufWriter;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics::EscapeReport;
use crate::train::{MetricsRecord, RunLog};

pub const METRICS_JSONL: &str = "metrics.jsonl";
pub const METRICS_CSV: &str = "metrics.csv";
pub const ESCAPE_CSV: &str = "escape.csv";

/// One row of `escape.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeRow {
    pub task: String,
    pub t_plateau: Option<u64>,
    pub t_exit: Option<u64>,
    pub budget: u64,
    pub escaped: bool,
}

impl EscapeRow {
    pub fn new(task: &str, r: &EscapeReport) -> Self {
        Self { task: task.into(), t_plateau: r.t_plateau, t_exit: r.t_exit, budget: r.budget, escaped: r.escaped }
    }
}

/// Writes the three metric files into `dir`, creating it if needed.
pub fn write_metrics(log: &RunLog, labels: &[String], reports: &[EscapeReport], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut jsonl = BufWriter::new(fs::File::create(dir.join(METRICS_JSONL))?);
    log.write_jsonl(&mut jsonl)?;
    std::io::Write::flush(&mut jsonl)?;

    let mut w = csv::Writer::from_path(dir.join(METRICS_CSV))?;
    for r in &log.records {
        w.serialize(r)?;
    }
    if log.is_empty() {
        w.write_record(["step", "task", "loss_norm", "eval", "nc_dist", "wall_ms"])?;
    }
    w.flush()?;

    write_csv(&dir.join(ESCAPE_CSV), labels.iter().zip(reports).map(|(l, r)| EscapeRow::new(l, r)))
}

pub fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<R: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<R>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    read_csv(path)
}

pub fn read_jsonl(path: &Path) -> Result<RunLog> {
    RunLog::read_jsonl(std::io::BufReader::new(fs::File::open(path)?))
}
