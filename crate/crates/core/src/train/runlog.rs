//! Per-step, per-task metric records and their JSONL form.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::{escape_report, EscapeReport, LossStream};
use crate::taskgen::Modality;

/// One JSONL line. `eval` and `nc_dist` are present only at evaluation steps; `wall_ms`
/// only when wall-clock logging is enabled.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub step: u64,
    pub task: String,
    pub loss_norm: f64,
    pub eval: Option<f64>,
    pub nc_dist: Option<f64>,
    pub wall_ms: Option<u64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub records: Vec<MetricsRecord>,
}

impl RunLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, r: MetricsRecord) {
        self.records.push(r);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Task labels in order of first appearance.
    pub fn tasks(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.records {
            if !out.contains(&r.task) {
                out.push(r.task.clone());
            }
        }
        out
    }

    fn stream(&self, task: &str, pick: impl Fn(&MetricsRecord) -> Option<f64>) -> LossStream {
        LossStream {
            points: self.records.iter().filter(|r| r.task == task).filter_map(|r| pick(r).map(|v| (r.step, v))).collect(),
        }
    }

    pub fn train_stream(&self, task: &str) -> LossStream {
        self.stream(task, |r| Some(r.loss_norm))
    }

    pub fn eval_stream(&self, task: &str) -> LossStream {
        self.stream(task, |r| r.eval)
    }

    pub fn nc_stream(&self, task: &str) -> LossStream {
        self.stream(task, |r| r.nc_dist)
    }

    pub fn escape_report(&self, task: &str, modality: Modality, budget: u64) -> EscapeReport {
        escape_report(&self.train_stream(task), &self.eval_stream(task), modality, budget)
    }

    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut *out, r)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("json is utf-8")
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut log = RunLog::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let r: MetricsRecord =
                serde_json::from_str(&line).map_err(|e| LabError::usage(format!("line {}: {e}", i + 1)))?;
            log.push(r);
        }
        Ok(log)
    }
}

/// Labels for a task list; repeated codes get a positional suffix so labels stay unique.
pub fn task_labels(codes: &[String]) -> Vec<String> {
    codes
        .iter()
        .enumerate()
        .map(|(i, c)| if codes.iter().filter(|o| *o == c).count() > 1 { format!("{c}#{i}") } else { c.clone() })
        .collect()
}
