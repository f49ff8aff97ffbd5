//! Run cache: each distinct (configuration, seed, initialization) trains once.
//!
//! A run lives in `<root>/runs/<key>/` with its configuration, metric files, checkpoints and
//! a `summary.json`, which is written last and marks the run complete.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::exec::Exec;
use crate::metrics::EscapeReport;
use crate::train::{load_checkpoint, Checkpoint, RunLog, TrainConfig, TrainState, Trainer};
use crate::xlab::io::{read_jsonl, write_metrics, METRICS_JSONL};

pub const SUMMARY: &str = "summary.json";
pub const FINAL_CHECKPOINT: &str = "final.plab";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub key: String,
    pub labels: Vec<String>,
    pub reports: Vec<EscapeReport>,
    pub c: Vec<f64>,
    pub stopped_at: u64,
    /// (task label, checkpoint file name) for every plateau escape.
    pub escape_checkpoints: Vec<(String, String)>,
    pub final_checkpoint: Option<String>,
}

impl RunSummary {
    pub fn report(&self, label: &str) -> Option<&EscapeReport> {
        self.labels.iter().position(|l| l == label).map(|i| &self.reports[i])
    }
}

/// Where a run starts from.
#[derive(Clone, Copy)]
pub enum RunInit<'a> {
    Scratch,
    /// A transferred state, identified by a key that becomes part of the cache key.
    From(&'a TrainState, &'a str),
}

#[derive(Clone, Debug)]
pub struct RunCache {
    pub root: PathBuf,
}

impl RunCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn key(cfg: &TrainConfig, init: RunInit<'_>) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(cfg).expect("config serializes"));
        if let RunInit::From(_, source) = init {
            h.update(b"|from|");
            h.update(source.as_bytes());
        }
        h.finalize()[..12].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn dir(&self, key: &str) -> PathBuf {
        self.root.join("runs").join(key)
    }

    pub fn lookup(&self, key: &str) -> Result<Option<RunSummary>> {
        let path = self.dir(key).join(SUMMARY);
        if !path.exists() {
            return Ok(None);
        }
        Ok(Some(serde_json::from_slice(&fs::read(path)?)?))
    }

    pub fn log(&self, summary: &RunSummary) -> Result<RunLog> {
        read_jsonl(&self.dir(&summary.key).join(METRICS_JSONL))
    }

    pub fn checkpoint(&self, summary: &RunSummary, file: &str) -> Result<Checkpoint> {
        load_checkpoint(&self.dir(&summary.key).join(file), None)
    }

    /// The state saved when task `label` escaped its plateau.
    pub fn escape_checkpoint(&self, summary: &RunSummary, label: &str) -> Result<Option<Checkpoint>> {
        match summary.escape_checkpoints.iter().find(|(l, _)| l == label) {
            Some((_, file)) => Ok(Some(self.checkpoint(summary, file)?)),
            None => Ok(None),
        }
    }

    /// Returns the cached run, or trains it and stores it.
    pub fn run(&self, cfg: &TrainConfig, init: RunInit<'_>, keep_final: bool, exec: Exec) -> Result<RunSummary> {
        let key = Self::key(cfg, init);
        if let Some(s) = self.lookup(&key)? {
            if !keep_final || s.final_checkpoint.is_some() {
                return Ok(s);
            }
        }
        let dir = self.dir(&key);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join("config.json"), serde_json::to_vec_pretty(cfg)?)?;
        let trainer = match init {
            RunInit::Scratch => Trainer::new(cfg, exec)?,
            RunInit::From(state, _) => Trainer::from_state(cfg, state.clone(), None, exec)?,
        };
        let out = trainer.with_out_dir(&dir).run()?;
        write_metrics(&out.log, &out.labels, &out.reports, &dir)?;
        let final_checkpoint = if keep_final {
            let ck = Checkpoint { state: out.state.clone(), config_digest: out.digest };
            crate::train::save_checkpoint(&ck, &dir.join(FINAL_CHECKPOINT))?;
            Some(FINAL_CHECKPOINT.to_string())
        } else {
            None
        };
        let escape_checkpoints = out
            .checkpoints
            .iter()
            .filter_map(|p| file_name(p))
            .filter_map(|f| {
                let rest = f.strip_prefix("escape_")?;
                let label = &rest[..rest.rfind("_step")?];
                Some((label.to_string(), f.clone()))
            })
            .collect();
        let summary = RunSummary {
            key,
            labels: out.labels,
            reports: out.reports,
            c: out.c,
            stopped_at: out.stopped_at,
            escape_checkpoints,
            final_checkpoint,
        };
        fs::write(dir.join(SUMMARY), serde_json::to_vec_pretty(&summary)?)?;
        Ok(summary)
    }
}

fn file_name(p: &Path) -> Option<String> {
    p.file_name().map(|f| f.to_string_lossy().into_owned())
}
