//! Checkpoint transfer: train task B from the model saved when task A escaped its plateau,
//! and compare the escape time with training B from scratch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::train::{transfer_init, Checkpoint};
use crate::xlab::cache::{RunCache, RunInit, RunSummary};
use crate::xlab::config::{RetrievalTransferConfig, TrainTemplate, TransferConfig};
use crate::xlab::io::write_csv;

pub const TRANSFER_CSV: &str = "transfer.csv";
pub const RETRIEVAL_CSV: &str = "retrieval_transfer.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferCell {
    pub source: String,
    pub target: String,
    pub seed: u64,
    /// Step at which the source checkpoint was taken.
    pub source_step: Option<u64>,
    pub scratch_t_plateau: Option<u64>,
    pub transfer_t_plateau: Option<u64>,
    /// transfer / scratch escape time.
    pub ratio: Option<f64>,
    /// Why the cell has no ratio.
    pub note: Option<String>,
}

fn ratio(transfer: Option<u64>, scratch: Option<u64>) -> (Option<f64>, Option<String>) {
    match (transfer, scratch) {
        (Some(t), Some(s)) => (Some(t as f64 / s as f64), None),
        (None, _) => (None, Some("transfer run did not escape within budget".into())),
        (_, None) => (None, Some("scratch run did not escape within budget".into())),
    }
}

/// Trains `target` from `ck` and returns its cached summary.
pub fn train_from(
    cache: &RunCache,
    train: &TrainTemplate,
    target: &str,
    seed: u64,
    ck: &Checkpoint,
    source_key: &str,
    exec: Exec,
) -> Result<RunSummary> {
    let cfg = train.even(&[target.to_string()], seed)?;
    let state = transfer_init(ck, &cfg)?;
    cache.run(&cfg, RunInit::From(&state, source_key), false, exec)
}

/// The transfer-ratio matrix, one cell per (source, target, seed). Cells whose source
/// never escaped are kept with a note instead of a ratio.
pub fn run_transfer(cfg: &TransferConfig, out_dir: &Path, exec: Exec) -> Result<Vec<TransferCell>> {
    if cfg.seeds.is_empty() {
        return Err(LabError::config("seeds must be non-empty"));
    }
    let cache = RunCache::new(out_dir);
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        for source in &cfg.sources {
            let src = cache.run(&cfg.train.even(std::slice::from_ref(source), seed)?, RunInit::Scratch, false, exec)?;
            let ck = cache.escape_checkpoint(&src, &src.labels[0])?;
            for target in &cfg.targets {
                let scratch =
                    cache.run(&cfg.train.even(std::slice::from_ref(target), seed)?, RunInit::Scratch, false, exec)?;
                let scratch_t = scratch.reports[0].t_plateau;
                let mut cell = TransferCell {
                    source: source.clone(),
                    target: target.clone(),
                    seed,
                    source_step: ck.as_ref().map(|c| c.state.step),
                    scratch_t_plateau: scratch_t,
                    transfer_t_plateau: None,
                    ratio: None,
                    note: None,
                };
                match &ck {
                    None => cell.note = Some("source did not escape within budget; no checkpoint".into()),
                    Some(ck) => {
                        let source_key = format!("{}:{}", src.key, ck.state.step);
                        match train_from(&cache, &cfg.train, target, seed, ck, &source_key, exec) {
                            Ok(run) => {
                                cell.transfer_t_plateau = run.reports[0].t_plateau;
                                (cell.ratio, cell.note) = ratio(cell.transfer_t_plateau, scratch_t);
                            }
                            Err(e) => cell.note = Some(e.to_string()),
                        }
                    }
                }
                cells.push(cell);
            }
        }
    }
    write_csv(&out_dir.join(TRANSFER_CSV), &cells)?;
    Ok(cells)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub task: String,
    pub seed: u64,
    pub source: String,
    /// Exit time of the retrieval pre-training run.
    pub pretrain_t_exit: Option<u64>,
    pub pretrain_steps: u64,
    pub scratch_t_plateau: Option<u64>,
    pub retrieval_t_plateau: Option<u64>,
    pub ratio: Option<f64>,
    pub note: Option<String>,
}

/// Pre-trains on the retrieval task of the chosen modality until its exit, then trains
/// every same-modality task from that checkpoint and from scratch.
pub fn run_retrieval_transfer(cfg: &RetrievalTransferConfig, out_dir: &Path, exec: Exec) -> Result<Vec<RetrievalRow>> {
    if cfg.pretrain.dim() != cfg.train.dim() {
        return Err(LabError::config("pretrain and train must share the input dimension"));
    }
    let cache = RunCache::new(out_dir);
    let source = cfg.source_code().to_string();
    let targets = cfg.target_codes()?;
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let pre = cache.run(&cfg.pretrain.even(std::slice::from_ref(&source), seed)?, RunInit::Scratch, true, exec)?;
        let ck = cache.checkpoint(&pre, pre.final_checkpoint.as_deref().expect("final checkpoint kept"))?;
        let source_key = format!("{}:final", pre.key);
        for task in &targets {
            let scratch = cache.run(&cfg.train.even(std::slice::from_ref(task), seed)?, RunInit::Scratch, false, exec)?;
            let from = train_from(&cache, &cfg.train, task, seed, &ck, &source_key, exec)?;
            let (r, note) = ratio(from.reports[0].t_plateau, scratch.reports[0].t_plateau);
            rows.push(RetrievalRow {
                task: task.clone(),
                seed,
                source: source.clone(),
                pretrain_t_exit: pre.reports[0].t_exit,
                pretrain_steps: pre.stopped_at,
                scratch_t_plateau: scratch.reports[0].t_plateau,
                retrieval_t_plateau: from.reports[0].t_plateau,
                ratio: r,
                note,
            });
        }
    }
    write_csv(&out_dir.join(RETRIEVAL_CSV), &rows)?;
    Ok(rows)
}
