//! Single- versus multi-task feature learning in the two-layer teacher-student model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::nn::FeatureMode;
use crate::train::{train_featurenet, FeatureRun, FeatureTrainConfig};
use crate::xlab::config::{FeatureCell, FeatureLearningConfig};
use crate::xlab::io::write_csv;

pub const FEATURE_CSV: &str = "feature_learning.csv";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub d: usize,
    pub h: usize,
    pub hp: usize,
    pub k: usize,
    pub seed: u64,
    pub single_t_escape: Option<u64>,
    pub multi_t_escape: Option<u64>,
    /// multi / single escape time.
    pub ratio: Option<f64>,
    pub budget: u64,
}

pub fn feature_config(cfg: &FeatureLearningConfig, cell: &FeatureCell, mode: FeatureMode, seed: u64) -> FeatureTrainConfig {
    let mut net = cell.net(mode);
    net.teacher = cfg.teacher;
    if let Some(s) = cfg.init_std {
        net.init_std = s;
    }
    let mut tc = FeatureTrainConfig::new(net, seed);
    if let Some(v) = cfg.steps {
        tc.steps = v;
    }
    if let Some(v) = cfg.lr {
        tc.lr = v;
    }
    if let Some(v) = cfg.batch_size {
        tc.batch_size = v;
    }
    if let Some(v) = cfg.escape_fraction {
        tc.escape_fraction = v;
    }
    tc.stop_after_escape = cfg.stop_after_escape;
    tc
}

/// Runs both modes for every cell and seed. When `out_dir` is given, each run's loss log is
/// written as `fl_<d>_<h>_<hp>_<k>_s<seed>_<mode>.jsonl` next to the comparison table.
pub fn run_feature_learning(cfg: &FeatureLearningConfig, out_dir: Option<&Path>, exec: Exec) -> Result<Vec<FeatureRow>> {
    if cfg.seeds.is_empty() {
        return Err(LabError::config("seeds must be non-empty"));
    }
    let mut jobs = Vec::new();
    for cell in &cfg.cells {
        for &seed in &cfg.seeds {
            for mode in [FeatureMode::Single, FeatureMode::Multi] {
                jobs.push((cell.clone(), seed, mode));
            }
        }
    }
    let runs: Vec<Result<FeatureRun>> = exec.map(jobs.clone(), |(cell, seed, mode)| {
        let run = train_featurenet(&feature_config(cfg, &cell, mode, seed))?;
        if let Some(dir) = out_dir {
            let mode = if mode == FeatureMode::Single { "single" } else { "multi" };
            let name = format!("fl_{}_{}_{}_{}_s{seed}_{mode}.jsonl", cell.d, cell.h, cell.hp, cell.k);
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(name), run.log.to_jsonl())?;
        }
        Ok(run)
    });
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    let rows: Vec<FeatureRow> = jobs
        .chunks(2)
        .zip(runs.chunks(2))
        .map(|(job, pair)| {
            let (cell, seed) = (&job[0].0, job[0].1);
            let (s, m) = (pair[0].t_escape, pair[1].t_escape);
            FeatureRow {
                d: cell.d,
                h: cell.h,
                hp: cell.hp,
                k: cell.k,
                seed,
                single_t_escape: s,
                multi_t_escape: m,
                ratio: s.zip(m).map(|(s, m)| m as f64 / s as f64),
                budget: pair[0].budget,
            }
        })
        .collect();
    if let Some(dir) = out_dir {
        write_csv(&dir.join(FEATURE_CSV), &rows)?;
    }
    Ok(rows)
}
