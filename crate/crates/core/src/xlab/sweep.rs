//! Task-combination sweeps and uneven mixtures.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::metrics::{format_budget, format_kilo};
use crate::taskgen::MixtureSpec;
use crate::xlab::cache::{RunCache, RunInit, RunSummary};
use crate::xlab::config::{SweepConfig, UnevenConfig};
use crate::xlab::io::write_csv;

pub const SWEEP_RUNS_CSV: &str = "sweep_runs.csv";
pub const SWEEP_TABLE_CSV: &str = "sweep_table.csv";
pub const SWEEP_TABLE_TXT: &str = "sweep_table.txt";

/// Every subset of `tasks` with size in `[min, max]`, smallest first, each in task order.
pub fn subsets(tasks: &[String], min: usize, max: usize) -> Vec<Vec<String>> {
    let n = tasks.len();
    let mut out: Vec<Vec<String>> = (1u64..(1 << n))
        .map(|mask| (0..n).filter(|i| mask >> i & 1 == 1).map(|i| tasks[i].clone()).collect::<Vec<_>>())
        .filter(|s| (min..=max).contains(&s.len()))
        .collect();
    let index = |code: &String| tasks.iter().position(|t| t == code).unwrap_or(usize::MAX);
    out.sort_by(|a, b| a.len().cmp(&b.len()).then_with(|| a.iter().map(index).cmp(b.iter().map(index))));
    out
}

/// One task of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    /// Task codes joined with `+`.
    pub subset: String,
    pub size: usize,
    pub task: String,
    pub seed: u64,
    pub t_plateau: Option<u64>,
    pub t_exit: Option<u64>,
    pub budget: u64,
    pub error: Option<String>,
}

/// Mean over the runs of a given subset size that include the task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub task: String,
    pub size: usize,
    pub runs: usize,
    pub escaped: usize,
    /// Mean over the runs that escaped.
    pub mean_t_plateau: Option<f64>,
    pub exited: usize,
    pub mean_t_exit: Option<f64>,
    pub budget: u64,
}

impl AggregateRow {
    /// Table cell like "9.7k (10.7k)"; a partial mean is tagged with how many runs it covers.
    pub fn cell(&self) -> String {
        let tag = |hit: usize| if hit < self.runs { format!(" [{hit}/{}]", self.runs) } else { String::new() };
        match self.mean_t_plateau {
            None => format_budget(self.budget),
            Some(tp) => {
                let exit = match self.mean_t_exit {
                    Some(te) => format!("{}{}", format_kilo(te.round() as u64), tag(self.exited)),
                    None => format_budget(self.budget),
                };
                format!("{}{} ({exit})", format_kilo(tp.round() as u64), tag(self.escaped))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub aggregate: Vec<AggregateRow>,
}

fn mean_of(vals: &[u64]) -> Option<f64> {
    (!vals.is_empty()).then(|| vals.iter().map(|&v| v as f64).sum::<f64>() / vals.len() as f64)
}

/// Groups rows by (task, size) in order of first appearance. Rows carrying an error are skipped.
pub fn aggregate(rows: &[SweepRow]) -> Vec<AggregateRow> {
    let mut order: Vec<(String, usize)> = Vec::new();
    let mut groups: BTreeMap<(String, usize), Vec<&SweepRow>> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.error.is_none()) {
        let key = (r.task.clone(), r.size);
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(r);
    }
    order.sort_by_key(|(task, size)| (rows.iter().position(|r| &r.task == task), *size));
    order
        .into_iter()
        .map(|key| {
            let g = &groups[&key];
            let plateaus: Vec<u64> = g.iter().filter_map(|r| r.t_plateau).collect();
            let exits: Vec<u64> = g.iter().filter_map(|r| r.t_exit).collect();
            AggregateRow {
                task: key.0,
                size: key.1,
                runs: g.len(),
                escaped: plateaus.len(),
                mean_t_plateau: mean_of(&plateaus),
                exited: exits.len(),
                mean_t_exit: mean_of(&exits),
                budget: g.iter().map(|r| r.budget).max().unwrap_or(0),
            }
        })
        .collect()
}

/// Text table: one line per task, one column per subset size.
pub fn render_table(agg: &[AggregateRow]) -> String {
    let mut sizes: Vec<usize> = agg.iter().map(|r| r.size).collect();
    sizes.sort_unstable();
    sizes.dedup();
    let mut tasks: Vec<&str> = Vec::new();
    for r in agg {
        if !tasks.contains(&r.task.as_str()) {
            tasks.push(&r.task);
        }
    }
    let mut out = String::from("task");
    for s in &sizes {
        let _ = write!(out, "\t{s}");
    }
    out.push('\n');
    for t in tasks {
        out.push_str(t);
        for s in &sizes {
            let cell = agg.iter().find(|r| r.task == t && r.size == *s).map_or("-".to_string(), |r| r.cell());
            let _ = write!(out, "\t{cell}");
        }
        out.push('\n');
    }
    out
}

fn summary_rows(subset: &[String], seed: u64, res: &Result<RunSummary>, budget: u64) -> Vec<SweepRow> {
    let name = subset.join("+");
    subset
        .iter()
        .enumerate()
        .map(|(i, task)| {
            let (t_plateau, t_exit, budget, error) = match res {
                Ok(s) => (s.reports[i].t_plateau, s.reports[i].t_exit, s.reports[i].budget, None),
                Err(e) => (None, None, budget, Some(e.to_string())),
            };
            SweepRow { subset: name.clone(), size: subset.len(), task: task.clone(), seed, t_plateau, t_exit, budget, error }
        })
        .collect()
}

/// Trains every subset for every seed (reusing cached runs) and writes the run and
/// aggregate tables into `out_dir`. A failing run is recorded and the sweep continues.
pub fn run_sweep(cfg: &SweepConfig, out_dir: &Path, exec: Exec) -> Result<SweepResult> {
    if cfg.seeds.is_empty() {
        return Err(LabError::config("seeds must be non-empty"));
    }
    let cache = RunCache::new(out_dir);
    let jobs: Vec<(Vec<String>, u64)> = subsets(&cfg.tasks, cfg.min_subset, cfg.max_subset)
        .into_iter()
        .flat_map(|s| cfg.seeds.iter().map(move |&seed| (s.clone(), seed)))
        .collect();
    let budget = cfg.train.build(MixtureSpec::even(vec![cfg.train.task(&cfg.tasks[0])?]), 0).steps();
    let results = exec.map(jobs, |(subset, seed)| {
        let res = cfg.train.even(&subset, seed).and_then(|tc| cache.run(&tc, RunInit::Scratch, false, exec));
        summary_rows(&subset, seed, &res, budget)
    });
    let rows: Vec<SweepRow> = results.into_iter().flatten().collect();
    let agg = aggregate(&rows);
    write_csv(&out_dir.join(SWEEP_RUNS_CSV), &rows)?;
    write_csv(&out_dir.join(SWEEP_TABLE_CSV), &agg)?;
    fs::write(out_dir.join(SWEEP_TABLE_TXT), render_table(&agg))?;
    Ok(SweepResult { rows, aggregate: agg })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnevenRow {
    pub task: String,
    pub weight: f64,
    /// Prompts of this task per batch.
    pub count: usize,
    pub seed: u64,
    pub multi_t_plateau: Option<u64>,
    pub multi_t_exit: Option<u64>,
    pub single_t_plateau: Option<u64>,
    pub single_t_exit: Option<u64>,
    pub budget: u64,
}

pub const UNEVEN_CSV: &str = "uneven.csv";

/// One weighted multi-task run per seed plus a single-task baseline per task.
pub fn run_uneven(cfg: &UnevenConfig, out_dir: &Path, exec: Exec) -> Result<Vec<UnevenRow>> {
    let cache = RunCache::new(out_dir);
    let specs = cfg.tasks.iter().map(|c| cfg.train.task(c)).collect::<Result<Vec<_>>>()?;
    let mix = MixtureSpec::weighted(specs.into_iter().zip(cfg.weights.iter().copied()).collect());
    let mut rows = Vec::new();
    for &seed in &cfg.seeds {
        let multi_cfg = cfg.train.build(mix.clone(), seed);
        multi_cfg.validate()?;
        let counts = mix.counts(multi_cfg.batch_size)?;
        let multi = cache.run(&multi_cfg, RunInit::Scratch, false, exec)?;
        for (m, code) in cfg.tasks.iter().enumerate() {
            let single = cache.run(&cfg.train.even(std::slice::from_ref(code), seed)?, RunInit::Scratch, false, exec)?;
            rows.push(UnevenRow {
                task: code.clone(),
                weight: cfg.weights[m],
                count: counts[m],
                seed,
                multi_t_plateau: multi.reports[m].t_plateau,
                multi_t_exit: multi.reports[m].t_exit,
                single_t_plateau: single.reports[0].t_plateau,
                single_t_exit: single.reports[0].t_exit,
                budget: multi.reports[m].budget,
            });
        }
    }
    write_csv(&out_dir.join(UNEVEN_CSV), &rows)?;
    Ok(rows)
}
