//! The in-context training loop: batch → loss → backward → Adam, with periodic evaluation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, OnceLock};
use std::time::Instant;

use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::metrics::{last_position_metric, EscapeReport, OnlineDetector};
use crate::nn::{backward, predict_batch, ModelParams, TaskHead, TransformerConfig};
use crate::oracle::{closed_form_oracle, mc_oracle, nc_distance, normalization_constant_with, NoContextOracle};
use crate::rng::{Purpose, RngState};
use crate::taskgen::{MixtureSampler, TaskSpec};
use crate::train::adam::{adam_step, AdamConfig, AdamState};
use crate::train::checkpoint::{save_checkpoint, Checkpoint, TrainState};
use crate::train::config::{Normalization, TrainConfig};
use crate::train::runlog::{task_labels, MetricsRecord, RunLog};

/// Seed of the streams behind normalization constants and NC oracles. These are properties
/// of a task, not of a run, so every run shares them.
pub const ORACLE_SEED: u64 = 0x0C0F_FEE5;

/// Monte-Carlo draws behind the probe oracle of tasks without a closed form. The probe is
/// evaluated on every held-out prompt at every evaluation, so it trades precision for speed.
pub const PROBE_MC_SAMPLES: usize = 4096;

fn probe_oracle(spec: &TaskSpec) -> Result<NoContextOracle> {
    match closed_form_oracle(spec) {
        Err(LabError::Unsupported(_)) => {
            let st = RngState::new(ORACLE_SEED, 1).for_purpose(Purpose::Oracle, task_stream_tag(spec), 1);
            mc_oracle(spec, PROBE_MC_SAMPLES, st)
        }
        other => other,
    }
}

fn norm_cache() -> &'static Mutex<HashMap<String, f64>> {
    static CACHE: OnceLock<Mutex<HashMap<String, f64>>> = OnceLock::new();
    CACHE.get_or_init(|| Mutex::new(HashMap::new()))
}

/// c_m for one task with `samples` Monte-Carlo draws, memoized per process.
pub fn task_normalization(spec: &TaskSpec, samples: usize, exec: Exec) -> Result<f64> {
    let key = format!("{}|{samples}", serde_json::to_string(spec)?);
    if let Some(&c) = norm_cache().lock().expect("cache lock").get(&key) {
        return Ok(c);
    }
    let state = RngState::new(ORACLE_SEED, 0).for_purpose(Purpose::Oracle, task_stream_tag(spec), 0);
    let c = normalization_constant_with(spec, samples, state, exec)?.c;
    norm_cache().lock().expect("cache lock").insert(key, c);
    Ok(c)
}

fn task_stream_tag(spec: &TaskSpec) -> u64 {
    // Stable per-task tag derived from the serialized spec.
    let json = serde_json::to_vec(spec).expect("spec serializes");
    json.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| (h ^ b as u64).wrapping_mul(0x100_0000_01b3))
}

pub fn resolve_normalization(cfg: &TrainConfig, exec: Exec) -> Result<Vec<f64>> {
    match &cfg.normalization {
        Normalization::Manual(c) => Ok(c.clone()),
        Normalization::Auto => cfg.mixture.tasks().map(|t| task_normalization(t, cfg.norm_samples, exec)).collect(),
    }
}

/// Fresh training state: initialized model, zero Adam moments, step 0.
pub fn initial_state(cfg: &TrainConfig) -> Result<TrainState> {
    let model = cfg.model_config()?;
    let root = RngState::from_seed(cfg.seed);
    let params = ModelParams::<f32>::init(&model, &mut root.for_purpose(Purpose::Init, 0, 0).rng())?;
    let adam = AdamState::new(AdamConfig::with_lr(cfg.lr()), params.len());
    Ok(TrainState { step: 0, params, adam, rng: root, log_offset: 0 })
}

/// Starts task B from a checkpoint: parameters copied, Adam reset, RNG reseeded from `new_cfg`.
pub fn transfer_init(ck: &Checkpoint, new_cfg: &TrainConfig) -> Result<TrainState> {
    let want: TransformerConfig = new_cfg.model_config()?;
    let have = &ck.state.params.config;
    if have.layers != want.layers
        || have.embed != want.embed
        || have.heads != want.heads
        || have.input_dim != want.input_dim
    {
        return Err(LabError::config(format!(
            "checkpoint architecture {}x{}x{} (d={}) does not match {}x{}x{} (d={})",
            have.layers, have.embed, have.heads, have.input_dim, want.layers, want.embed, want.heads, want.input_dim
        )));
    }
    let mut params = ck.state.params.clone();
    params.config.max_tokens = want.max_tokens;
    let adam = AdamState::new(AdamConfig::with_lr(new_cfg.lr()), params.len());
    Ok(TrainState { step: 0, params, adam, rng: RngState::from_seed(new_cfg.seed), log_offset: 0 })
}

struct TaskRuntime {
    spec: TaskSpec,
    label: String,
    oracle: Option<NoContextOracle>,
    escape: OnlineDetector,
    exit: OnlineDetector,
}

/// A training run that can be advanced step by step, checkpointed and resumed.
pub struct Trainer {
    cfg: TrainConfig,
    exec: Exec,
    sampler: MixtureSampler,
    heads: Vec<TaskHead>,
    c: Vec<f64>,
    tasks: Vec<TaskRuntime>,
    state: TrainState,
    log: RunLog,
    digest: [u8; 32],
    out_dir: Option<PathBuf>,
    started: Instant,
    checkpoints: Vec<PathBuf>,
    escape_states: Vec<(usize, TrainState)>,
}

/// Result of a finished run.
pub struct RunOutcome {
    pub log: RunLog,
    pub state: TrainState,
    pub c: Vec<f64>,
    pub labels: Vec<String>,
    pub reports: Vec<EscapeReport>,
    pub checkpoints: Vec<PathBuf>,
    /// Model state at the step each task (by index) first escaped its plateau.
    pub escape_states: Vec<(usize, TrainState)>,
    pub stopped_at: u64,
    pub digest: [u8; 32],
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        Self::from_state(cfg, initial_state(cfg)?, None, exec)
    }

    /// Continues from `state`. Passing the log written so far keeps the online detectors
    /// (and hence escape checkpoints and stop rules) identical to an uninterrupted run.
    pub fn from_state(cfg: &TrainConfig, state: TrainState, prior: Option<&RunLog>, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        let sampler = MixtureSampler::new(&cfg.mixture, RngState::from_seed(cfg.seed))?;
        let heads: Vec<TaskHead> = cfg.mixture.tasks().map(TaskHead::for_task).collect();
        let c = resolve_normalization(cfg, exec)?;
        let codes: Vec<String> = cfg.mixture.tasks().map(|t| t.code()).collect();
        let labels = task_labels(&codes);
        let mut tasks = Vec::new();
        for (m, spec) in cfg.mixture.tasks().enumerate() {
            let oracle = if cfg.nc_probe { Some(probe_oracle(spec)?) } else { None };
            tasks.push(TaskRuntime {
                spec: spec.clone(),
                label: labels[m].clone(),
                oracle,
                escape: OnlineDetector::plateau(),
                exit: OnlineDetector::exit(spec.modality()),
            });
        }
        let mut log = RunLog::new();
        if let Some(prior) = prior {
            for r in &prior.records {
                if r.step > state.step {
                    break;
                }
                if let Some(t) = tasks.iter_mut().find(|t| t.label == r.task) {
                    t.escape.push(r.step, r.loss_norm);
                    if let Some(e) = r.eval {
                        t.exit.push(r.step, e);
                    }
                }
                log.push(r.clone());
            }
        }
        Ok(Trainer {
            cfg: cfg.clone(),
            exec,
            sampler,
            heads,
            c,
            tasks,
            state,
            log,
            digest: cfg.digest(),
            out_dir: None,
            started: Instant::now(),
            checkpoints: Vec::new(),
            escape_states: Vec::new(),
        })
    }

    /// Directory for step and escape checkpoints.
    pub fn with_out_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn log(&self) -> &RunLog {
        &self.log
    }

    pub fn normalization(&self) -> &[f64] {
        &self.c
    }

    pub fn labels(&self) -> Vec<String> {
        self.tasks.iter().map(|t| t.label.clone()).collect()
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut state = self.state.clone();
        state.log_offset = self.log.len() as u64;
        Checkpoint { state, config_digest: self.digest }
    }

    pub fn save(&mut self, path: &Path) -> Result<()> {
        save_checkpoint(&self.checkpoint(), path)?;
        self.checkpoints.push(path.to_path_buf());
        Ok(())
    }

    fn budget(&self) -> u64 {
        self.cfg.steps()
    }

    /// One optimizer step. Returns the task indices that escaped their plateau at this step.
    pub fn step(&mut self) -> Result<Vec<usize>> {
        let t = self.state.step + 1;
        let root = RngState::from_seed(self.cfg.seed);
        let batch = self.sampler.batch(self.cfg.batch_size, self.cfg.n(), root.for_purpose(Purpose::TrainBatch, t, 0))?;
        let (report, grad) = backward(&self.state.params, &batch.prompts, &self.heads, &self.c, self.exec)?;
        adam_step(&mut self.state.params.data, &grad, &mut self.state.adam)?;
        self.state.step = t;

        let evals = if t % self.cfg.eval_every == 0 { Some(self.evaluate(t)?) } else { None };
        let wall_ms = self.cfg.log_wall_ms.then(|| self.started.elapsed().as_millis() as u64);
        let normalized = report.normalized(&self.c);
        let mut escaped = Vec::new();
        for (m, task) in self.tasks.iter_mut().enumerate() {
            let (eval, nc_dist) = evals.as_ref().map_or((None, None), |e: &Vec<(f64, Option<f64>)>| (Some(e[m].0), e[m].1));
            self.log.push(MetricsRecord { step: t, task: task.label.clone(), loss_norm: normalized[m], eval, nc_dist, wall_ms });
            if task.escape.push(t, normalized[m]).is_some() {
                escaped.push(m);
            }
            if let Some(e) = eval {
                task.exit.push(t, e);
            }
        }
        for &m in &escaped {
            self.escape_states.push((m, self.state.clone()));
            if self.cfg.checkpoint_at_escape {
                if let Some(dir) = self.out_dir.clone() {
                    self.save(&dir.join(format!("escape_{}_step{t}.plab", self.tasks[m].label)))?;
                }
            }
        }
        if self.cfg.checkpoint_steps.contains(&t) {
            if let Some(dir) = self.out_dir.clone() {
                self.save(&dir.join(format!("step{t}.plab")))?;
            }
        }
        Ok(escaped)
    }

    /// Last-position metric and NC-distance per task on fresh held-out prompts.
    fn evaluate(&self, t: u64) -> Result<Vec<(f64, Option<f64>)>> {
        let root = RngState::from_seed(self.cfg.seed);
        let mut out = Vec::with_capacity(self.tasks.len());
        for (m, task) in self.tasks.iter().enumerate() {
            let prompts = self.sampler.task_batch(
                m,
                self.cfg.eval_batch,
                self.cfg.n(),
                root.for_purpose(Purpose::EvalBatch, t, m as u64),
            )?;
            let preds = predict_batch(&self.state.params, &prompts, self.exec)?;
            let last: Vec<f64> = preds.iter().map(|p| *p.last().expect("n >= 1")).collect();
            let targets: Vec<f64> = prompts.iter().map(|p| p.last_y()).collect();
            let metric = last_position_metric(&last, &targets, task.spec.modality())?;
            let nc = match &task.oracle {
                Some(o) => {
                    let xs: Vec<&[f64]> = prompts.iter().map(|p| p.last_x()).collect();
                    Some(nc_distance(&last, o, &xs)?)
                }
                None => None,
            };
            out.push((metric, nc));
        }
        Ok(out)
    }

    fn should_stop(&self) -> bool {
        let t = self.state.step;
        let rule = &self.cfg.stop;
        if let Some(margin) = rule.after_escape {
            let all: Option<Vec<u64>> = self.tasks.iter().map(|k| k.escape.fired_at).collect();
            if let Some(times) = all {
                if t >= times.into_iter().max().unwrap_or(0) + margin {
                    return true;
                }
            }
        }
        rule.after_exit && self.tasks.iter().all(|k| k.exit.fired_at.is_some())
    }

    /// Runs to the budget (or an earlier stop rule) and assembles the outcome.
    pub fn run(mut self) -> Result<RunOutcome> {
        if self.budget() == 0 && self.state.step == 0 {
            if let Some(dir) = self.out_dir.clone() {
                self.save(&dir.join("step0.plab"))?;
            }
        }
        self.run_until(self.budget())?;
        Ok(self.finish())
    }

    /// Advances until `step` is reached, the budget is exhausted, or a stop rule fires.
    pub fn run_until(&mut self, step: u64) -> Result<()> {
        let limit = step.min(self.budget());
        while self.state.step < limit && !self.should_stop() {
            self.step()?;
        }
        Ok(())
    }

    pub fn finish(self) -> RunOutcome {
        let budget = self.budget();
        let reports = self
            .tasks
            .iter()
            .map(|t| self.log.escape_report(&t.label, t.spec.modality(), budget))
            .collect();
        let mut state = self.state;
        state.log_offset = self.log.len() as u64;
        RunOutcome {
            labels: self.tasks.iter().map(|t| t.label.clone()).collect(),
            stopped_at: state.step,
            log: self.log,
            state,
            c: self.c,
            reports,
            checkpoints: self.checkpoints,
            escape_states: self.escape_states,
            digest: self.digest,
        }
    }
}

/// Trains from scratch and returns the run's log and reports.
pub fn train_icl(cfg: &TrainConfig) -> Result<RunOutcome> {
    Trainer::new(cfg, Exec::default())?.run()
}
