//! Experiment configuration. JSON, unknown fields rejected.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::nn::{FeatureNetConfig, Profile, TransformerConfig};
use crate::taskgen::{MixtureSpec, Modality, TaskSpec};
use crate::train::config::{
    DEFAULT_BATCH, DEFAULT_EVAL_BATCH, DEFAULT_EVAL_EVERY, DEFAULT_NORM_SAMPLES, TOY_DIM,
};
use crate::train::{Normalization, StopRule, TrainConfig};

pub const PAPER_DIM: usize = 10;
/// The six function classes swept in the task-combination table.
pub const SWEEP_TASKS: [&str; 6] = ["lr", "qr", "slr", "lrelu", "sp2", "sp3"];

/// Training settings shared by every run of an experiment; the mixture and seed vary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainTemplate {
    #[serde(default = "toy")]
    pub profile: Profile,
    /// Input dimension; defaults by profile (toy 5, paper 10).
    #[serde(default)]
    pub dim: Option<usize>,
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "eval_every")]
    pub eval_every: u64,
    #[serde(default = "eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "norm_samples")]
    pub norm_samples: usize,
    #[serde(default)]
    pub model: Option<TransformerConfig>,
    #[serde(default = "yes")]
    pub nc_probe: bool,
    #[serde(default)]
    pub stop: StopRule,
}

fn toy() -> Profile {
    Profile::Toy
}
fn batch() -> usize {
    DEFAULT_BATCH
}
fn eval_every() -> u64 {
    DEFAULT_EVAL_EVERY
}
fn eval_batch() -> usize {
    DEFAULT_EVAL_BATCH
}
fn norm_samples() -> usize {
    DEFAULT_NORM_SAMPLES
}
fn yes() -> bool {
    true
}

impl Default for TrainTemplate {
    fn default() -> Self {
        Self::for_profile(Profile::Toy)
    }
}

impl TrainTemplate {
    pub fn for_profile(profile: Profile) -> Self {
        Self {
            profile,
            dim: None,
            n: None,
            batch_size: DEFAULT_BATCH,
            steps: None,
            lr: None,
            eval_every: DEFAULT_EVAL_EVERY,
            eval_batch: DEFAULT_EVAL_BATCH,
            norm_samples: DEFAULT_NORM_SAMPLES,
            model: None,
            nc_probe: true,
            stop: StopRule::default(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim.unwrap_or(match self.profile {
            Profile::Paper => PAPER_DIM,
            Profile::Toy | Profile::Custom => TOY_DIM,
        })
    }

    pub fn task(&self, code: &str) -> Result<TaskSpec> {
        TaskSpec::from_code(code, self.dim())
    }

    /// Equal-weight mixture over `codes`. The batch becomes `k·round(B/k)` so every task
    /// gets the same whole number of prompts.
    pub fn even(&self, codes: &[String], seed: u64) -> Result<TrainConfig> {
        if codes.is_empty() {
            return Err(LabError::config("a run needs at least one task"));
        }
        let tasks = codes.iter().map(|c| self.task(c)).collect::<Result<Vec<_>>>()?;
        let mut cfg = self.build(MixtureSpec::even(tasks), seed);
        cfg.batch_size = even_batch(self.batch_size, codes.len());
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn build(&self, mixture: MixtureSpec, seed: u64) -> TrainConfig {
        let mut cfg = TrainConfig::new(mixture, self.profile);
        cfg.n = self.n;
        cfg.batch_size = self.batch_size;
        cfg.steps = self.steps;
        cfg.lr = self.lr;
        cfg.eval_every = self.eval_every;
        cfg.eval_batch = self.eval_batch;
        cfg.normalization = Normalization::Auto;
        cfg.norm_samples = self.norm_samples;
        cfg.model = self.model.clone();
        cfg.seed = seed;
        cfg.nc_probe = self.nc_probe;
        cfg.stop = self.stop.clone();
        cfg
    }
}

/// Total batch giving `k` tasks equal whole shares as close to `base / k` as possible.
pub fn even_batch(base: usize, k: usize) -> usize {
    let share = ((base as f64 / k as f64).round() as usize).max(1);
    share * k
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default = "sweep_tasks")]
    pub tasks: Vec<String>,
    #[serde(default = "one")]
    pub min_subset: usize,
    pub max_subset: usize,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainTemplate,
}

fn sweep_tasks() -> Vec<String> {
    SWEEP_TASKS.iter().map(|s| s.to_string()).collect()
}
fn one() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnevenConfig {
    pub tasks: Vec<String>,
    pub weights: Vec<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransferConfig {
    /// Tasks whose escape checkpoints seed the transfer runs (rows of the matrix).
    pub sources: Vec<String>,
    /// Tasks trained from those checkpoints (columns).
    pub targets: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainTemplate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalTransferConfig {
    pub modality: Modality,
    pub seeds: Vec<u64>,
    /// Settings of the retrieval pre-training run; it stops at its exit.
    #[serde(default = "retrieval_pretrain")]
    pub pretrain: TrainTemplate,
    #[serde(default = "retrieval_train")]
    pub train: TrainTemplate,
    /// Defaults to the continuous or boolean members of the six sweep tasks.
    #[serde(default)]
    pub targets: Option<Vec<String>>,
}

/// Boolean Retrieval draws 1024 distinct keys from {±1}^d, so it needs d >= 10.
pub const RETRIEVAL_DIM: usize = 10;

/// Toy settings at the retrieval dimension.
pub fn retrieval_train() -> TrainTemplate {
    TrainTemplate { dim: Some(RETRIEVAL_DIM), ..TrainTemplate::default() }
}

pub fn retrieval_pretrain() -> TrainTemplate {
    let mut t = retrieval_train();
    t.stop.after_exit = true;
    t
}

impl RetrievalTransferConfig {
    pub fn source_code(&self) -> &'static str {
        match self.modality {
            Modality::Continuous => "grt",
            Modality::Boolean => "brt",
        }
    }

    pub fn target_codes(&self) -> Result<Vec<String>> {
        let all: Vec<String> = match &self.targets {
            Some(t) => t.clone(),
            None => sweep_tasks(),
        };
        let dim = self.train.dim();
        let mut out = Vec::new();
        for code in all {
            let spec = TaskSpec::from_code(&code, dim)?;
            if spec.modality() == self.modality {
                out.push(code);
            } else if self.targets.is_some() {
                return Err(LabError::config(format!(
                    "target {code} does not share the {:?} modality of the checkpoint",
                    self.modality
                )));
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureCell {
    pub d: usize,
    pub h: usize,
    pub hp: usize,
    pub k: usize,
}

impl FeatureCell {
    pub fn net(&self, mode: crate::nn::FeatureMode) -> FeatureNetConfig {
        FeatureNetConfig::new(self.d, self.h, self.hp, self.k, mode)
    }
}

/// The eight cells d = 150, h ∈ {10, 20}, h' ∈ {100, 300}, k ∈ {15, 30}.
pub fn feature_grid() -> Vec<FeatureCell> {
    let mut cells = Vec::new();
    for h in [10, 20] {
        for hp in [100, 300] {
            for k in [15, 30] {
                cells.push(FeatureCell { d: 150, h, hp, k });
            }
        }
    }
    cells
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureLearningConfig {
    #[serde(default = "feature_grid")]
    pub cells: Vec<FeatureCell>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub steps: Option<u64>,
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default)]
    pub batch_size: Option<usize>,
    #[serde(default)]
    pub init_std: Option<f64>,
    #[serde(default)]
    pub escape_fraction: Option<f64>,
    /// Stop each run this many steps after its escape.
    #[serde(default)]
    pub stop_after_escape: Option<u64>,
    #[serde(default)]
    pub teacher: crate::nn::TeacherLaw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleRunConfig {
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Experiment {
    Sweep(SweepConfig),
    Uneven(UnevenConfig),
    Transfer(TransferConfig),
    RetrievalTransfer(RetrievalTransferConfig),
    FeatureLearning(FeatureLearningConfig),
    SingleRun(SingleRunConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub out_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| LabError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let seeds = match &self.experiment {
            Experiment::Sweep(c) => {
                if c.min_subset == 0 || c.min_subset > c.max_subset || c.max_subset > c.tasks.len() {
                    return Err(LabError::config("need 1 <= min_subset <= max_subset <= number of tasks"));
                }
                for t in &c.tasks {
                    if !SWEEP_TASKS.contains(&t.as_str()) {
                        return Err(LabError::config(format!("sweep task {t} is not one of {SWEEP_TASKS:?}")));
                    }
                }
                &c.seeds
            }
            Experiment::Uneven(c) => {
                if c.tasks.len() != c.weights.len() {
                    return Err(LabError::config("uneven: one weight per task"));
                }
                &c.seeds
            }
            Experiment::Transfer(c) => &c.seeds,
            Experiment::RetrievalTransfer(c) => &c.seeds,
            Experiment::FeatureLearning(c) => &c.seeds,
            Experiment::SingleRun(c) => return c.config.validate(),
        };
        if seeds.is_empty() {
            return Err(LabError::config("seeds must be non-empty"));
        }
        Ok(())
    }
}
