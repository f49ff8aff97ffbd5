//! Run configuration for in-context training. JSON with unknown fields rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};
use crate::nn::{Profile, TransformerConfig};
use crate::taskgen::MixtureSpec;

pub const DEFAULT_BATCH: usize = 64;
pub const PAPER_N: usize = 120;
pub const TOY_N: usize = 40;
pub const TOY_DIM: usize = 5;
pub const TOY_BUDGET: u64 = 20_000;
pub const PAPER_BUDGET: u64 = 100_000;
pub const PAPER_LR: f64 = 1e-4;
/// The smaller toy model tolerates, and needs, a larger step to reach its plateau quickly.
pub const TOY_LR: f64 = 1e-3;
pub const DEFAULT_EVAL_EVERY: u64 = 100;
pub const DEFAULT_EVAL_BATCH: usize = 1024;
pub const DEFAULT_NORM_SAMPLES: usize = 1_000_000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Normalization {
    /// c_m from the no-context oracle, estimated once per task.
    Auto,
    /// Explicit c_m in mixture order.
    Manual(Vec<f64>),
}

/// Optional early stopping. Without it a run uses its whole step budget.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StopRule {
    /// Stop this many steps after every task has escaped its plateau.
    #[serde(default)]
    pub after_escape: Option<u64>,
    /// Stop once every task has an exit time.
    #[serde(default)]
    pub after_exit: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mixture: MixtureSpec,
    #[serde(default = "default_profile")]
    pub profile: Profile,
    /// Demonstrations per prompt; defaults by profile (paper 120, toy 40).
    #[serde(default)]
    pub n: Option<usize>,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Step budget; defaults by profile (paper 100k, toy 20k).
    #[serde(default)]
    pub steps: Option<u64>,
    /// Adam learning rate; defaults by profile (paper 1e-4, toy 1e-3).
    #[serde(default)]
    pub lr: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
    #[serde(default = "default_normalization")]
    pub normalization: Normalization,
    #[serde(default = "default_norm_samples")]
    pub norm_samples: usize,
    /// Architecture override; required for the custom profile.
    #[serde(default)]
    pub model: Option<TransformerConfig>,
    #[serde(default)]
    pub seed: u64,
    /// Steps at which to write a checkpoint, in addition to escape checkpoints.
    #[serde(default)]
    pub checkpoint_steps: Vec<u64>,
    #[serde(default = "yes")]
    pub checkpoint_at_escape: bool,
    /// Compute the NC-distance probe at every evaluation.
    #[serde(default = "yes")]
    pub nc_probe: bool,
    #[serde(default)]
    pub stop: StopRule,
    /// Record wall-clock milliseconds in the log. Off by default so logs are byte-reproducible.
    #[serde(default)]
    pub log_wall_ms: bool,
}

fn default_profile() -> Profile {
    Profile::Toy
}
fn default_batch() -> usize {
    DEFAULT_BATCH
}
fn default_eval_every() -> u64 {
    DEFAULT_EVAL_EVERY
}
fn default_eval_batch() -> usize {
    DEFAULT_EVAL_BATCH
}
fn default_normalization() -> Normalization {
    Normalization::Auto
}
fn default_norm_samples() -> usize {
    DEFAULT_NORM_SAMPLES
}
fn yes() -> bool {
    true
}

impl TrainConfig {
    pub fn new(mixture: MixtureSpec, profile: Profile) -> Self {
        Self {
            mixture,
            profile,
            n: None,
            batch_size: DEFAULT_BATCH,
            steps: None,
            lr: None,
            eval_every: DEFAULT_EVAL_EVERY,
            eval_batch: DEFAULT_EVAL_BATCH,
            normalization: Normalization::Auto,
            norm_samples: DEFAULT_NORM_SAMPLES,
            model: None,
            seed: 0,
            checkpoint_steps: Vec::new(),
            checkpoint_at_escape: true,
            nc_probe: true,
            stop: StopRule::default(),
            log_wall_ms: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| LabError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn n(&self) -> usize {
        self.n.unwrap_or(match self.profile {
            Profile::Paper => PAPER_N,
            Profile::Toy | Profile::Custom => TOY_N,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps.unwrap_or(match self.profile {
            Profile::Paper => PAPER_BUDGET,
            Profile::Toy | Profile::Custom => TOY_BUDGET,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr.unwrap_or(match self.profile {
            Profile::Paper => PAPER_LR,
            Profile::Toy | Profile::Custom => TOY_LR,
        })
    }

    pub fn dim(&self) -> usize {
        self.mixture.entries.first().map_or(0, |e| e.task.dim)
    }

    pub fn model_config(&self) -> Result<TransformerConfig> {
        let cfg = match &self.model {
            Some(m) => m.clone(),
            None => TransformerConfig::for_profile(self.profile, self.dim(), self.n())?,
        };
        if cfg.input_dim != self.dim() {
            return Err(LabError::config(format!(
                "model input_dim {} does not match task dim {}",
                cfg.input_dim,
                self.dim()
            )));
        }
        if cfg.max_tokens < 2 * self.n() {
            return Err(LabError::config("model max_tokens is shorter than 2n"));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.mixture.validate()?;
        self.mixture.counts(self.batch_size)?;
        if self.n() == 0 {
            return Err(LabError::config("n must be positive"));
        }
        if !(self.lr() > 0.0 && self.lr().is_finite()) {
            return Err(LabError::config("lr must be positive"));
        }
        if self.eval_every == 0 || self.eval_batch == 0 {
            return Err(LabError::config("eval_every and eval_batch must be positive"));
        }
        if let Normalization::Manual(c) = &self.normalization {
            if c.len() != self.mixture.len() || c.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(LabError::config("manual normalization needs one positive constant per task"));
            }
        }
        self.model_config()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> [u8; 32] {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).into()
    }

    pub fn digest_hex(&self) -> String {
        self.digest().iter().map(|b| format!("{b:02x}")).collect()
    }
}
