//! Teacher-student training of the two-layer feature network.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::metrics::{first_crossing, Crossing, LossStream, OnlineDetector};
use crate::nn::{featurenet_loss_grad_against, FeatureMode, FeatureNetConfig, FeatureNetParams, Teacher};
use crate::rng::{Purpose, RngState};
use crate::train::adam::{adam_step, AdamConfig, AdamState, ParamGroup};
use crate::train::runlog::{MetricsRecord, RunLog};

pub const FEATURE_LR: f64 = 1e-3;
pub const HEAD_LR_MULT: f64 = 0.1;
pub const FEATURE_BATCH: usize = 512;
pub const FEATURE_BUDGET: u64 = 50_000;
/// Steps whose mean loss defines the plateau level.
pub const REFERENCE_STEPS: (u64, u64) = (200, 400);
pub const DEFAULT_ESCAPE_FRACTION: f64 = 0.8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureTrainConfig {
    pub net: FeatureNetConfig,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_head_mult")]
    pub head_lr_mult: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_budget")]
    pub steps: u64,
    /// Escape fires when the windowed loss drops below this fraction of the reference level.
    #[serde(default = "default_fraction")]
    pub escape_fraction: f64,
    /// Stop this many steps after the escape; `None` trains the full budget.
    #[serde(default)]
    pub stop_after_escape: Option<u64>,
}

fn default_lr() -> f64 {
    FEATURE_LR
}
fn default_head_mult() -> f64 {
    HEAD_LR_MULT
}
fn default_batch() -> usize {
    FEATURE_BATCH
}
fn default_budget() -> u64 {
    FEATURE_BUDGET
}
fn default_fraction() -> f64 {
    DEFAULT_ESCAPE_FRACTION
}

impl FeatureTrainConfig {
    pub fn new(net: FeatureNetConfig, seed: u64) -> Self {
        Self {
            net,
            seed,
            lr: FEATURE_LR,
            head_lr_mult: HEAD_LR_MULT,
            batch_size: FEATURE_BATCH,
            steps: FEATURE_BUDGET,
            escape_fraction: DEFAULT_ESCAPE_FRACTION,
            stop_after_escape: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) || !(self.head_lr_mult > 0.0) {
            return Err(LabError::config("feature-net learning rates must be positive"));
        }
        if self.batch_size == 0 {
            return Err(LabError::config("batch_size must be positive"));
        }
        if !(self.escape_fraction > 0.0 && self.escape_fraction < 1.0) {
            return Err(LabError::config("escape_fraction must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn label(&self) -> String {
        let mode = match self.net.mode {
            FeatureMode::Single => "single",
            FeatureMode::Multi => "multi",
        };
        format!("fl-{mode}")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRun {
    pub log: RunLog,
    /// Mean loss over the reference steps, if the run got that far.
    pub reference: Option<f64>,
    pub t_escape: Option<u64>,
    pub params: FeatureNetParams<f64>,
    pub budget: u64,
}

impl FeatureRun {
    pub fn loss_stream(&self) -> LossStream {
        LossStream { points: self.log.records.iter().map(|r| (r.step, r.loss_norm)).collect() }
    }
}

/// Mean of the points with step in `[lo, hi]`.
fn mean_between(points: &[(u64, f64)], lo: u64, hi: u64) -> Option<f64> {
    let vals: Vec<f64> = points.iter().filter(|(s, _)| (lo..=hi).contains(s)).map(|p| p.1).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Escape time of a feature-net loss stream: the usual windowed crossing, against
/// `fraction ×` the mean loss over the reference steps.
pub fn feature_escape_time(stream: &LossStream, fraction: f64, budget: u64) -> Option<u64> {
    let reference = mean_between(&stream.points, REFERENCE_STEPS.0, REFERENCE_STEPS.1)?;
    first_crossing(stream, fraction * reference, Crossing::Below, budget)
}

/// Trains the student on fresh Gaussian batches. The logged `loss_norm` is the summed
/// loss against the teacher's noise-free output, unnormalized: the label noise of a
/// resampled teacher is irreducible and would only add a constant floor.
pub fn train_featurenet(cfg: &FeatureTrainConfig) -> Result<FeatureRun> {
    cfg.validate()?;
    let root = RngState::from_seed(cfg.seed);
    let teacher = Teacher::sample(&cfg.net, root)?;
    let mut params = FeatureNetParams::<f64>::init(&cfg.net, root)?;
    let nw = params.w.len();
    let groups = vec![
        ParamGroup { range: 0..nw, lr_mult: 1.0 },
        ParamGroup { range: nw..params.len(), lr_mult: cfg.head_lr_mult },
    ];
    let mut adam = AdamState::with_groups(AdamConfig::with_lr(cfg.lr), params.len(), groups);
    let mut flat = params.flat();
    let (rows, d) = (cfg.batch_size, cfg.net.d);
    let label = cfg.label();
    let mut log = RunLog::new();
    let mut points: Vec<(u64, f64)> = Vec::new();
    let mut detector: Option<OnlineDetector> = None;
    let mut reference = None;
    let mut t_escape = None;
    let mut xs = vec![0.0; rows * d];

    for t in 1..=cfg.steps {
        let mut rng = root.for_purpose(Purpose::FeatureBatch, t, 0).rng();
        xs.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let (ys, clean) = teacher.sample_labels(&xs, rows, &mut rng);
        let (_, loss, grads) = featurenet_loss_grad_against(&params, &xs, &ys, &clean, rows)?;
        if !loss.is_finite() {
            return Err(LabError::numeric(format!("feature net step {t}"), "non-finite loss"));
        }
        adam_step(&mut flat, &grads.flat(), &mut adam)?;
        params.set_flat(&flat);
        log.push(MetricsRecord { step: t, task: label.clone(), loss_norm: loss, eval: None, nc_dist: None, wall_ms: None });
        points.push((t, loss));

        if t == REFERENCE_STEPS.1 {
            let r = mean_between(&points, REFERENCE_STEPS.0, REFERENCE_STEPS.1).expect("reference steps logged");
            reference = Some(r);
            // Replaying the history makes the online answer equal the offline one.
            let mut det = OnlineDetector::new(cfg.escape_fraction * r, Crossing::Below);
            for &(s, v) in &points {
                if let Some(fired) = det.push(s, v) {
                    t_escape.get_or_insert(fired);
                }
            }
            detector = Some(det);
        } else if let Some(det) = detector.as_mut() {
            if let Some(fired) = det.push(t, loss) {
                t_escape.get_or_insert(fired);
            }
        }
        if let (Some(te), Some(margin)) = (t_escape, cfg.stop_after_escape) {
            if t >= te + margin {
                break;
            }
        }
    }
    Ok(FeatureRun { log, reference, t_escape, params, budget: cfg.steps })
}
