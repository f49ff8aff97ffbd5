//! Plateau-escape and exit times, last-position test metrics, and their Table-style report.
//!
//! A detector scans a stream of `(step, value)` points. At each point it takes the mean of
//! the last [`WINDOW`] values ending there, and fires at the first point whose step exceeds
//! [`MIN_STEP`] and whose mean clears a strict threshold. For a stream logged at every step
//! from 1 this is `min { t > 100 : (1/100) Σ_{t'=t−99}^{t} v(t') < θ }`. For a stream
//! logged every 100 steps the window spans the last 100 logged points.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::nn::{predict_batch, ModelParams, Real};
use crate::oracle::sign_label;
use crate::taskgen::{Modality, PromptSequence};

pub const WINDOW: usize = 100;
pub const MIN_STEP: u64 = 100;
pub const PLATEAU_THRESHOLD: f64 = 0.8;
pub const ERROR_THRESHOLD: f64 = 0.2;
pub const ACCURACY_THRESHOLD: f64 = 0.95;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossStream {
    pub points: Vec<(u64, f64)>,
}

impl LossStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Self {
        Self { points: values.into_iter().enumerate().map(|(i, v)| (i as u64 + 1, v)).collect() }
    }

    pub fn push(&mut self, step: u64, value: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if step <= last {
                return Err(LabError::usage(format!("stream steps must increase: {step} after {last}")));
            }
        }
        self.points.push((step, value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.points.iter().map(|p| p.1)
    }
}

/// Mean of `window` consecutive values ending at the point with index `end` (inclusive).
/// The sum is compensated (Neumaier), so a window of identical values `v` averages to
/// exactly `v` and sits on, not across, a threshold equal to `v`.
fn mean_ending_at(points: &[(u64, f64)], end: usize, window: usize) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &(_, v) in &points[end + 1 - window..=end] {
        let t = sum + v;
        comp += if sum.abs() >= v.abs() { (sum - t) + v } else { (v - t) + sum };
        sum = t;
    }
    (sum + comp) / window as f64
}

/// Mean of the last `window` values ending at step `t`.
pub fn windowed_mean(stream: &LossStream, t: u64, window: usize) -> Result<f64> {
    if window == 0 {
        return Err(LabError::usage("window must be positive"));
    }
    let end = stream
        .points
        .binary_search_by_key(&t, |p| p.0)
        .map_err(|_| LabError::usage(format!("step {t} is not in the stream")))?;
    if end + 1 < window {
        return Err(LabError::usage(format!(
            "step {t} has only {} values, window needs {window}",
            end + 1
        )));
    }
    Ok(mean_ending_at(&stream.points, end, window))
}

/// Which side of the threshold counts as a crossing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Crossing {
    Below,
    Above,
}

impl Crossing {
    fn clears(self, mean: f64, threshold: f64) -> bool {
        match self {
            Crossing::Below => mean < threshold,
            Crossing::Above => mean > threshold,
        }
    }
}

/// First admissible step at or below `budget` whose windowed mean clears `threshold`.
pub fn first_crossing(stream: &LossStream, threshold: f64, dir: Crossing, budget: u64) -> Option<u64> {
    let pts = &stream.points;
    (WINDOW - 1..pts.len())
        .take_while(|&i| pts[i].0 <= budget)
        .find(|&i| pts[i].0 > MIN_STEP && dir.clears(mean_ending_at(pts, i, WINDOW), threshold))
        .map(|i| pts[i].0)
}

pub fn plateau_escape_time(stream: &LossStream, budget: u64) -> Option<u64> {
    first_crossing(stream, PLATEAU_THRESHOLD, Crossing::Below, budget)
}

/// Error below 0.2 (continuous) or accuracy above 0.95 (boolean).
pub fn exit_time(stream: &LossStream, modality: Modality, budget: u64) -> Option<u64> {
    match modality {
        Modality::Continuous => first_crossing(stream, ERROR_THRESHOLD, Crossing::Below, budget),
        Modality::Boolean => first_crossing(stream, ACCURACY_THRESHOLD, Crossing::Above, budget),
    }
}

/// Streaming version of [`first_crossing`]; gives identical answers point by point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnlineDetector {
    pub threshold: f64,
    pub dir: Crossing,
    recent: Vec<(u64, f64)>,
    pub fired_at: Option<u64>,
}

impl OnlineDetector {
    pub fn new(threshold: f64, dir: Crossing) -> Self {
        Self { threshold, dir, recent: Vec::with_capacity(2 * WINDOW), fired_at: None }
    }

    pub fn plateau() -> Self {
        Self::new(PLATEAU_THRESHOLD, Crossing::Below)
    }

    pub fn exit(modality: Modality) -> Self {
        match modality {
            Modality::Continuous => Self::new(ERROR_THRESHOLD, Crossing::Below),
            Modality::Boolean => Self::new(ACCURACY_THRESHOLD, Crossing::Above),
        }
    }

    /// Feeds one point; returns `Some(step)` exactly once, when the detector first fires.
    pub fn push(&mut self, step: u64, value: f64) -> Option<u64> {
        if self.fired_at.is_some() {
            return None;
        }
        self.recent.push((step, value));
        if self.recent.len() > WINDOW {
            self.recent.remove(0);
        }
        if self.recent.len() == WINDOW && step > MIN_STEP {
            let mean = mean_ending_at(&self.recent, WINDOW - 1, WINDOW);
            if self.dir.clears(mean, self.threshold) {
                self.fired_at = Some(step);
                return Some(step);
            }
        }
        None
    }
}

/// Last-position test metric: mean squared error (continuous) or sign accuracy (boolean).
pub fn last_position_metric(predictions: &[f64], targets: &[f64], modality: Modality) -> Result<f64> {
    if predictions.len() != targets.len() || predictions.is_empty() {
        return Err(LabError::usage("predictions and targets must be non-empty and aligned"));
    }
    let total: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(&p, &y)| match modality {
            Modality::Continuous => (p - y) * (p - y),
            Modality::Boolean => f64::from(u8::from(sign_label(p) == y)),
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

/// Runs the model on an evaluation batch and scores only the final x-token of each prompt.
pub fn evaluate_last_position<T: Real>(
    params: &ModelParams<T>,
    modality: Modality,
    eval_batch: &[PromptSequence],
    exec: Exec,
) -> Result<f64> {
    let preds = predict_batch(params, eval_batch, exec)?;
    let last: Vec<f64> = preds.iter().map(|p| *p.last().expect("n >= 1")).collect();
    let targets: Vec<f64> = eval_batch.iter().map(|p| p.last_y()).collect();
    last_position_metric(&last, &targets, modality)
}

/// Escape and exit times for one task of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EscapeReport {
    pub t_plateau: Option<u64>,
    pub t_exit: Option<u64>,
    pub budget: u64,
    pub escaped: bool,
}

pub fn escape_report(train: &LossStream, eval: &LossStream, modality: Modality, budget: u64) -> EscapeReport {
    let t_plateau = plateau_escape_time(train, budget);
    EscapeReport { t_plateau, t_exit: exit_time(eval, modality, budget), budget, escaped: t_plateau.is_some() }
}

/// Steps in thousands with one decimal: 221 → "0.2k".
pub fn format_kilo(steps: u64) -> String {
    format!("{:.1}k", steps as f64 / 1000.0)
}

/// Budget in thousands, without a decimal when it is a whole number: 20000 → "20k".
pub fn format_budget(budget: u64) -> String {
    if budget % 1000 == 0 {
        format!(">{}k", budget / 1000)
    } else {
        format!(">{}", format_kilo(budget))
    }
}

impl fmt::Display for EscapeReport {
    /// "escape (exit)" like "0.2k (0.4k)"; a missing time prints as ">budget".
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.t_plateau {
            None => write!(f, "{}", format_budget(self.budget)),
            Some(tp) => {
                let exit = self.t_exit.map(format_kilo).unwrap_or_else(|| format_budget(self.budget));
                write!(f, "{} ({exit})", format_kilo(tp))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn step_stream(hi: f64, lo: f64, switch: u64, len: u64) -> LossStream {
        LossStream::from_values((1..=len).map(|t| if t <= switch { hi } else { lo }))
    }

    #[test]
    fn windowed_mean_examples() {
        let c = LossStream::from_values(std::iter::repeat_n(0.7, 300));
        assert!((windowed_mean(&c, 250, 100).unwrap() - 0.7).abs() < 1e-12);
        let alt = LossStream::from_values((0..200).map(|i| if i % 2 == 0 { 0.0 } else { 2.0 }));
        assert_eq!(windowed_mean(&alt, 150, 100).unwrap(), 1.0);
        let spike = LossStream::from_values((1..=200).map(|t| if t == 150 { 100.0 } else { 0.0 }));
        assert_eq!(windowed_mean(&spike, 180, 100).unwrap(), 1.0);
        assert!(matches!(windowed_mean(&c, 99, 100), Err(LabError::Usage(_))));
    }

    #[test]
    fn detector_examples() {
        assert_eq!(plateau_escape_time(&LossStream::from_values(std::iter::repeat_n(1.0, 2000)), 2000), None);
        assert_eq!(plateau_escape_time(&step_stream(1.0, 0.0, 200, 1000), 1000), Some(221));
        assert_eq!(plateau_escape_time(&step_stream(0.0, 0.0, 0, 500), 500), Some(101));
        assert_eq!(exit_time(&step_stream(1.0, 0.0, 300, 1000), Modality::Continuous, 1000), Some(381));
        let acc = |v: f64| LossStream::from_values(std::iter::repeat_n(v, 500));
        assert_eq!(exit_time(&acc(0.99), Modality::Boolean, 500), Some(101));
        assert_eq!(exit_time(&acc(0.9), Modality::Boolean, 500), None);
        assert!(!Crossing::Below.clears(0.8, 0.8));
        assert!(!Crossing::Above.clears(0.95, 0.95));
    }

    #[test]
    fn budget_caps_detection() {
        let s = step_stream(1.0, 0.0, 200, 1000);
        assert_eq!(plateau_escape_time(&s, 220), None);
        assert_eq!(plateau_escape_time(&s, 221), Some(221));
    }

    #[test]
    fn online_matches_offline() {
        let s = step_stream(1.0, 0.0, 200, 1000);
        let mut d = OnlineDetector::plateau();
        let fired: Vec<u64> = s.points.iter().filter_map(|&(t, v)| d.push(t, v)).collect();
        assert_eq!(fired, vec![221]);
    }

    #[test]
    fn report_formatting() {
        let r = EscapeReport { t_plateau: Some(221), t_exit: Some(381), budget: 20_000, escaped: true };
        assert_eq!(r.to_string(), "0.2k (0.4k)");
        let never = EscapeReport { t_plateau: None, t_exit: None, budget: 1_000_000, escaped: false };
        assert_eq!(never.to_string(), ">1000k");
        let half = EscapeReport { t_plateau: Some(35_600), t_exit: None, budget: 50_000, escaped: true };
        assert_eq!(half.to_string(), "35.6k (>50k)");

        let train = step_stream(1.0, 0.0, 200, 1000);
        let eval = step_stream(1.0, 0.0, 300, 1000);
        let rep = escape_report(&train, &eval, Modality::Continuous, 1000);
        assert_eq!((rep.t_plateau, rep.t_exit, rep.escaped), (Some(221), Some(381), true));
        assert_eq!(rep.to_string(), "0.2k (0.4k)");
    }

    #[test]
    fn boolean_metric_uses_sign_zero_positive() {
        let m = last_position_metric(&[0.0, -0.1, 2.0], &[1.0, 1.0, -1.0], Modality::Boolean).unwrap();
        assert!((m - 1.0 / 3.0).abs() < 1e-15);
    }
}
