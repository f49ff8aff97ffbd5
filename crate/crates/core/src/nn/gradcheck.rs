//! Central finite-difference checks of the analytic gradients, in 64-bit arithmetic.

use rand::seq::index::sample;

use super::featurenet::{featurenet_loss_grad, FeatureNetParams};
use super::loss::TaskHead;
use super::transformer::{backward, sequence_loss, ModelParams};
use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::rng::LabRng;
use crate::taskgen::PromptSequence;

pub const MIN_CHECKED_COORDS: usize = 200;
pub const EPS_RANGE: (f64, f64) = (1e-6, 1e-3);
/// Coordinates whose gradient is this small relative to the largest checked one are
/// compared in absolute terms. Some gradients vanish exactly (the key bias under softmax
/// shift invariance) and their central differences are pure roundoff.
pub const REL_FLOOR_FRACTION: f64 = 1e-4;
pub const REL_FLOOR_MIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_coord: usize,
    pub coords_checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(EPS_RANGE.0..=EPS_RANGE.1).contains(&eps) {
        return Err(LabError::usage(format!(
            "eps {eps} outside [{:e}, {:e}]",
            EPS_RANGE.0, EPS_RANGE.1
        )));
    }
    Ok(())
}

/// Compares `analytic` against central differences of `loss` on a random coordinate
/// subset (all coordinates when there are at most [`MIN_CHECKED_COORDS`]).
pub fn grad_check_with(
    point: &[f64],
    analytic: &[f64],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    eps: f64,
    rng: &mut LabRng,
) -> Result<GradCheckReport> {
    check_eps(eps)?;
    if point.len() != analytic.len() {
        return Err(LabError::usage("gradient and parameter lengths differ"));
    }
    let n = point.len();
    let coords: Vec<usize> = if n <= MIN_CHECKED_COORDS {
        (0..n).collect()
    } else {
        let mut c = sample(rng, n, MIN_CHECKED_COORDS).into_vec();
        c.sort_unstable();
        c
    };
    let scale = coords.iter().fold(0.0f64, |m, &i| m.max(analytic[i].abs()));
    let floor = (REL_FLOOR_FRACTION * scale).max(REL_FLOOR_MIN);
    let mut work = point.to_vec();
    let mut report = GradCheckReport { max_rel_error: 0.0, worst_coord: 0, coords_checked: coords.len() };
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + eps;
        let up = loss(&work)?;
        work[i] = orig - eps;
        let down = loss(&work)?;
        work[i] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let err = relative_error(analytic[i], numeric, floor);
        if err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst_coord = i;
        }
    }
    Ok(report)
}

/// Transformer gradient check on one batch.
pub fn grad_check(
    params: &ModelParams<f64>,
    prompts: &[PromptSequence],
    heads: &[TaskHead],
    c: &[f64],
    eps: f64,
    rng: &mut LabRng,
) -> Result<GradCheckReport> {
    check_eps(eps)?;
    let (_, analytic) = backward(params, prompts, heads, c, Exec::Serial)?;
    let mut probe = params.clone();
    grad_check_with(
        &params.data,
        &analytic,
        |w| {
            probe.data.copy_from_slice(w);
            Ok(sequence_loss(&probe, prompts, heads, c, Exec::Serial)?.total)
        },
        eps,
        rng,
    )
}

/// Feature-net gradient check on one batch of `rows` inputs.
pub fn grad_check_featurenet(
    params: &FeatureNetParams<f64>,
    xs: &[f64],
    ys: &[f64],
    rows: usize,
    eps: f64,
    rng: &mut LabRng,
) -> Result<GradCheckReport> {
    check_eps(eps)?;
    let (_, g) = featurenet_loss_grad(params, xs, ys, rows)?;
    let mut probe = params.clone();
    grad_check_with(
        &params.flat(),
        &g.flat(),
        |w| {
            probe.set_flat(w);
            Ok(featurenet_loss_grad(&probe, xs, ys, rows)?.0)
        },
        eps,
        rng,
    )
}
