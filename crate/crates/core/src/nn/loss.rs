//! Pointwise losses and the per-task loss head.

use crate::taskgen::{Modality, TaskSpec};

pub fn loss_mse(pred: f64, target: f64) -> f64 {
    (pred - target) * (pred - target)
}

/// ln(1 + exp(−y·z)) for a ±1 target, stable for large |z|.
pub fn loss_logistic(logit: f64, target: f64) -> f64 {
    softplus(-(target * logit))
}

/// ln(1 + eᵐ) without overflow.
pub fn softplus(m: f64) -> f64 {
    if m > 0.0 {
        m + (-m).exp().ln_1p()
    } else {
        m.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossKind {
    Mse,
    Logistic,
}

impl LossKind {
    pub fn for_modality(m: Modality) -> Self {
        match m {
            Modality::Continuous => LossKind::Mse,
            Modality::Boolean => LossKind::Logistic,
        }
    }

    pub fn value(self, pred: f64, target: f64) -> f64 {
        match self {
            LossKind::Mse => loss_mse(pred, target),
            LossKind::Logistic => loss_logistic(pred, target),
        }
    }

    /// Loss and its derivative with respect to the prediction.
    pub fn value_and_grad(self, pred: f64, target: f64) -> (f64, f64) {
        match self {
            LossKind::Mse => (loss_mse(pred, target), 2.0 * (pred - target)),
            LossKind::Logistic => {
                let m = -(target * pred);
                (softplus(m), -target * sigmoid(m))
            }
        }
    }
}

/// How one task's predictions enter the training loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TaskHead {
    pub loss: LossKind,
    /// Retrieval prompts are scored only at the query; every other task uses all n prefixes.
    pub last_only: bool,
}

impl TaskHead {
    pub fn for_task(spec: &TaskSpec) -> Self {
        TaskHead { loss: LossKind::for_modality(spec.modality()), last_only: spec.kind.is_retrieval() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        assert_eq!(loss_mse(0.0, 2.0), 4.0);
        assert_eq!(loss_mse(1.5, 1.5), 0.0);
        assert_eq!(loss_mse(-1.0, 1.0), 4.0);
        assert!((loss_logistic(0.0, 1.0) - std::f64::consts::LN_2).abs() < 1e-15);
        let sat = loss_logistic(20.0, 1.0);
        assert!((sat - 2.061_153_6e-9).abs() < 1e-15);
        assert!(loss_logistic(-800.0, 1.0).is_finite());
        assert!((loss_logistic(-800.0, 1.0) - 800.0).abs() < 1e-9);
    }

    #[test]
    fn logistic_gradient_matches_difference() {
        for &(z, y) in &[(0.3, 1.0), (-2.0, 1.0), (1.7, -1.0), (30.0, -1.0)] {
            let (_, g) = LossKind::Logistic.value_and_grad(z, y);
            let h = 1e-6;
            let fd = (loss_logistic(z + h, y) - loss_logistic(z - h, y)) / (2.0 * h);
            assert!((g - fd).abs() < 1e-7, "{z} {y}: {g} vs {fd}");
        }
    }
}
