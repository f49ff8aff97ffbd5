//! Optimal no-context predictors and loss normalization.
//!
//! For a continuous task the best context-free predictor is the conditional
//! mean `g*(x) = E_f[f(x)]`; for a boolean task it is the majority label over
//! the function class at `x`, with ties resolved to −1.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::rng::{LabRng, RngState};
use crate::taskgen::{
    eval_function, leaky_relu, sample_function, sample_input, Modality, TaskKind, TaskSpec,
};

/// Default sample count for Monte-Carlo oracles.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
/// Below this many samples an MC estimate carries a warning.
pub const MIN_MC_SAMPLES: usize = 1_000;

const MAX_SPARSE_PARITY_DIM: usize = 20;
const MAX_PARITY_DIM: usize = 16;
/// Fixed work split for parallel Monte-Carlo loops.
const MC_CHUNKS: usize = 64;

/// Majority label over the whole function class, one entry per input.
/// Input index bit `i` is set exactly when `x[i] = −1`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BooleanTable {
    pub dim: usize,
    pub labels: Vec<i8>,
}

impl BooleanTable {
    pub fn index_of(x: &[f64]) -> usize {
        x.iter()
            .enumerate()
            .filter(|(_, &v)| v < 0.0)
            .map(|(i, _)| 1usize << i)
            .sum()
    }

    pub fn input(dim: usize, index: usize) -> Vec<f64> {
        (0..dim)
            .map(|i| if index >> i & 1 == 1 { -1.0 } else { 1.0 })
            .collect()
    }

    pub fn lookup(&self, x: &[f64]) -> f64 {
        f64::from(self.labels[Self::index_of(x)])
    }
}

/// Per-query Monte-Carlo estimate of `E_f[f(x)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McOracle {
    pub samples: usize,
    pub state: RngState,
    /// For `w ~ N(μ1, I)` classes `w⊺x = μΣx + ‖x‖ξ` exactly, so the
    /// estimator only needs draws of `ξ`; these are cached here.
    xi: Option<Vec<f64>>,
    pub warning: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum OracleForm {
    /// `g*(x) = coef · Σᵢ xᵢ`.
    Linear { coef: f64 },
    /// `g*(x) = x⊺Ux` with every `U_ij = entry`, i.e. `entry · (Σᵢ xᵢ)²`.
    Quadratic { entry: f64 },
    Constant(f64),
    /// Majority over all `C(d, k)` subsets, by counting.
    SparseParity { arity: usize },
    /// +1 only on the all-ones input; every other input is a tie.
    Parity,
    Table(BooleanTable),
    MonteCarlo(McOracle),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoContextOracle {
    pub task: TaskSpec,
    pub form: OracleForm,
}

impl NoContextOracle {
    pub fn modality(&self) -> Modality {
        self.task.modality()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        let s: f64 = x.iter().sum();
        match &self.form {
            OracleForm::Linear { coef } => coef * s,
            OracleForm::Quadratic { entry } => entry * s * s,
            OracleForm::Constant(c) => *c,
            OracleForm::SparseParity { arity } => {
                majority(sparse_parity_positive_fraction(self.task.dim, *arity, x))
            }
            OracleForm::Parity => {
                if x.iter().all(|&v| v > 0.0) {
                    1.0
                } else {
                    -1.0
                }
            }
            OracleForm::Table(t) => t.lookup(x),
            OracleForm::MonteCarlo(mc) => mc.estimate(&self.task, x).0,
        }
    }

    /// Estimate and its standard error (zero for exact forms).
    pub fn eval_with_error(&self, x: &[f64]) -> (f64, f64) {
        match &self.form {
            OracleForm::MonteCarlo(mc) => mc.estimate(&self.task, x),
            _ => (self.eval(x), 0.0),
        }
    }

    /// Short textual description of the closed form, for reports.
    pub fn describe(&self) -> String {
        match &self.form {
            OracleForm::Linear { coef } => format!("g*(x) = {coef} * sum(x)"),
            OracleForm::Quadratic { entry } => {
                format!("g*(x) = x^T U x with U_ij = {entry}")
            }
            OracleForm::Constant(c) => format!("g*(x) = {c}"),
            OracleForm::SparseParity { arity } => format!(
                "g*(x) = majority over all size-{arity} subset products (ties -> -1)"
            ),
            OracleForm::Parity => "g*(x) = +1 if x is all ones, else -1".into(),
            OracleForm::Table(t) => format!("exhaustive majority table over 2^{}", t.dim),
            OracleForm::MonteCarlo(mc) => {
                format!("g*(x) = Monte-Carlo mean of f(x) over {} draws", mc.samples)
            }
        }
    }
}

fn majority(positive_fraction: f64) -> f64 {
    if positive_fraction > 0.5 {
        1.0
    } else {
        -1.0
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    if k > n {
        return 0.0;
    }
    let k = k.min(n - k);
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// Fraction of size-`k` subsets whose product at `x` is +1: the subset must
/// hold an even number of the `m` negative coordinates.
pub fn sparse_parity_positive_fraction(d: usize, k: usize, x: &[f64]) -> f64 {
    let m = x.iter().filter(|&&v| v < 0.0).count();
    let even: f64 = (0..=k.min(m))
        .step_by(2)
        .map(|j| binomial(m, j) * binomial(d - m, k - j))
        .sum();
    even / binomial(d, k)
}

/// `P(f(x) = +1)` over the task's function distribution.
pub fn positive_fraction(spec: &TaskSpec, x: &[f64]) -> Result<f64> {
    match spec.kind {
        TaskKind::SparseParity => Ok(sparse_parity_positive_fraction(spec.dim, spec.sparsity, x)),
        TaskKind::Parity => Ok(if x.iter().all(|&v| v > 0.0) { 1.0 } else { 0.5 }),
        TaskKind::BooleanRetrieval => Ok(0.5),
        _ => Err(LabError::Unsupported(format!(
            "{} is not a boolean task",
            spec
        ))),
    }
}

/// Exact closed-form oracle, where one exists.
pub fn closed_form_oracle(spec: &TaskSpec) -> Result<NoContextOracle> {
    spec.validate()?;
    let d = spec.dim as f64;
    let form = match spec.kind {
        TaskKind::LinearRegression => OracleForm::Linear { coef: spec.mu },
        TaskKind::SparseLinearRegression => OracleForm::Linear {
            coef: spec.sparsity as f64 / d * spec.mu,
        },
        // Entries are (1/√d)·N(μ, 1), so E[W_ij] = μ/√d.
        TaskKind::QuadraticRegression => OracleForm::Quadratic {
            entry: spec.mu / d.sqrt(),
        },
        TaskKind::SparseParity => OracleForm::SparseParity {
            arity: spec.sparsity,
        },
        TaskKind::Parity => OracleForm::Parity,
        TaskKind::GaussianRetrieval => OracleForm::Constant(0.0),
        // Values are ±1 with equal probability whatever the key: a tie.
        TaskKind::BooleanRetrieval => OracleForm::Constant(-1.0),
        TaskKind::LeakyReluRegression => {
            return Err(LabError::Unsupported(
                "LeakyReLU Regression has no closed-form oracle; use mc_oracle".into(),
            ))
        }
    };
    Ok(NoContextOracle {
        task: spec.clone(),
        form,
    })
}

/// Majority label at every input, by enumerating the entire function class.
pub fn brute_force_boolean_oracle(spec: &TaskSpec) -> Result<BooleanTable> {
    spec.validate()?;
    let d = spec.dim;
    let subsets: Vec<usize> = match spec.kind {
        TaskKind::SparseParity => {
            if d > MAX_SPARSE_PARITY_DIM {
                return Err(LabError::Resource(format!(
                    "exhaustive Sparse Parity oracle limited to d <= {MAX_SPARSE_PARITY_DIM}, got {d}"
                )));
            }
            (0usize..1 << d)
                .filter(|s| s.count_ones() as usize == spec.sparsity)
                .collect()
        }
        TaskKind::Parity => {
            if d > MAX_PARITY_DIM {
                return Err(LabError::Resource(format!(
                    "exhaustive Parity oracle limited to d <= {MAX_PARITY_DIM}, got {d}"
                )));
            }
            (0usize..1 << d).collect()
        }
        _ => {
            return Err(LabError::Unsupported(format!(
                "{spec} has no finite function class to enumerate"
            )))
        }
    };
    let labels = (0usize..1 << d)
        .map(|neg| {
            // Product over subset A is +1 iff |A ∩ negatives| is even.
            let plus = subsets
                .iter()
                .filter(|&&a| (a & neg).count_ones() % 2 == 0)
                .count();
            if 2 * plus > subsets.len() {
                1
            } else {
                -1
            }
        })
        .collect();
    Ok(BooleanTable { dim: d, labels })
}

/// Pair-count shortcut for Sparse Parity(2): `Σ_{i<j} xᵢxⱼ = ((Σxᵢ)² − d)/2`,
/// and the majority is +1 exactly when that sum is positive.
pub fn sparse_parity_closed_form(d: usize, k: usize, x: &[f64]) -> Result<f64> {
    if k != 2 {
        return Err(LabError::Unsupported(format!(
            "pair-count shortcut needs k = 2, got k = {k}"
        )));
    }
    if x.len() != d {
        return Err(LabError::usage(format!("expected {d} coordinates, got {}", x.len())));
    }
    let s: f64 = x.iter().sum();
    Ok(if s * s - d as f64 > 0.0 { 1.0 } else { -1.0 })
}

impl McOracle {
    fn new(spec: &TaskSpec, samples: usize, state: RngState) -> Self {
        let xi = matches!(
            spec.kind,
            TaskKind::LinearRegression | TaskKind::LeakyReluRegression
        )
        .then(|| {
            let mut rng = state.rng();
            (0..samples).map(|_| rng.sample(StandardNormal)).collect()
        });
        let warning = (samples < MIN_MC_SAMPLES).then(|| {
            format!("only {samples} Monte-Carlo samples (recommended >= {MIN_MC_SAMPLES})")
        });
        McOracle {
            samples,
            state,
            xi,
            warning,
        }
    }

    /// `(mean, standard error)` of `f(x)` over the sampled functions.
    pub fn estimate(&self, spec: &TaskSpec, x: &[f64]) -> (f64, f64) {
        let mut acc = Welford::default();
        match &self.xi {
            Some(xi) => {
                let s: f64 = x.iter().sum();
                let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
                let mean = spec.mu * s;
                for &z in xi {
                    let pre = mean + norm * z;
                    acc.push(if spec.kind == TaskKind::LeakyReluRegression {
                        leaky_relu(pre, spec.slope)
                    } else {
                        pre
                    });
                }
            }
            None => {
                // Common random numbers: every query sees the same functions.
                let mut rng = self.state.rng();
                for _ in 0..self.samples {
                    let f = sample_function(spec, &mut rng);
                    acc.push(eval_function(&f, x).unwrap_or(f64::NAN));
                }
            }
        }
        (acc.mean(), acc.standard_error())
    }
}

/// Monte-Carlo oracle for a continuous task.
pub fn mc_oracle(spec: &TaskSpec, samples: usize, state: RngState) -> Result<NoContextOracle> {
    spec.validate()?;
    if spec.modality() != Modality::Continuous || spec.kind.is_retrieval() {
        return Err(LabError::Unsupported(format!(
            "Monte-Carlo oracle covers continuous function classes; got {spec}"
        )));
    }
    if samples == 0 {
        return Err(LabError::config("Monte-Carlo oracle needs at least one sample"));
    }
    Ok(NoContextOracle {
        task: spec.clone(),
        form: OracleForm::MonteCarlo(McOracle::new(spec, samples, state)),
    })
}

/// Closed form when available, otherwise Monte-Carlo with the default budget.
pub fn oracle_for(spec: &TaskSpec, state: RngState) -> Result<NoContextOracle> {
    match closed_form_oracle(spec) {
        Err(LabError::Unsupported(_)) => mc_oracle(spec, DEFAULT_MC_SAMPLES, state),
        other => other,
    }
}

/// Running mean and variance.
#[derive(Clone, Copy, Debug, Default)]
pub struct Welford {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Welford {
    pub fn push(&mut self, v: f64) {
        self.n += 1;
        let delta = v - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (v - self.mean);
    }

    pub fn merge(&mut self, other: &Welford) {
        if other.n == 0 {
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64 * other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    pub fn standard_error(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            (self.variance() / self.n as f64).sqrt()
        }
    }
}

/// Run `samples` draws split into fixed chunks, each on its own stream, and
/// merge the chunk statistics in order.
fn mc_mean<F>(samples: usize, state: RngState, exec: Exec, draw: F) -> Welford
where
    F: Fn(&mut LabRng) -> f64 + Sync + Send,
{
    let chunks = MC_CHUNKS.min(samples.max(1));
    let parts = exec.map_range(chunks, |c| {
        let lo = samples * c / chunks;
        let hi = samples * (c + 1) / chunks;
        let mut rng = state.derive(c as u64).rng();
        let mut acc = Welford::default();
        for _ in lo..hi {
            acc.push(draw(&mut rng));
        }
        acc
    });
    parts.iter().fold(Welford::default(), |mut total, p| {
        total.merge(p);
        total
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationReport {
    pub task: TaskSpec,
    /// `1 / E[ℓ(g*(x), f(x))]`.
    pub c: f64,
    /// Estimated expected no-context loss.
    pub reference_loss: f64,
    pub loss_standard_error: f64,
    pub estimator_samples: usize,
    /// Standard error of `c` (delta method).
    pub standard_error: f64,
    pub warning: Option<String>,
}

/// Binary entropy in nats.
pub fn binary_entropy(p: f64) -> f64 {
    let h = |q: f64| if q <= 0.0 { 0.0 } else { -q * q.ln() };
    h(p) + h(1.0 - p)
}

/// Expected no-context loss of one `(f, x)` draw, by task family.
fn reference_loss_sample(spec: &TaskSpec, oracle: &NoContextOracle, rng: &mut LabRng) -> f64 {
    let d = spec.dim;
    let mut x = vec![0.0; d];
    match spec.kind {
        // Squared error of the best constant predictor 0 against v ~ N(0, 1).
        TaskKind::GaussianRetrieval => {
            let v: f64 = rng.sample(StandardNormal);
            v * v
        }
        TaskKind::SparseParity | TaskKind::Parity | TaskKind::BooleanRetrieval => {
            sample_input(spec, rng, &mut x);
            binary_entropy(positive_fraction(spec, &x).unwrap_or(0.5))
        }
        TaskKind::LeakyReluRegression => {
            // E[(f − g*)²] = E_x Var_f f(x) = ½ E[(f₁(x) − f₂(x))²] for two
            // independent draws; unbiased and free of inner-loop error.
            let f1 = sample_function(spec, rng);
            let f2 = sample_function(spec, rng);
            sample_input(spec, rng, &mut x);
            let diff = eval_function(&f1, &x).unwrap() - eval_function(&f2, &x).unwrap();
            0.5 * diff * diff
        }
        _ => {
            let f = sample_function(spec, rng);
            sample_input(spec, rng, &mut x);
            let r = eval_function(&f, &x).unwrap() - oracle.eval(&x);
            r * r
        }
    }
}

/// `c = 1 / E[ℓ(g*(x), f(x))]`: squared error for continuous tasks, and for
/// boolean tasks the least achievable context-free logistic loss, the
/// binary entropy of `P(f(x) = 1 | x)` averaged over `x`.
pub fn normalization_constant(
    spec: &TaskSpec,
    samples: usize,
    state: RngState,
) -> Result<NormalizationReport> {
    normalization_constant_with(spec, samples, state, Exec::default())
}

pub fn normalization_constant_with(
    spec: &TaskSpec,
    samples: usize,
    state: RngState,
    exec: Exec,
) -> Result<NormalizationReport> {
    spec.validate()?;
    if samples == 0 {
        return Err(LabError::config("normalization needs at least one sample"));
    }
    let oracle = match closed_form_oracle(spec) {
        Ok(o) => o,
        // Not consulted for LeakyReLU; see `reference_loss_sample`.
        Err(LabError::Unsupported(_)) => mc_oracle(spec, 1, state)?,
        Err(e) => return Err(e),
    };
    let acc = mc_mean(samples, state, exec, |rng| {
        reference_loss_sample(spec, &oracle, rng)
    });
    let loss = acc.mean();
    if !(loss > 0.0) {
        return Err(LabError::numeric(
            format!("normalization of {spec}"),
            format!("expected no-context loss is {loss}; the task is already solved without context"),
        ));
    }
    let c = 1.0 / loss;
    let se = acc.standard_error();
    Ok(NormalizationReport {
        task: spec.clone(),
        c,
        reference_loss: loss,
        loss_standard_error: se,
        estimator_samples: samples,
        standard_error: c * c * se,
        warning: (samples < MIN_MC_SAMPLES)
            .then(|| format!("only {samples} samples (recommended >= {MIN_MC_SAMPLES})")),
    })
}

/// `E_{f,x}[1(g*(x) = f(x))]` by Monte-Carlo.
pub fn no_context_accuracy(spec: &TaskSpec, samples: usize, state: RngState) -> Result<f64> {
    if !spec.is_boolean() {
        return Err(LabError::Unsupported(format!(
            "no-context accuracy is defined for boolean tasks; got {spec}"
        )));
    }
    let oracle = closed_form_oracle(spec)?;
    let acc = mc_mean(samples, state, Exec::default(), |rng| {
        let mut x = vec![0.0; spec.dim];
        let label = if spec.kind == TaskKind::BooleanRetrieval {
            // Stored values are independent fair signs whatever the key.
            sample_input(spec, rng, &mut x);
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        } else {
            let f = sample_function(spec, rng);
            sample_input(spec, rng, &mut x);
            eval_function(&f, &x).unwrap()
        };
        f64::from(u8::from(oracle.eval(&x) == label))
    });
    Ok(acc.mean())
}

/// Boolean sign convention: `sign(0) = +1`.
pub fn sign_label(v: f64) -> f64 {
    if v >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Mean squared deviation (continuous) or mean sign disagreement (boolean)
/// between last-position predictions and the oracle.
pub fn nc_distance(
    predictions: &[f64],
    oracle: &NoContextOracle,
    inputs: &[&[f64]],
) -> Result<f64> {
    if predictions.len() != inputs.len() {
        return Err(LabError::usage(format!(
            "{} predictions but {} inputs",
            predictions.len(),
            inputs.len()
        )));
    }
    if predictions.is_empty() {
        return Err(LabError::usage("nc_distance needs at least one prediction"));
    }
    let total: f64 = predictions
        .iter()
        .zip(inputs)
        .map(|(&p, x)| {
            let g = oracle.eval(x);
            match oracle.modality() {
                Modality::Continuous => (p - g) * (p - g),
                Modality::Boolean => f64::from(u8::from(sign_label(p) != g)),
            }
        })
        .sum();
    Ok(total / predictions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_form_examples() {
        let lin = closed_form_oracle(&TaskSpec::linear(2, 1.0)).unwrap();
        assert_eq!(lin.eval(&[1.0, 1.0]), 2.0);
        let slr = closed_form_oracle(&TaskSpec::sparse_linear(10, 3, 1.0)).unwrap();
        assert!((slr.eval(&[1.0; 10]) - 3.0).abs() < 1e-12);
        let quad = closed_form_oracle(&TaskSpec::quadratic(4, 1.0)).unwrap();
        assert!((quad.eval(&[1.0, 0.0, 0.0, 0.0]) - 0.5).abs() < 1e-12);
        for spec in [TaskSpec::linear(3, 2.0), TaskSpec::quadratic(3, -1.0), TaskSpec::sparse_linear(3, 2, 1.0)] {
            assert_eq!(closed_form_oracle(&spec).unwrap().eval(&[0.0; 3]), 0.0);
        }
    }

    #[test]
    fn leaky_relu_has_no_closed_form() {
        assert!(matches!(
            closed_form_oracle(&TaskSpec::leaky_relu(3, 0.0)),
            Err(LabError::Unsupported(_))
        ));
    }

    #[test]
    fn brute_force_small_cases() {
        let single = brute_force_boolean_oracle(&TaskSpec::sparse_parity(2, 2)).unwrap();
        for idx in 0..4 {
            let x = BooleanTable::input(2, idx);
            assert_eq!(single.lookup(&x), x[0] * x[1]);
        }
        let parity = brute_force_boolean_oracle(&TaskSpec::parity(3)).unwrap();
        assert_eq!(parity.lookup(&[1.0, 1.0, 1.0]), 1.0);
        assert_eq!(parity.lookup(&[-1.0, 1.0, 1.0]), -1.0);
        assert!(matches!(
            brute_force_boolean_oracle(&TaskSpec::parity(17)),
            Err(LabError::Resource(_))
        ));
    }

    #[test]
    fn pair_count_shortcut_examples() {
        assert_eq!(sparse_parity_closed_form(10, 2, &[1.0; 10]).unwrap(), 1.0);
        let mut balanced = vec![1.0; 10];
        balanced[..5].iter_mut().for_each(|v| *v = -1.0);
        assert_eq!(sparse_parity_closed_form(10, 2, &balanced).unwrap(), -1.0);
        let mut four = vec![1.0; 10];
        four[..3].iter_mut().for_each(|v| *v = -1.0);
        assert_eq!(sparse_parity_closed_form(10, 2, &four).unwrap(), 1.0);
        assert!(sparse_parity_closed_form(10, 3, &four).is_err());
    }

    #[test]
    fn pair_counts_by_enumeration() {
        // Σx = 0 at d = 10: 20 of the 45 pairs are +1, 25 are −1.
        let mut x = vec![1.0; 10];
        x[..5].iter_mut().for_each(|v| *v = -1.0);
        let plus = (0..10)
            .flat_map(|i| (i + 1..10).map(move |j| (i, j)))
            .filter(|&(i, j)| x[i] * x[j] > 0.0)
            .count();
        assert_eq!(plus, 20);
        assert_eq!(sparse_parity_positive_fraction(10, 2, &x), 20.0 / 45.0);
    }

    #[test]
    fn mc_linear_matches_closed_form() {
        let spec = TaskSpec::linear(2, 1.0);
        let o = mc_oracle(&spec, 1_000_000, RngState::from_seed(3)).unwrap();
        let (m, se) = o.eval_with_error(&[1.0, 1.0]);
        assert!((m - 2.0).abs() < 0.01, "{m}");
        assert!(se > 0.0 && se < 0.01);
    }

    #[test]
    fn mc_warns_on_small_budgets() {
        let o = mc_oracle(&TaskSpec::leaky_relu(3, 0.0), 10, RngState::from_seed(0)).unwrap();
        match o.form {
            OracleForm::MonteCarlo(mc) => assert!(mc.warning.is_some()),
            _ => unreachable!(),
        }
        assert!(mc_oracle(&TaskSpec::parity(3), 10, RngState::from_seed(0)).is_err());
    }

    #[test]
    fn nc_distance_examples() {
        let o = closed_form_oracle(&TaskSpec::linear(2, 1.0)).unwrap();
        let xs: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        let inputs: Vec<&[f64]> = xs.iter().map(|v| v.as_slice()).collect();
        let exact: Vec<f64> = inputs.iter().map(|x| o.eval(x)).collect();
        assert_eq!(nc_distance(&exact, &o, &inputs).unwrap(), 0.0);
        let shifted: Vec<f64> = exact.iter().map(|v| v + 1.0).collect();
        assert!((nc_distance(&shifted, &o, &inputs).unwrap() - 1.0).abs() < 1e-12);
        assert!(nc_distance(&exact[..1], &o, &inputs).is_err());

        let b = closed_form_oracle(&TaskSpec::sparse_parity(4, 2)).unwrap();
        let bx: Vec<Vec<f64>> = (0..16).map(|i| BooleanTable::input(4, i)).collect();
        let binputs: Vec<&[f64]> = bx.iter().map(|v| v.as_slice()).collect();
        let flipped: Vec<f64> = binputs.iter().map(|x| -b.eval(x)).collect();
        assert_eq!(nc_distance(&flipped, &b, &binputs).unwrap(), 1.0);
    }

    #[test]
    fn welford_merge_matches_single_pass() {
        let data: Vec<f64> = (0..100).map(|i| (i as f64).sin()).collect();
        let mut whole = Welford::default();
        data.iter().for_each(|&v| whole.push(v));
        let mut a = Welford::default();
        let mut b = Welford::default();
        data[..37].iter().for_each(|&v| a.push(v));
        data[37..].iter().for_each(|&v| b.push(v));
        a.merge(&b);
        assert!((a.mean() - whole.mean()).abs() < 1e-12);
        assert!((a.variance() - whole.variance()).abs() < 1e-12);
    }

    #[test]
    fn singleton_class_is_always_right() {
        let acc = no_context_accuracy(&TaskSpec::sparse_parity(2, 2), 2_000, RngState::from_seed(1))
            .unwrap();
        assert_eq!(acc, 1.0);
    }
}
