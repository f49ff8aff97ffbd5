//! Synthetic in-context tasks: function classes, prompts and mixed batches.
//!
//! Continuous tasks draw inputs from `N(0, I_d)`; boolean tasks draw them
//! uniformly from `{±1}^d`. Every sampler takes a caller-owned [`LabRng`],
//! so a fixed `(spec, RngState)` reproduces the same draws bit for bit.

use std::collections::HashSet;
use std::fmt;

use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::rng::{LabRng, Purpose, RngState};

/// Number of rows in a retrieval table.
pub const RETRIEVAL_ROWS: usize = 1024;
/// Values stored per retrieval key.
pub const RETRIEVAL_VALUES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    LinearRegression,
    QuadraticRegression,
    SparseLinearRegression,
    LeakyReluRegression,
    SparseParity,
    Parity,
    GaussianRetrieval,
    BooleanRetrieval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Continuous,
    Boolean,
}

impl TaskKind {
    pub fn modality(self) -> Modality {
        match self {
            TaskKind::SparseParity | TaskKind::Parity | TaskKind::BooleanRetrieval => {
                Modality::Boolean
            }
            _ => Modality::Continuous,
        }
    }

    pub fn is_retrieval(self) -> bool {
        matches!(self, TaskKind::GaussianRetrieval | TaskKind::BooleanRetrieval)
    }

    /// Human-readable name as used in result tables.
    pub fn display_name(self) -> &'static str {
        match self {
            TaskKind::LinearRegression => "Linear Regression",
            TaskKind::QuadraticRegression => "Quadratic Regression",
            TaskKind::SparseLinearRegression => "Sparse Linear Regression",
            TaskKind::LeakyReluRegression => "LeakyReLU Regression",
            TaskKind::SparseParity => "Sparse Parity",
            TaskKind::Parity => "Parity",
            TaskKind::GaussianRetrieval => "Gaussian Retrieval",
            TaskKind::BooleanRetrieval => "Boolean Retrieval",
        }
    }
}

fn default_sparsity() -> usize {
    3
}

fn default_slope() -> f64 {
    0.5
}

/// Declarative description of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub dim: usize,
    /// Mean shift of the weight distribution (continuous tasks).
    #[serde(default)]
    pub mu: f64,
    /// Retained coordinates (sparse linear) or subset arity (sparse parity).
    #[serde(default = "default_sparsity")]
    pub sparsity: usize,
    /// Negative slope of the LeakyReLU task.
    #[serde(default = "default_slope")]
    pub slope: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, dim: usize) -> Self {
        TaskSpec {
            kind,
            dim,
            mu: 0.0,
            sparsity: default_sparsity(),
            slope: default_slope(),
        }
    }

    pub fn linear(dim: usize, mu: f64) -> Self {
        TaskSpec::new(TaskKind::LinearRegression, dim).with_mu(mu)
    }

    pub fn quadratic(dim: usize, mu: f64) -> Self {
        TaskSpec::new(TaskKind::QuadraticRegression, dim).with_mu(mu)
    }

    pub fn sparse_linear(dim: usize, k: usize, mu: f64) -> Self {
        TaskSpec::new(TaskKind::SparseLinearRegression, dim)
            .with_mu(mu)
            .with_sparsity(k)
    }

    pub fn leaky_relu(dim: usize, mu: f64) -> Self {
        TaskSpec::new(TaskKind::LeakyReluRegression, dim).with_mu(mu)
    }

    pub fn sparse_parity(dim: usize, k: usize) -> Self {
        TaskSpec::new(TaskKind::SparseParity, dim).with_sparsity(k)
    }

    pub fn parity(dim: usize) -> Self {
        TaskSpec::new(TaskKind::Parity, dim)
    }

    pub fn gaussian_retrieval(dim: usize) -> Self {
        TaskSpec::new(TaskKind::GaussianRetrieval, dim)
    }

    pub fn boolean_retrieval(dim: usize) -> Self {
        TaskSpec::new(TaskKind::BooleanRetrieval, dim)
    }

    pub fn with_mu(mut self, mu: f64) -> Self {
        self.mu = mu;
        self
    }

    pub fn with_sparsity(mut self, k: usize) -> Self {
        self.sparsity = k;
        self
    }

    pub fn with_slope(mut self, slope: f64) -> Self {
        self.slope = slope;
        self
    }

    pub fn modality(&self) -> Modality {
        self.kind.modality()
    }

    pub fn is_boolean(&self) -> bool {
        self.modality() == Modality::Boolean
    }

    /// Parse a short task code (`lr`, `qr`, `slr`, `lrelu`, `sp2`, `sp3`,
    /// `parity`, `grt`, `brt`; `spK` for any arity).
    pub fn from_code(code: &str, dim: usize) -> Result<TaskSpec> {
        let spec = match code {
            "lr" => TaskSpec::linear(dim, 0.0),
            "qr" => TaskSpec::quadratic(dim, 0.0),
            "slr" => TaskSpec::sparse_linear(dim, 3, 0.0),
            "lrelu" => TaskSpec::leaky_relu(dim, 0.0),
            "parity" => TaskSpec::parity(dim),
            "grt" => TaskSpec::gaussian_retrieval(dim),
            "brt" => TaskSpec::boolean_retrieval(dim),
            other => match other.strip_prefix("sp").map(str::parse::<usize>) {
                Some(Ok(k)) => TaskSpec::sparse_parity(dim, k),
                _ => return Err(LabError::usage(format!("unknown task code `{code}`"))),
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Inverse of [`TaskSpec::from_code`] (ignores `mu`).
    pub fn code(&self) -> String {
        match self.kind {
            TaskKind::LinearRegression => "lr".into(),
            TaskKind::QuadraticRegression => "qr".into(),
            TaskKind::SparseLinearRegression => "slr".into(),
            TaskKind::LeakyReluRegression => "lrelu".into(),
            TaskKind::SparseParity => format!("sp{}", self.sparsity),
            TaskKind::Parity => "parity".into(),
            TaskKind::GaussianRetrieval => "grt".into(),
            TaskKind::BooleanRetrieval => "brt".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(LabError::config("task dimension must be at least 1"));
        }
        match self.kind {
            TaskKind::SparseParity | TaskKind::SparseLinearRegression => {
                if self.sparsity == 0 || self.sparsity > self.dim {
                    return Err(LabError::config(format!(
                        "{}: sparsity {} must lie in 1..={}",
                        self.kind.display_name(),
                        self.sparsity,
                        self.dim
                    )));
                }
            }
            TaskKind::LeakyReluRegression => {
                if !(self.slope > 0.0 && self.slope < 1.0) {
                    return Err(LabError::config(format!(
                        "LeakyReLU slope {} must lie in (0, 1)",
                        self.slope
                    )));
                }
            }
            _ => {}
        }
        if !self.mu.is_finite() {
            return Err(LabError::config("mu must be finite"));
        }
        Ok(())
    }
}

impl fmt::Display for TaskSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            TaskKind::SparseParity => write!(f, "Sparse Parity({})", self.sparsity),
            kind => f.write_str(kind.display_name()),
        }
    }
}

/// The hidden parameters of one sampled in-context function.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Payload {
    Weights(Vec<f64>),
    /// Row-major `d × d` matrix.
    Matrix(Vec<f64>),
    /// Full-length weights that are zero off `support`.
    SparseWeights { w: Vec<f64>, support: Vec<usize> },
    /// Sorted, zero-based coordinate subset.
    Subset(Vec<usize>),
    /// Retrieval prompts are answered from a table, not a function.
    Retrieval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionSample {
    pub task: TaskSpec,
    pub payload: Payload,
}

fn normal(rng: &mut LabRng) -> f64 {
    rng.sample(StandardNormal)
}

fn sign(rng: &mut LabRng) -> f64 {
    if rng.random::<bool>() {
        1.0
    } else {
        -1.0
    }
}

/// Draw `f ~ D_F` for the task.
pub fn sample_function(spec: &TaskSpec, rng: &mut LabRng) -> FunctionSample {
    let d = spec.dim;
    let payload = match spec.kind {
        TaskKind::LinearRegression | TaskKind::LeakyReluRegression => {
            Payload::Weights((0..d).map(|_| spec.mu + normal(rng)).collect())
        }
        TaskKind::QuadraticRegression => {
            // Each entry is (1/√d)·N(μ, 1).
            let scale = 1.0 / (d as f64).sqrt();
            Payload::Matrix((0..d * d).map(|_| scale * (spec.mu + normal(rng))).collect())
        }
        TaskKind::SparseLinearRegression => {
            let full: Vec<f64> = (0..d).map(|_| spec.mu + normal(rng)).collect();
            let mut support = index::sample(rng, d, spec.sparsity).into_vec();
            support.sort_unstable();
            let mut w = vec![0.0; d];
            for &i in &support {
                w[i] = full[i];
            }
            Payload::SparseWeights { w, support }
        }
        TaskKind::SparseParity => {
            let mut subset = index::sample(rng, d, spec.sparsity).into_vec();
            subset.sort_unstable();
            Payload::Subset(subset)
        }
        TaskKind::Parity => Payload::Subset((0..d).filter(|_| rng.random::<bool>()).collect()),
        TaskKind::GaussianRetrieval | TaskKind::BooleanRetrieval => Payload::Retrieval,
    };
    FunctionSample {
        task: spec.clone(),
        payload,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn is_pm_one(x: &[f64]) -> bool {
    x.iter().all(|&v| v == 1.0 || v == -1.0)
}

/// Exact value `f(x)`.
pub fn eval_function(f: &FunctionSample, x: &[f64]) -> Result<f64> {
    let d = f.task.dim;
    if x.len() != d {
        return Err(LabError::usage(format!(
            "input has length {} but the task dimension is {d}",
            x.len()
        )));
    }
    if f.task.is_boolean() && !is_pm_one(x) {
        return Err(LabError::usage("boolean tasks require inputs in {±1}^d"));
    }
    Ok(eval_unchecked(f, x))
}

fn eval_unchecked(f: &FunctionSample, x: &[f64]) -> f64 {
    match &f.payload {
        Payload::Weights(w) => {
            let z = dot(w, x);
            if f.task.kind == TaskKind::LeakyReluRegression {
                leaky_relu(z, f.task.slope)
            } else {
                z
            }
        }
        Payload::Matrix(m) => {
            let d = f.task.dim;
            (0..d)
                .map(|i| x[i] * dot(&m[i * d..(i + 1) * d], x))
                .sum()
        }
        Payload::SparseWeights { w, support } => support.iter().map(|&i| w[i] * x[i]).sum(),
        // The empty product is +1.
        Payload::Subset(a) => a.iter().map(|&i| x[i]).product(),
        Payload::Retrieval => f64::NAN,
    }
}

pub fn leaky_relu(z: f64, slope: f64) -> f64 {
    if z >= 0.0 {
        z
    } else {
        slope * z
    }
}

/// Draw one input from the task's input distribution.
pub fn sample_input(spec: &TaskSpec, rng: &mut LabRng, out: &mut [f64]) {
    match spec.modality() {
        Modality::Continuous => out.iter_mut().for_each(|v| *v = normal(rng)),
        Modality::Boolean => out.iter_mut().for_each(|v| *v = sign(rng)),
    }
}

/// `n` demonstration pairs. Inputs are stored flat, row `i` at
/// `xs[i*dim..(i+1)*dim]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptSequence {
    pub task_id: usize,
    pub dim: usize,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
}

impl PromptSequence {
    pub fn n(&self) -> usize {
        self.ys.len()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last_x(&self) -> &[f64] {
        self.x(self.n() - 1)
    }

    pub fn last_y(&self) -> f64 {
        self.ys[self.n() - 1]
    }
}

/// Inputs drawn i.i.d. from `D_X`, labels from `f`.
pub fn build_prompt(
    spec: &TaskSpec,
    f: &FunctionSample,
    n: usize,
    rng: &mut LabRng,
) -> PromptSequence {
    assert!(n >= 1, "a prompt needs at least one demonstration");
    let d = spec.dim;
    let mut xs = vec![0.0; n * d];
    let mut ys = Vec::with_capacity(n);
    for row in xs.chunks_exact_mut(d) {
        sample_input(spec, rng, row);
        ys.push(eval_unchecked(f, row));
    }
    PromptSequence {
        task_id: 0,
        dim: d,
        xs,
        ys,
    }
}

/// One key with its four candidate values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalTable {
    pub spec: TaskSpec,
    /// `RETRIEVAL_ROWS × dim`, row-major.
    pub keys: Vec<f64>,
    pub values: Vec<[f64; RETRIEVAL_VALUES]>,
}

impl RetrievalTable {
    pub fn rows(&self) -> usize {
        self.values.len()
    }

    pub fn key(&self, i: usize) -> &[f64] {
        let d = self.spec.dim;
        &self.keys[i * d..(i + 1) * d]
    }
}

fn key_bits(key: &[f64]) -> Vec<u64> {
    key.iter().map(|v| v.to_bits()).collect()
}

/// Sample the 1024-row table with pairwise distinct keys.
pub fn build_retrieval_table(spec: &TaskSpec, rng: &mut LabRng) -> Result<RetrievalTable> {
    let d = spec.dim;
    let mut keys = Vec::with_capacity(RETRIEVAL_ROWS * d);
    match spec.kind {
        TaskKind::BooleanRetrieval => {
            if d < 10 {
                return Err(LabError::config(format!(
                    "Boolean Retrieval needs d >= 10 for {RETRIEVAL_ROWS} distinct keys, got d = {d}"
                )));
            }
            if d < 32 {
                // Sample codes without replacement from the 2^d cube.
                for code in index::sample(rng, 1usize << d, RETRIEVAL_ROWS) {
                    keys.extend((0..d).map(|b| if code >> b & 1 == 1 { -1.0 } else { 1.0 }));
                }
            } else {
                let mut seen = HashSet::new();
                let mut row = vec![0.0; d];
                while seen.len() < RETRIEVAL_ROWS {
                    row.iter_mut().for_each(|v| *v = sign(rng));
                    if seen.insert(key_bits(&row)) {
                        keys.extend_from_slice(&row);
                    }
                }
            }
        }
        TaskKind::GaussianRetrieval => {
            let mut seen = HashSet::new();
            let mut row = vec![0.0; d];
            while seen.len() < RETRIEVAL_ROWS {
                row.iter_mut().for_each(|v| *v = normal(rng));
                if seen.insert(key_bits(&row)) {
                    keys.extend_from_slice(&row);
                }
            }
        }
        other => {
            return Err(LabError::usage(format!(
                "{} is not a retrieval task",
                other.display_name()
            )))
        }
    }
    let values = (0..RETRIEVAL_ROWS)
        .map(|_| {
            let mut v = [0.0; RETRIEVAL_VALUES];
            for slot in &mut v {
                *slot = match spec.kind {
                    TaskKind::BooleanRetrieval => sign(rng),
                    _ => normal(rng),
                };
            }
            v
        })
        .collect();
    Ok(RetrievalTable {
        spec: spec.clone(),
        keys,
        values,
    })
}

/// A retrieval prompt, the value to be recalled, and the zero-based position
/// of the queried pair among the `n − 1` demonstrations.
///
/// The returned [`PromptSequence`] has `n` rows: the demonstrations followed
/// by the query key, whose label slot holds the target.
pub fn build_retrieval_prompt(
    table: &RetrievalTable,
    n: usize,
    rng: &mut LabRng,
) -> Result<(PromptSequence, f64, usize)> {
    if n < 2 {
        return Err(LabError::config("retrieval prompts need n >= 2"));
    }
    if n - 1 > table.rows() {
        return Err(LabError::config(format!(
            "retrieval prompt asks for {} rows but the table has {}",
            n - 1,
            table.rows()
        )));
    }
    let d = table.spec.dim;
    let rows = index::sample(rng, table.rows(), n - 1).into_vec();
    let mut xs = Vec::with_capacity(n * d);
    let mut ys = Vec::with_capacity(n);
    for &r in &rows {
        xs.extend_from_slice(table.key(r));
        let j = rng.random_range(0..RETRIEVAL_VALUES);
        ys.push(table.values[r][j]);
    }
    let p = rng.random_range(0..n - 1);
    xs.extend_from_slice(table.key(rows[p]));
    let target = ys[p];
    ys.push(target);
    Ok((
        PromptSequence {
            task_id: 0,
            dim: d,
            xs,
            ys,
        },
        target,
        p,
    ))
}

/// A weighted list of tasks sharing one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    pub entries: Vec<MixtureEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureEntry {
    pub task: TaskSpec,
    pub weight: f64,
}

const WEIGHT_TOL: f64 = 1e-9;

impl MixtureSpec {
    /// Equal weights over `tasks`.
    pub fn even(tasks: Vec<TaskSpec>) -> Self {
        let w = 1.0 / tasks.len() as f64;
        MixtureSpec {
            entries: tasks
                .into_iter()
                .map(|task| MixtureEntry { task, weight: w })
                .collect(),
        }
    }

    pub fn weighted(entries: Vec<(TaskSpec, f64)>) -> Self {
        MixtureSpec {
            entries: entries
                .into_iter()
                .map(|(task, weight)| MixtureEntry { task, weight })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn tasks(&self) -> impl Iterator<Item = &TaskSpec> {
        self.entries.iter().map(|e| &e.task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(LabError::config("mixture has no tasks"));
        }
        let dim = self.entries[0].task.dim;
        for e in &self.entries {
            e.task.validate()?;
            if e.task.dim != dim {
                return Err(LabError::config(format!(
                    "all tasks in a mixture share one dimension; {} has d = {} but the first task has d = {dim}",
                    e.task, e.task.dim
                )));
            }
            if !(e.weight > 0.0 && e.weight <= 1.0) {
                return Err(LabError::config(format!(
                    "{}: weight {} must lie in (0, 1]",
                    e.task, e.weight
                )));
            }
        }
        let total: f64 = self.entries.iter().map(|e| e.weight).sum();
        if (total - 1.0).abs() > WEIGHT_TOL {
            return Err(LabError::config(format!("mixture weights sum to {total}, not 1")));
        }
        Ok(())
    }

    /// Per-task prompt counts `B·w_m`; each must be a positive integer.
    pub fn counts(&self, batch_size: usize) -> Result<Vec<usize>> {
        self.validate()?;
        self.entries
            .iter()
            .enumerate()
            .map(|(m, e)| {
                let exact = batch_size as f64 * e.weight;
                let rounded = exact.round();
                if (exact - rounded).abs() > 1e-6 || rounded < 1.0 {
                    Err(LabError::config(format!(
                        "entry {m} ({}): B·weight = {batch_size}·{} = {exact} is not a positive integer",
                        e.task, e.weight
                    )))
                } else {
                    Ok(rounded as usize)
                }
            })
            .collect()
    }
}

/// Prompts grouped by task in mixture order.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub prompts: Vec<PromptSequence>,
    pub counts: Vec<usize>,
}

/// Samples batches for a mixture; owns the retrieval tables, which are drawn
/// once and then shared by every batch of a run.
#[derive(Clone, Debug)]
pub struct MixtureSampler {
    mix: MixtureSpec,
    tables: Vec<Option<RetrievalTable>>,
}

impl MixtureSampler {
    pub fn new(mix: &MixtureSpec, root: RngState) -> Result<Self> {
        mix.validate()?;
        let tables = mix
            .entries
            .iter()
            .enumerate()
            .map(|(m, e)| {
                if e.task.kind.is_retrieval() {
                    let mut rng = root.for_purpose(Purpose::RetrievalTable, m as u64, 0).rng();
                    build_retrieval_table(&e.task, &mut rng).map(Some)
                } else {
                    Ok(None)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(MixtureSampler {
            mix: mix.clone(),
            tables,
        })
    }

    pub fn mixture(&self) -> &MixtureSpec {
        &self.mix
    }

    pub fn table(&self, task: usize) -> Option<&RetrievalTable> {
        self.tables[task].as_ref()
    }

    /// One prompt for task `m`, labels included.
    pub fn prompt(&self, m: usize, n: usize, rng: &mut LabRng) -> Result<PromptSequence> {
        let spec = &self.mix.entries[m].task;
        let mut p = match &self.tables[m] {
            Some(table) => build_retrieval_prompt(table, n, rng)?.0,
            None => {
                let f = sample_function(spec, rng);
                build_prompt(spec, &f, n, rng)
            }
        };
        p.task_id = m;
        Ok(p)
    }

    /// `B` prompts, `B·w_m` for task `m`, each with a fresh function. Task `m`
    /// draws from its own stream `state.derive(m)`, so generation order and
    /// threading cannot change the result.
    pub fn batch(&self, batch_size: usize, n: usize, state: RngState) -> Result<Batch> {
        let counts = self.mix.counts(batch_size)?;
        let mut prompts = Vec::with_capacity(batch_size);
        for (m, &count) in counts.iter().enumerate() {
            let mut rng = state.derive(m as u64).rng();
            for _ in 0..count {
                prompts.push(self.prompt(m, n, &mut rng)?);
            }
        }
        Ok(Batch { prompts, counts })
    }

    /// `count` prompts of task `m` only (used for evaluation).
    pub fn task_batch(
        &self,
        m: usize,
        count: usize,
        n: usize,
        state: RngState,
    ) -> Result<Vec<PromptSequence>> {
        let mut rng = state.derive(m as u64).rng();
        (0..count).map(|_| self.prompt(m, n, &mut rng)).collect()
    }
}

/// Convenience wrapper for mixtures without retrieval tasks (tables, if any,
/// are drawn from `state`).
pub fn build_batch(mix: &MixtureSpec, batch_size: usize, n: usize, state: RngState) -> Result<Batch> {
    MixtureSampler::new(mix, state)?.batch(batch_size, n, state)
}
