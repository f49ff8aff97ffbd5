//! Two-layer teacher-student network `f(x) = V σ(W x)` with a sigmoid hidden layer.
//!
//! The teacher `f*(x) = U σ(A* x)` shares its feature matrix `A*` across the k outputs.
//! In multi mode the rows `u_m` of `U` are drawn around k distinct means; in single mode
//! around one shared mean. Both modes draw the same random quantities from the same
//! streams, so for a fixed seed the only difference between them is the set of means.
//!
//! Under [`TeacherLaw::Resampled`] every example carries its own fresh `U`, the way every
//! ICL prompt carries its own function; the learnable part is then the conditional mean
//! `E[U] σ(A* x)` and the rest is irreducible noise.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::linalg::{all_finite, matmul, matmul_nt, matmul_tn, Real};
use crate::error::{LabError, Result};
use crate::rng::{Purpose, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureMode {
    Single,
    Multi,
}

impl std::str::FromStr for FeatureMode {
    type Err = LabError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(FeatureMode::Single),
            "multi" => Ok(FeatureMode::Multi),
            other => Err(LabError::usage(format!("unknown mode '{other}', expected single or multi"))),
        }
    }
}

pub const DEFAULT_FEATURE_INIT_STD: f64 = 1e-3;

/// How the teacher's output weights relate to the examples.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherLaw {
    /// One `U` drawn per example around the means.
    #[default]
    Resampled,
    /// One `U` drawn once per run and shared by every example.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FeatureNetConfig {
    pub d: usize,
    pub h: usize,
    pub hp: usize,
    pub k: usize,
    pub mode: FeatureMode,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
    #[serde(default)]
    pub teacher: TeacherLaw,
}

fn default_init_std() -> f64 {
    DEFAULT_FEATURE_INIT_STD
}

impl FeatureNetConfig {
    pub fn new(d: usize, h: usize, hp: usize, k: usize, mode: FeatureMode) -> Self {
        Self { d, h, hp, k, mode, init_std: DEFAULT_FEATURE_INIT_STD, teacher: TeacherLaw::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.h == 0 || self.hp == 0 || self.k == 0 {
            return Err(LabError::config("feature net sizes must be positive"));
        }
        if !(self.init_std >= 0.0 && self.init_std.is_finite()) {
            return Err(LabError::config("init_std must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Ground truth `f*(x) = U σ(A* x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Teacher {
    pub d: usize,
    pub h: usize,
    pub k: usize,
    /// h×d, rows on the unit sphere.
    pub a_star: Vec<f64>,
    /// k×h, row m is u_m; under [`TeacherLaw::Resampled`] this is `E[U]`.
    pub u: Vec<f64>,
    /// The mean of each row of `U`, each of norm √h.
    pub mus: Vec<Vec<f64>>,
    pub law: TeacherLaw,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNetParams<T> {
    pub d: usize,
    pub hp: usize,
    pub k: usize,
    /// hp×d
    pub w: Vec<T>,
    /// k×hp
    pub v: Vec<T>,
}

fn sphere(rng: &mut impl Rng, dim: usize, radius: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|a| a * radius / norm).collect();
        }
    }
}

impl Teacher {
    pub fn sample(cfg: &FeatureNetConfig, root: RngState) -> Result<Self> {
        cfg.validate()?;
        let (d, h, k) = (cfg.d, cfg.h, cfg.k);
        let mut rng = root.for_purpose(Purpose::Teacher, 0, 0).rng();
        let mut a_star = Vec::with_capacity(h * d);
        for _ in 0..h {
            a_star.extend(sphere(&mut rng, d, 1.0));
        }
        let radius = (h as f64).sqrt();
        let drawn: Vec<Vec<f64>> = (0..k).map(|_| sphere(&mut rng, h, radius)).collect();
        let mus = match cfg.mode {
            FeatureMode::Multi => drawn,
            FeatureMode::Single => vec![drawn[0].clone(); k],
        };
        let mut u = Vec::with_capacity(k * h);
        for mu in &mus {
            for &c in mu {
                let z: f64 = rng.sample(StandardNormal);
                u.push(c + z);
            }
        }
        if cfg.teacher == TeacherLaw::Resampled {
            u = mus.concat();
        }
        Ok(Teacher { d, h, k, a_star, u, mus, law: cfg.teacher })
    }

    /// Hidden activations `σ(A* x)`, rows×h.
    pub fn hidden(&self, xs: &[f64], rows: usize) -> Vec<f64> {
        let mut z = vec![0.0; rows * self.h];
        matmul_nt(rows, self.d, self.h, xs, &self.a_star, &mut z, false);
        z.iter_mut().for_each(|v| *v = sigmoid(*v));
        z
    }

    /// Noise-free teacher outputs `U σ(A* x)` for `rows` stacked inputs, rows×k.
    pub fn targets(&self, xs: &[f64], rows: usize) -> Vec<f64> {
        let z = self.hidden(xs, rows);
        let mut y = vec![0.0; rows * self.k];
        matmul_nt(rows, self.h, self.k, &z, &self.u, &mut y, false);
        y
    }

    /// Training labels and their noise-free part. With a fresh `u_m = μ_m + ε_m` per
    /// example, `ε_mᵀ z ~ N(0, |z|²)` independently over m, so the label noise is drawn
    /// directly at that scale.
    pub fn sample_labels(&self, xs: &[f64], rows: usize, rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let z = self.hidden(xs, rows);
        let mut clean = vec![0.0; rows * self.k];
        matmul_nt(rows, self.h, self.k, &z, &self.u, &mut clean, false);
        let mut noisy = clean.clone();
        if self.law == TeacherLaw::Resampled {
            for (r, out) in noisy.chunks_mut(self.k).enumerate() {
                let scale = z[r * self.h..(r + 1) * self.h].iter().map(|v| v * v).sum::<f64>().sqrt();
                for y in out {
                    *y += scale * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        (noisy, clean)
    }
}

pub fn sigmoid<T: Real>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

impl<T: Real> FeatureNetParams<T> {
    pub fn init(cfg: &FeatureNetConfig, root: RngState) -> Result<Self> {
        cfg.validate()?;
        let mut rng = root.for_purpose(Purpose::Init, 0, 0).rng();
        let normal = Normal::new(0.0, cfg.init_std).map_err(|e| LabError::config(e.to_string()))?;
        let w = (0..cfg.hp * cfg.d).map(|_| T::of(normal.sample(&mut rng))).collect();
        let v = (0..cfg.k * cfg.hp).map(|_| T::of(normal.sample(&mut rng))).collect();
        Ok(Self { d: cfg.d, hp: cfg.hp, k: cfg.k, w, v })
    }

    /// A student that reproduces the teacher exactly (requires h' = h).
    pub fn from_teacher(t: &Teacher) -> Self {
        Self {
            d: t.d,
            hp: t.h,
            k: t.k,
            w: t.a_star.iter().map(|&v| T::of(v)).collect(),
            v: t.u.iter().map(|&v| T::of(v)).collect(),
        }
    }

    pub fn flat(&self) -> Vec<T> {
        self.w.iter().chain(&self.v).copied().collect()
    }

    pub fn set_flat(&mut self, flat: &[T]) {
        let nw = self.w.len();
        self.w.copy_from_slice(&flat[..nw]);
        self.v.copy_from_slice(&flat[nw..]);
    }

    pub fn len(&self) -> usize {
        self.w.len() + self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Real>(&self) -> FeatureNetParams<U> {
        FeatureNetParams {
            d: self.d,
            hp: self.hp,
            k: self.k,
            w: self.w.iter().map(|v| U::of(v.f64())).collect(),
            v: self.v.iter().map(|v| U::of(v.f64())).collect(),
        }
    }
}

/// Student outputs `V σ(W x)` for one input.
pub fn forward_featurenet<T: Real>(p: &FeatureNetParams<T>, x: &[T]) -> Vec<T> {
    let mut s = vec![T::zero(); p.hp];
    matmul_nt(1, p.d, p.hp, x, &p.w, &mut s, false);
    s.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut out = vec![T::zero(); p.k];
    matmul_nt(1, p.hp, p.k, &s, &p.v, &mut out, false);
    out
}

/// Teacher outputs `U σ(A* x)` for one input.
pub fn true_featurenet(t: &Teacher, x: &[f64]) -> Vec<f64> {
    t.targets(x, 1)
}

/// Gradients of the feature-net loss, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrads<T> {
    pub w: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Real> FeatureGrads<T> {
    pub fn flat(&self) -> Vec<T> {
        self.w.iter().chain(&self.v).copied().collect()
    }
}

/// `L = Σ_m mean_rows (v_mᵀσ(W x) − y_m)²` over a batch of `rows` inputs, with gradients.
pub fn featurenet_loss_grad<T: Real>(p: &FeatureNetParams<T>, xs: &[T], ys: &[T], rows: usize) -> Result<(f64, FeatureGrads<T>)> {
    featurenet_loss_grad_against(p, xs, ys, ys, rows).map(|(loss, _, g)| (loss, g))
}

/// As [`featurenet_loss_grad`], also returning the loss against `reference` targets
/// from the same forward pass. The gradient is that of the loss against `ys`.
pub fn featurenet_loss_grad_against<T: Real>(
    p: &FeatureNetParams<T>,
    xs: &[T],
    ys: &[T],
    reference: &[T],
    rows: usize,
) -> Result<(f64, f64, FeatureGrads<T>)> {
    let (d, hp, k) = (p.d, p.hp, p.k);
    if xs.len() != rows * d || ys.len() != rows * k || reference.len() != rows * k {
        return Err(LabError::usage("feature batch shape mismatch"));
    }
    let mut s = vec![T::zero(); rows * hp];
    matmul_nt(rows, d, hp, xs, &p.w, &mut s, false);
    s.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut r = vec![T::zero(); rows * k];
    matmul_nt(rows, hp, k, &s, &p.v, &mut r, false);
    let (mut loss, mut ref_loss) = (0.0, 0.0);
    let scale = T::of(2.0 / rows as f64);
    for ((ri, &y), &c) in r.iter_mut().zip(ys).zip(reference) {
        let e = (*ri - c).f64();
        ref_loss += e * e;
        *ri -= y;
        loss += ri.f64() * ri.f64();
        *ri *= scale;
    }
    loss /= rows as f64;
    ref_loss /= rows as f64;
    // r now holds dL/d(pred)
    let mut gv = vec![T::zero(); k * hp];
    matmul_tn(k, rows, hp, &r, &s, &mut gv, false);
    let mut dz = vec![T::zero(); rows * hp];
    matmul(rows, k, hp, &r, &p.v, &mut dz, false);
    for (dzi, &si) in dz.iter_mut().zip(&s) {
        *dzi *= si * (T::one() - si);
    }
    let mut gw = vec![T::zero(); hp * d];
    matmul_tn(hp, rows, d, &dz, xs, &mut gw, false);
    if !loss.is_finite() || !all_finite(&gw) || !all_finite(&gv) {
        return Err(LabError::numeric("feature net", "non-finite loss or gradient"));
    }
    Ok((loss, ref_loss, FeatureGrads { w: gw, v: gv }))
}
