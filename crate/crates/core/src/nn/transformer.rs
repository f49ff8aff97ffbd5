//! Decoder-only transformer over real-valued tokens.
//!
//! Pre-LN residual blocks, GELU MLP of width 4×embed, causal attention with a learned
//! per-head additive bias on the clipped relative distance. Predictions are read at the
//! x-token positions. Parameters live in one flat buffer addressed by named segments so
//! that gradients, Adam moments and checkpoints share a single layout.

use std::sync::Arc;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::linalg::{add_bias, all_finite, col_sums_into, matmul, matmul_nt, matmul_tn, Real};
use super::loss::TaskHead;
use crate::error::{LabError, Result};
use crate::exec::Exec;
use crate::rng::LabRng;
use crate::taskgen::PromptSequence;

/// Relative distances beyond this share one bias entry.
pub const REL_CLIP: usize = 128;
pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;
/// Sequences per forward/backward work unit. Gradients are reduced chunk by chunk in order.
pub const CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Paper,
    Toy,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub embed: usize,
    pub heads: usize,
    pub input_dim: usize,
    pub max_tokens: usize,
    pub profile: Profile,
}

impl TransformerConfig {
    /// 12 layers, embedding 256, 8 heads.
    pub fn paper(input_dim: usize, n: usize) -> Self {
        Self { layers: 12, embed: 256, heads: 8, input_dim, max_tokens: 2 * n, profile: Profile::Paper }
    }

    /// 4 layers, embedding 64, 4 heads.
    pub fn toy(input_dim: usize, n: usize) -> Self {
        Self { layers: 4, embed: 64, heads: 4, input_dim, max_tokens: 2 * n, profile: Profile::Toy }
    }

    pub fn custom(layers: usize, embed: usize, heads: usize, input_dim: usize, n: usize) -> Self {
        Self { layers, embed, heads, input_dim, max_tokens: 2 * n, profile: Profile::Custom }
    }

    pub fn for_profile(profile: Profile, input_dim: usize, n: usize) -> Result<Self> {
        match profile {
            Profile::Paper => Ok(Self::paper(input_dim, n)),
            Profile::Toy => Ok(Self::toy(input_dim, n)),
            Profile::Custom => Err(LabError::config("custom profile needs explicit layers/embed/heads")),
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.embed == 0 || self.heads == 0 || self.input_dim == 0 || self.max_tokens == 0 {
            return Err(LabError::config("transformer sizes must be positive"));
        }
        if self.embed % self.heads != 0 {
            return Err(LabError::config(format!(
                "embed {} is not divisible by heads {}",
                self.embed, self.heads
            )));
        }
        Ok(())
    }

    pub fn layout(&self) -> Layout {
        Layout::new(self)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SegmentKind {
    /// Gaussian init.
    Weight,
    /// Zero init.
    Bias,
    /// Layer-norm gain, initialized to one.
    Gain,
    /// Output head, zero init so the initial prediction is exactly 0.
    Head,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
    pub kind: SegmentKind,
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct LayerIdx {
    ln1_g: usize,
    ln1_b: usize,
    qkv_w: usize,
    qkv_b: usize,
    o_w: usize,
    o_b: usize,
    rel: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc_w: usize,
    fc_b: usize,
    proj_w: usize,
    proj_b: usize,
}

/// Offsets of every named tensor inside the flat parameter buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub segments: Vec<Segment>,
    pub total: usize,
    in_w: usize,
    in_b: usize,
    layers: Vec<LayerIdx>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

impl Layout {
    fn new(cfg: &TransformerConfig) -> Self {
        let mut segments = Vec::new();
        let mut total = 0;
        let mut push = |name: String, shape: Vec<usize>, kind: SegmentKind| {
            let len = shape.iter().product();
            let offset = total;
            segments.push(Segment { name, shape, offset, len, kind });
            total += len;
            offset
        };
        let (d, e, h) = (cfg.input_dim, cfg.embed, cfg.heads);
        let in_w = push("in.w".into(), vec![d, e], SegmentKind::Weight);
        let in_b = push("in.b".into(), vec![e], SegmentKind::Bias);
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = |s: &str| format!("l{l}.{s}");
            layers.push(LayerIdx {
                ln1_g: push(p("ln1.g"), vec![e], SegmentKind::Gain),
                ln1_b: push(p("ln1.b"), vec![e], SegmentKind::Bias),
                qkv_w: push(p("attn.qkv.w"), vec![e, 3 * e], SegmentKind::Weight),
                qkv_b: push(p("attn.qkv.b"), vec![3 * e], SegmentKind::Bias),
                o_w: push(p("attn.o.w"), vec![e, e], SegmentKind::Weight),
                o_b: push(p("attn.o.b"), vec![e], SegmentKind::Bias),
                rel: push(p("attn.rel"), vec![h, REL_CLIP + 1], SegmentKind::Bias),
                ln2_g: push(p("ln2.g"), vec![e], SegmentKind::Gain),
                ln2_b: push(p("ln2.b"), vec![e], SegmentKind::Bias),
                fc_w: push(p("mlp.fc.w"), vec![e, 4 * e], SegmentKind::Weight),
                fc_b: push(p("mlp.fc.b"), vec![4 * e], SegmentKind::Bias),
                proj_w: push(p("mlp.proj.w"), vec![4 * e, e], SegmentKind::Weight),
                proj_b: push(p("mlp.proj.b"), vec![e], SegmentKind::Bias),
            });
        }
        let lnf_g = push("lnf.g".into(), vec![e], SegmentKind::Gain);
        let lnf_b = push("lnf.b".into(), vec![e], SegmentKind::Bias);
        let out_w = push("out.w".into(), vec![e, 1], SegmentKind::Head);
        let out_b = push("out.b".into(), vec![1], SegmentKind::Head);
        Layout { segments, total, in_w, in_b, layers, lnf_g, lnf_b, out_w, out_b }
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }
}

/// Transformer weights in one flat buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub config: TransformerConfig,
    pub layout: Arc<Layout>,
    pub data: Vec<T>,
}

impl<T: Real> ModelParams<T> {
    pub fn zeros(config: &TransformerConfig) -> Result<Self> {
        config.validate()?;
        let layout = Arc::new(config.layout());
        let data = vec![T::zero(); layout.total];
        Ok(Self { config: config.clone(), layout, data })
    }

    /// Weights ~ N(0, 0.02²), biases and the output head 0, layer-norm gains 1.
    pub fn init(config: &TransformerConfig, rng: &mut LabRng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        for seg in p.layout.clone().segments.iter() {
            let dst = &mut p.data[seg.offset..seg.offset + seg.len];
            match seg.kind {
                SegmentKind::Weight => dst.iter_mut().for_each(|v| *v = T::of(normal.sample(rng))),
                SegmentKind::Gain => dst.iter_mut().for_each(|v| *v = T::one()),
                SegmentKind::Bias | SegmentKind::Head => {}
            }
        }
        Ok(p)
    }

    /// Rebuilds parameters from a flat buffer, e.g. one read from a checkpoint.
    pub fn from_flat(config: &TransformerConfig, data: Vec<T>) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        if data.len() != p.data.len() {
            return Err(LabError::config(format!(
                "parameter count {} does not match architecture ({})",
                data.len(),
                p.data.len()
            )));
        }
        p.data = data;
        Ok(p)
    }

    /// Adds N(0, std²) noise to every coordinate, including heads and biases.
    /// Used to move gradient checks away from the degenerate zero-head start.
    pub fn perturb(&mut self, std: f64, rng: &mut LabRng) {
        let normal = Normal::new(0.0, std).expect("valid std");
        for v in self.data.iter_mut() {
            *v += T::of(normal.sample(rng));
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn segment(&self, name: &str) -> Option<&[T]> {
        self.layout.segment(name).map(|s| &self.data[s.offset..s.offset + s.len])
    }

    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        ModelParams {
            config: self.config.clone(),
            layout: self.layout.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        all_finite(&self.data)
    }
}

/// A prompt laid out as 2n tokens of width d: x₁, (y₁,0,…,0), x₂, …
#[derive(Clone, Debug, PartialEq)]
pub struct TokenStream {
    pub dim: usize,
    pub data: Vec<f64>,
}

impl TokenStream {
    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn token_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }
}

pub fn embed_prompt(p: &PromptSequence) -> TokenStream {
    let d = p.dim;
    let mut data = vec![0.0; 2 * p.n() * d];
    for i in 0..p.n() {
        data[2 * i * d..(2 * i + 1) * d].copy_from_slice(p.x(i));
        data[(2 * i + 1) * d] = p.ys[i];
    }
    TokenStream { dim: d, data }
}

struct LnCache<T> {
    xhat: Vec<T>,
    rstd: Vec<T>,
}

struct LayerCache<T> {
    ln1: LnCache<T>,
    a: Vec<T>,
    qkv: Vec<T>,
    probs: Vec<T>,
    attn: Vec<T>,
    ln2: LnCache<T>,
    m: Vec<T>,
    u: Vec<T>,
    th: Vec<T>,
    g: Vec<T>,
}

struct ChunkCache<T> {
    seqs: usize,
    t: usize,
    x: Vec<T>,
    layers: Vec<LayerCache<T>>,
    lnf: LnCache<T>,
    hf: Vec<T>,
    out: Vec<T>,
}

fn layer_norm<T: Real>(x: &[T], g: &[T], b: &[T]) -> (Vec<T>, LnCache<T>) {
    let e = g.len();
    let rows = x.len() / e;
    let mut y = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let inv_e = T::of(1.0 / e as f64);
    let eps = T::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * e..(r + 1) * e];
        let mean = row.iter().fold(T::zero(), |s, &v| s + v) * inv_e;
        let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) * inv_e;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..e {
            let xh = (row[j] - mean) * rs;
            xhat[r * e + j] = xh;
            y[r * e + j] = xh * g[j] + b[j];
        }
    }
    (y, LnCache { xhat, rstd })
}

/// Returns dx and accumulates the gain and bias gradients.
fn layer_norm_backward<T: Real>(dy: &[T], cache: &LnCache<T>, g: &[T], dg: &mut [T], db: &mut [T]) -> Vec<T> {
    let e = g.len();
    let rows = dy.len() / e;
    let inv_e = T::of(1.0 / e as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dxhat = vec![T::zero(); e];
    for r in 0..rows {
        let dyr = &dy[r * e..(r + 1) * e];
        let xh = &cache.xhat[r * e..(r + 1) * e];
        let mut m1 = T::zero();
        let mut m2 = T::zero();
        for j in 0..e {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * g[j];
            m1 += dxhat[j];
            m2 += dxhat[j] * xh[j];
        }
        m1 *= inv_e;
        m2 *= inv_e;
        let rs = cache.rstd[r];
        for j in 0..e {
            dx[r * e + j] = rs * (dxhat[j] - m1 - xh[j] * m2);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; several times faster than the libm call and exact enough here.
fn tanh_fast<T: Real>(z: T) -> T {
    let two = T::of(2.0);
    T::one() - two / ((two * z).exp() + T::one())
}

/// Inner tanh of the GELU approximation, cached for the backward pass.
fn gelu_tanh<T: Real>(u: T) -> T {
    tanh_fast(T::of(GELU_C) * (u + T::of(GELU_A) * u * u * u))
}

fn gelu<T: Real>(u: T, th: T) -> T {
    T::of(0.5) * u * (T::one() + th)
}

fn gelu_grad<T: Real>(u: T, th: T) -> T {
    let half = T::of(0.5);
    let c = T::of(GELU_C);
    let a = T::of(GELU_A);
    half * (T::one() + th) + half * u * (T::one() - th * th) * c * (T::one() + T::of(3.0) * a * u * u)
}

/// Forward pass over `seqs` sequences of `t` tokens each, stacked row-wise in `x`.
fn forward_chunk<T: Real>(p: &ModelParams<T>, x: Vec<T>, seqs: usize, t: usize) -> Result<ChunkCache<T>> {
    let cfg = &p.config;
    let lay = &p.layout;
    let w = &p.data;
    let (d, e, nh) = (cfg.input_dim, cfg.embed, cfg.heads);
    let dh = cfg.head_dim();
    let rows = seqs * t;
    let scale = T::of(1.0 / (dh as f64).sqrt());

    let mut h = vec![T::zero(); rows * e];
    matmul(rows, d, e, &x, &w[lay.in_w..], &mut h, false);
    add_bias(&mut h, &w[lay.in_b..lay.in_b + e]);

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, li) in lay.layers.iter().enumerate() {
        let (a, ln1) = layer_norm(&h, &w[li.ln1_g..li.ln1_g + e], &w[li.ln1_b..li.ln1_b + e]);
        let mut qkv = vec![T::zero(); rows * 3 * e];
        matmul(rows, e, 3 * e, &a, &w[li.qkv_w..], &mut qkv, false);
        add_bias(&mut qkv, &w[li.qkv_b..li.qkv_b + 3 * e]);

        let mut probs = vec![T::zero(); seqs * nh * t * t];
        let mut attn = vec![T::zero(); rows * e];
        for s in 0..seqs {
            for hd in 0..nh {
                let base = s * t * 3 * e + hd * dh;
                let pm = &mut probs[(s * nh + hd) * t * t..(s * nh + hd + 1) * t * t];
                // scores = scale · Q Kᵀ
                T::gemm(t, dh, t, scale, &qkv[base..], 3 * e, 1, &qkv[base + e..], 1, 3 * e, T::zero(), pm, t, 1);
                let rel = &w[li.rel + hd * (REL_CLIP + 1)..li.rel + (hd + 1) * (REL_CLIP + 1)];
                for i in 0..t {
                    let row = &mut pm[i * t..(i + 1) * t];
                    let mut mx = T::neg_infinity();
                    for j in 0..=i {
                        row[j] += rel[(i - j).min(REL_CLIP)];
                        if row[j] > mx {
                            mx = row[j];
                        }
                    }
                    let mut sum = T::zero();
                    for v in row[..=i].iter_mut() {
                        *v = (*v - mx).exp();
                        sum += *v;
                    }
                    let inv = T::one() / sum;
                    for v in row[..=i].iter_mut() {
                        *v *= inv;
                    }
                    for v in row[i + 1..].iter_mut() {
                        *v = T::zero();
                    }
                }
                T::gemm(
                    t,
                    t,
                    dh,
                    T::one(),
                    pm,
                    t,
                    1,
                    &qkv[base + 2 * e..],
                    3 * e,
                    1,
                    T::zero(),
                    &mut attn[s * t * e + hd * dh..],
                    e,
                    1,
                );
            }
        }
        matmul(rows, e, e, &attn, &w[li.o_w..], &mut h, true);
        add_bias(&mut h, &w[li.o_b..li.o_b + e]);

        let (m, ln2) = layer_norm(&h, &w[li.ln2_g..li.ln2_g + e], &w[li.ln2_b..li.ln2_b + e]);
        let mut u = vec![T::zero(); rows * 4 * e];
        matmul(rows, e, 4 * e, &m, &w[li.fc_w..], &mut u, false);
        add_bias(&mut u, &w[li.fc_b..li.fc_b + 4 * e]);
        let th: Vec<T> = u.iter().map(|&v| gelu_tanh(v)).collect();
        let g: Vec<T> = u.iter().zip(&th).map(|(&v, &tv)| gelu(v, tv)).collect();
        matmul(rows, 4 * e, e, &g, &w[li.proj_w..], &mut h, true);
        add_bias(&mut h, &w[li.proj_b..li.proj_b + e]);

        if !all_finite(&h) {
            return Err(LabError::numeric(format!("layer {l}"), "non-finite activation"));
        }
        layers.push(LayerCache { ln1, a, qkv, probs, attn, ln2, m, u, th, g });
    }

    let (hf, lnf) = layer_norm(&h, &w[lay.lnf_g..lay.lnf_g + e], &w[lay.lnf_b..lay.lnf_b + e]);
    let mut out = vec![T::zero(); rows];
    matmul(rows, e, 1, &hf, &w[lay.out_w..], &mut out, false);
    add_bias(&mut out, &w[lay.out_b..lay.out_b + 1]);
    if !all_finite(&out) {
        return Err(LabError::numeric("output head", "non-finite prediction"));
    }
    Ok(ChunkCache { seqs, t, x, layers, lnf, hf, out })
}

/// Accumulates parameter gradients for one chunk given d(loss)/d(output) per row.
fn backward_chunk<T: Real>(p: &ModelParams<T>, cache: &ChunkCache<T>, dout: &[T], grad: &mut [T]) {
    let cfg = &p.config;
    let lay = &p.layout;
    let w = &p.data;
    let (d, e, nh) = (cfg.input_dim, cfg.embed, cfg.heads);
    let hw = cfg.head_dim();
    let (seqs, t) = (cache.seqs, cache.t);
    let rows = seqs * t;
    let scale = T::of(1.0 / (hw as f64).sqrt());

    matmul_tn(e, rows, 1, &cache.hf, dout, &mut grad[lay.out_w..lay.out_w + e], true);
    grad[lay.out_b] += dout.iter().fold(T::zero(), |s, &v| s + v);
    let mut dhf = vec![T::zero(); rows * e];
    for r in 0..rows {
        for j in 0..e {
            dhf[r * e + j] = dout[r] * w[lay.out_w + j];
        }
    }
    let (dg_f, db_f) = split_pair(grad, lay.lnf_g, lay.lnf_b, e);
    let mut dh = layer_norm_backward(&dhf, &cache.lnf, &w[lay.lnf_g..lay.lnf_g + e], dg_f, db_f);

    let mut dpm = vec![T::zero(); t * t];
    for (li, lc) in lay.layers.iter().zip(&cache.layers).rev() {
        // MLP block
        matmul_tn(4 * e, rows, e, &lc.g, &dh, &mut grad[li.proj_w..li.proj_w + 4 * e * e], true);
        col_sums_into(&dh, &mut grad[li.proj_b..li.proj_b + e]);
        let mut du = vec![T::zero(); rows * 4 * e];
        matmul_nt(rows, e, 4 * e, &dh, &w[li.proj_w..li.proj_w + 4 * e * e], &mut du, false);
        for ((dv, &uv), &tv) in du.iter_mut().zip(&lc.u).zip(&lc.th) {
            *dv *= gelu_grad(uv, tv);
        }
        matmul_tn(e, rows, 4 * e, &lc.m, &du, &mut grad[li.fc_w..li.fc_w + 4 * e * e], true);
        col_sums_into(&du, &mut grad[li.fc_b..li.fc_b + 4 * e]);
        let mut dm = vec![T::zero(); rows * e];
        matmul_nt(rows, 4 * e, e, &du, &w[li.fc_w..li.fc_w + 4 * e * e], &mut dm, false);
        let (dg2, db2) = split_pair(grad, li.ln2_g, li.ln2_b, e);
        let dx2 = layer_norm_backward(&dm, &lc.ln2, &w[li.ln2_g..li.ln2_g + e], dg2, db2);
        for (a, b) in dh.iter_mut().zip(&dx2) {
            *a += *b;
        }

        // attention block
        matmul_tn(e, rows, e, &lc.attn, &dh, &mut grad[li.o_w..li.o_w + e * e], true);
        col_sums_into(&dh, &mut grad[li.o_b..li.o_b + e]);
        let mut dattn = vec![T::zero(); rows * e];
        matmul_nt(rows, e, e, &dh, &w[li.o_w..li.o_w + e * e], &mut dattn, false);
        let mut dqkv = vec![T::zero(); rows * 3 * e];
        for s in 0..seqs {
            for hd in 0..nh {
                let base = s * t * 3 * e + hd * hw;
                let obase = s * t * e + hd * hw;
                let pm = &lc.probs[(s * nh + hd) * t * t..(s * nh + hd + 1) * t * t];
                // dP = dO Vᵀ
                T::gemm(
                    t,
                    hw,
                    t,
                    T::one(),
                    &dattn[obase..],
                    e,
                    1,
                    &lc.qkv[base + 2 * e..],
                    1,
                    3 * e,
                    T::zero(),
                    &mut dpm,
                    t,
                    1,
                );
                // dV = Pᵀ dO
                T::gemm(
                    t,
                    t,
                    hw,
                    T::one(),
                    pm,
                    1,
                    t,
                    &dattn[obase..],
                    e,
                    1,
                    T::one(),
                    &mut dqkv[base + 2 * e..],
                    3 * e,
                    1,
                );
                // softmax backward in place: dS = P ⊙ (dP − rowsum(P ⊙ dP))
                let rel_off = li.rel + hd * (REL_CLIP + 1);
                for i in 0..t {
                    let prow = &pm[i * t..(i + 1) * t];
                    let drow = &mut dpm[i * t..(i + 1) * t];
                    let dot = (0..=i).fold(T::zero(), |acc, j| acc + prow[j] * drow[j]);
                    for j in 0..=i {
                        let ds = prow[j] * (drow[j] - dot);
                        drow[j] = ds;
                        grad[rel_off + (i - j).min(REL_CLIP)] += ds;
                    }
                    for v in drow[i + 1..].iter_mut() {
                        *v = T::zero();
                    }
                }
                // dQ = scale · dS K ; dK = scale · dSᵀ Q
                T::gemm(
                    t,
                    t,
                    hw,
                    scale,
                    &dpm,
                    t,
                    1,
                    &lc.qkv[base + e..],
                    3 * e,
                    1,
                    T::one(),
                    &mut dqkv[base..],
                    3 * e,
                    1,
                );
                T::gemm(t, t, hw, scale, &dpm, 1, t, &lc.qkv[base..], 3 * e, 1, T::one(), &mut dqkv[base + e..], 3 * e, 1);
            }
        }
        matmul_tn(e, rows, 3 * e, &lc.a, &dqkv, &mut grad[li.qkv_w..li.qkv_w + 3 * e * e], true);
        col_sums_into(&dqkv, &mut grad[li.qkv_b..li.qkv_b + 3 * e]);
        let mut da = vec![T::zero(); rows * e];
        matmul_nt(rows, 3 * e, e, &dqkv, &w[li.qkv_w..li.qkv_w + 3 * e * e], &mut da, false);
        let (dg1, db1) = split_pair(grad, li.ln1_g, li.ln1_b, e);
        let dx1 = layer_norm_backward(&da, &lc.ln1, &w[li.ln1_g..li.ln1_g + e], dg1, db1);
        for (a, b) in dh.iter_mut().zip(&dx1) {
            *a += *b;
        }
    }

    matmul_tn(d, rows, e, &cache.x, &dh, &mut grad[lay.in_w..lay.in_w + d * e], true);
    col_sums_into(&dh, &mut grad[lay.in_b..lay.in_b + e]);
}

/// Two disjoint mutable windows of length `len` (gain first, bias right after it).
fn split_pair<T>(buf: &mut [T], a: usize, b: usize, len: usize) -> (&mut [T], &mut [T]) {
    debug_assert!(a + len <= b);
    let (lo, hi) = buf.split_at_mut(b);
    (&mut lo[a..a + len], &mut hi[..len])
}

fn stack_tokens<T: Real>(prompts: &[&PromptSequence]) -> Vec<T> {
    let mut x = Vec::new();
    for p in prompts {
        x.extend(embed_prompt(p).data.iter().map(|&v| T::of(v)));
    }
    x
}

fn check_tokens(cfg: &TransformerConfig, p: &PromptSequence) -> Result<()> {
    if p.dim != cfg.input_dim {
        return Err(LabError::usage(format!(
            "prompt dim {} does not match model input dim {}",
            p.dim, cfg.input_dim
        )));
    }
    if 2 * p.n() > cfg.max_tokens {
        return Err(LabError::usage(format!(
            "prompt has {} tokens, model accepts at most {}",
            2 * p.n(),
            cfg.max_tokens
        )));
    }
    Ok(())
}

/// Predictions at the n x-token positions of one token stream.
pub fn forward_transformer<T: Real>(params: &ModelParams<T>, tokens: &TokenStream) -> Result<Vec<T>> {
    let cfg = &params.config;
    if tokens.dim != cfg.input_dim {
        return Err(LabError::usage("token width does not match model input dim"));
    }
    let t = tokens.len();
    if t > cfg.max_tokens {
        return Err(LabError::usage(format!("{t} tokens exceed max_tokens {}", cfg.max_tokens)));
    }
    let x = tokens.data.iter().map(|&v| T::of(v)).collect();
    let cache = forward_chunk(params, x, 1, t)?;
    Ok((0..t).step_by(2).map(|r| cache.out[r]).collect())
}

/// Per-prompt predictions at every x-token position.
pub fn predict_batch<T: Real>(params: &ModelParams<T>, prompts: &[PromptSequence], exec: Exec) -> Result<Vec<Vec<f64>>> {
    for p in prompts {
        check_tokens(&params.config, p)?;
    }
    let chunks: Vec<&[PromptSequence]> = prompts.chunks(CHUNK).collect();
    let results = exec.map(chunks, |chunk| -> Result<Vec<Vec<f64>>> {
        let refs: Vec<&PromptSequence> = chunk.iter().collect();
        let t = uniform_len(&refs)?;
        let cache = forward_chunk(params, stack_tokens(&refs), refs.len(), t)?;
        Ok((0..refs.len())
            .map(|s| (0..t).step_by(2).map(|r| cache.out[s * t + r].f64()).collect())
            .collect())
    });
    let mut out = Vec::with_capacity(prompts.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

fn uniform_len(chunk: &[&PromptSequence]) -> Result<usize> {
    let n = chunk[0].n();
    if chunk.iter().any(|p| p.n() != n) {
        return Err(LabError::usage("prompts in one batch must share n"));
    }
    Ok(2 * n)
}

/// Mixture loss: `total = Σ_m c_m · components[m]`, each component the mean of ℓ over
/// that task's sequences and loss positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub components: Vec<f64>,
}

impl LossReport {
    /// Per-task normalized components `c_m · components[m]`.
    pub fn normalized(&self, c: &[f64]) -> Vec<f64> {
        self.components.iter().zip(c).map(|(a, b)| a * b).collect()
    }
}

struct ChunkResult<T> {
    loss_parts: Vec<f64>,
    grad: Option<Vec<T>>,
}

fn run_batch<T: Real>(
    params: &ModelParams<T>,
    prompts: &[PromptSequence],
    heads: &[TaskHead],
    c: &[f64],
    exec: Exec,
    with_grad: bool,
) -> Result<(LossReport, Option<Vec<T>>)> {
    if heads.len() != c.len() {
        return Err(LabError::usage("one normalization constant per task head is required"));
    }
    let mut per_task = vec![0usize; heads.len()];
    for p in prompts {
        check_tokens(&params.config, p)?;
        *per_task
            .get_mut(p.task_id)
            .ok_or_else(|| LabError::usage(format!("prompt task id {} has no head", p.task_id)))? += 1;
    }
    let chunks: Vec<&[PromptSequence]> = prompts.chunks(CHUNK).collect();
    let per_task = &per_task;
    let results = exec.map(chunks, |chunk| -> Result<ChunkResult<T>> {
        let refs: Vec<&PromptSequence> = chunk.iter().collect();
        let t = uniform_len(&refs)?;
        let cache = forward_chunk(params, stack_tokens(&refs), refs.len(), t)?;
        let mut loss_parts = vec![0.0; heads.len()];
        let mut dout = vec![T::zero(); refs.len() * t];
        for (s, p) in refs.iter().enumerate() {
            let head = heads[p.task_id];
            let n = p.n();
            let positions = if head.last_only { n - 1..n } else { 0..n };
            let denom = (per_task[p.task_id] * positions.len()) as f64;
            for i in positions {
                let r = s * t + 2 * i;
                let pred = cache.out[r].f64();
                let (l, dl) = head.loss.value_and_grad(pred, p.ys[i]);
                loss_parts[p.task_id] += l / denom;
                dout[r] = T::of(c[p.task_id] * dl / denom);
            }
        }
        let grad = if with_grad {
            let mut g = vec![T::zero(); params.len()];
            backward_chunk(params, &cache, &dout, &mut g);
            Some(g)
        } else {
            None
        };
        Ok(ChunkResult { loss_parts, grad })
    });

    let mut components = vec![0.0; heads.len()];
    let mut grad = with_grad.then(|| vec![T::zero(); params.len()]);
    for r in results {
        let r = r?;
        for (a, b) in components.iter_mut().zip(&r.loss_parts) {
            *a += b;
        }
        if let (Some(total), Some(g)) = (grad.as_mut(), r.grad) {
            for (a, b) in total.iter_mut().zip(&g) {
                *a += *b;
            }
        }
    }
    if let Some(g) = &grad {
        if !all_finite(g) {
            return Err(LabError::numeric("gradient", "non-finite gradient"));
        }
    }
    let total = components.iter().zip(c).map(|(a, b)| a * b).sum();
    Ok((LossReport { total, components }, grad))
}

pub fn sequence_loss<T: Real>(
    params: &ModelParams<T>,
    prompts: &[PromptSequence],
    heads: &[TaskHead],
    c: &[f64],
    exec: Exec,
) -> Result<LossReport> {
    Ok(run_batch(params, prompts, heads, c, exec, false)?.0)
}

/// Loss and its exact gradient with respect to every parameter.
pub fn backward<T: Real>(
    params: &ModelParams<T>,
    prompts: &[PromptSequence],
    heads: &[TaskHead],
    c: &[f64],
    exec: Exec,
) -> Result<(LossReport, Vec<T>)> {
    let (report, grad) = run_batch(params, prompts, heads, c, exec, true)?;
    Ok((report, grad.expect("gradient requested")))
}

/// Heads for the tasks of a mixture, in mixture order.
pub fn heads_for<'a>(tasks: impl Iterator<Item = &'a crate::taskgen::TaskSpec>) -> Vec<TaskHead> {
    tasks.map(TaskHead::for_task).collect()
}
