//! Two-stream trajectory/instruction encoder and compatibility scorer.
//!
//! ```text
//! h_v = normalize( mean_k tanh(W_v f_k + b_v) )
//! h_L = normalize( mean_t tanh(W_l E[l_t] + b_l) )
//! s   = w_2 . tanh(W_1 (h_v * h_L) + b_1) + b_2
//! ```
//!
//! `normalize(z)` is `z / |z|` when `|z| > NORM_EPS` and `z` otherwise.
//! Gradients are derived by hand; `backward` replays a cached forward pass.

use std::ops::{Deref, DerefMut};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::world::{Instruction, Trajectory};

pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderDims {
    pub frame_dim: usize,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub scorer_dim: usize,
    pub token_dim: usize,
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("frame_dim", self.frame_dim),
            ("vocab_size", self.vocab_size),
            ("hidden_dim", self.hidden_dim),
            ("scorer_dim", self.scorer_dim),
            ("token_dim", self.token_dim),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        Ok(())
    }

    pub fn n_params(&self) -> usize {
        TENSOR_NAMES
            .iter()
            .map(|n| self.tensor_len(n))
            .sum()
    }

    fn tensor_len(&self, name: &str) -> usize {
        let (f, v, h, m, e) = (
            self.frame_dim,
            self.vocab_size,
            self.hidden_dim,
            self.scorer_dim,
            self.token_dim,
        );
        match name {
            "w_v" => h * f,
            "b_v" => h,
            "token_table" => v * e,
            "w_l" => h * e,
            "b_l" => h,
            "w_1" => m * h,
            "b_1" => m,
            "w_2" => m,
            "b_2" => 1,
            _ => unreachable!("unknown tensor {name}"),
        }
    }
}

/// Tensor order used by `tensors()`, checkpoints and the FFI.
pub const TENSOR_NAMES: [&str; 9] = [
    "w_v",
    "b_v",
    "token_table",
    "w_l",
    "b_l",
    "w_1",
    "b_1",
    "w_2",
    "b_2",
];

/// All learnable tensors. Matrices are row-major `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub w_v: Vec<f64>,
    pub b_v: Vec<f64>,
    pub token_table: Vec<f64>,
    pub w_l: Vec<f64>,
    pub b_l: Vec<f64>,
    pub w_1: Vec<f64>,
    pub b_1: Vec<f64>,
    pub w_2: Vec<f64>,
    /// Scalar bias, stored as a length-1 tensor.
    pub b_2: Vec<f64>,
}

impl EncoderParams {
    pub fn zeros(dims: EncoderDims) -> Self {
        let z = |n: &str| vec![0.0; dims.tensor_len(n)];
        Self {
            dims,
            w_v: z("w_v"),
            b_v: z("b_v"),
            token_table: z("token_table"),
            w_l: z("w_l"),
            b_l: z("b_l"),
            w_1: z("w_1"),
            b_1: z("b_1"),
            w_2: z("w_2"),
            b_2: z("b_2"),
        }
    }

    /// Glorot-uniform weight matrices, zero biases; the token table is
    /// uniform(-0.1, 0.1).
    pub fn init(dims: EncoderDims, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let mut p = Self::zeros(dims);
        let glorot = |fan_in: usize, fan_out: usize| (6.0 / (fan_in + fan_out) as f64).sqrt();
        let (f, h, m, e) = (dims.frame_dim, dims.hidden_dim, dims.scorer_dim, dims.token_dim);
        let scales = [
            (&mut p.w_v, glorot(f, h)),
            (&mut p.token_table, 0.1),
            (&mut p.w_l, glorot(e, h)),
            (&mut p.w_1, glorot(h, m)),
            (&mut p.w_2, glorot(m, 1)),
        ];
        for (t, a) in scales {
            for x in t.iter_mut() {
                *x = rng.random_range(-a..a);
            }
        }
        Ok(p)
    }

    pub fn b2(&self) -> f64 {
        self.b_2[0]
    }

    pub fn tensors(&self) -> [&[f64]; 9] {
        [
            &self.w_v,
            &self.b_v,
            &self.token_table,
            &self.w_l,
            &self.b_l,
            &self.w_1,
            &self.b_1,
            &self.w_2,
            &self.b_2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 9] {
        [
            &mut self.w_v,
            &mut self.b_v,
            &mut self.token_table,
            &mut self.w_l,
            &mut self.b_l,
            &mut self.w_1,
            &mut self.b_1,
            &mut self.w_2,
            &mut self.b_2,
        ]
    }

    /// All parameters concatenated in `TENSOR_NAMES` order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn from_flat(dims: EncoderDims, flat: &[f64]) -> Result<Self> {
        if flat.len() != dims.n_params() {
            return Err(Error::Load(format!(
                "expected {} parameters, found {}",
                dims.n_params(),
                flat.len()
            )));
        }
        let mut p = Self::zeros(dims);
        let mut offset = 0;
        for t in p.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(p)
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }
}

/// Same shapes as `EncoderParams`, one entry per learnable scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub EncoderParams);

impl Gradients {
    pub fn zeros(dims: EncoderDims) -> Self {
        Gradients(EncoderParams::zeros(dims))
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.0.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }
}

impl Deref for Gradients {
    type Target = EncoderParams;
    fn deref(&self) -> &EncoderParams {
        &self.0
    }
}

impl DerefMut for Gradients {
    fn deref_mut(&mut self) -> &mut EncoderParams {
        &mut self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    pub values: Vec<f64>,
}

impl Embedding {
    pub fn norm(&self) -> f64 {
        l2(&self.values)
    }

    pub fn distance(&self, other: &Embedding) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }
}

fn l2(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn normalize(z: &[f64]) -> (Vec<f64>, f64) {
    let n = l2(z);
    if n > NORM_EPS {
        (z.iter().map(|x| x / n).collect(), n)
    } else {
        (z.to_vec(), n)
    }
}

/// `y += W x` for row-major `W` of shape `y.len() x x.len()`.
fn matvec_add(w: &[f64], x: &[f64], y: &mut [f64]) {
    let cols = x.len();
    for (row, yi) in w.chunks_exact(cols).zip(y.iter_mut()) {
        *yi += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// Cached activations of one mean-pooled tanh stream.
#[derive(Debug, Clone)]
struct StreamCache {
    /// `n_items x hidden` tanh outputs.
    acts: Vec<f64>,
    n_items: usize,
    norm: f64,
}

fn stream_forward<'a>(
    w: &[f64],
    b: &[f64],
    inputs: impl ExactSizeIterator<Item = &'a [f64]>,
) -> (Embedding, StreamCache) {
    let h = b.len();
    let n_items = inputs.len();
    let mut acts = Vec::with_capacity(n_items * h);
    let mut z = vec![0.0; h];
    for x in inputs {
        let mut pre = b.to_vec();
        matvec_add(w, x, &mut pre);
        for (zi, p) in z.iter_mut().zip(&pre) {
            let a = p.tanh();
            acts.push(a);
            *zi += a;
        }
    }
    let inv = 1.0 / n_items as f64;
    z.iter_mut().for_each(|zi| *zi *= inv);
    let (values, norm) = normalize(&z);
    (Embedding { values }, StreamCache { acts, n_items, norm })
}

/// Gradient w.r.t. the pooled pre-normalization vector `z`.
fn normalize_backward(h: &[f64], norm: f64, dh: &[f64]) -> Vec<f64> {
    if norm > NORM_EPS {
        let dot: f64 = h.iter().zip(dh).map(|(a, b)| a * b).sum();
        h.iter().zip(dh).map(|(hi, di)| (di - hi * dot) / norm).collect()
    } else {
        dh.to_vec()
    }
}

/// Per-item pre-activation gradients of a stream, `n_items x hidden`.
fn stream_backward(emb: &Embedding, cache: &StreamCache, dh: &[f64]) -> Vec<f64> {
    let hdim = emb.values.len();
    let dz = normalize_backward(&emb.values, cache.norm, dh);
    let inv = 1.0 / cache.n_items as f64;
    cache
        .acts
        .chunks_exact(hdim)
        .flat_map(|a| {
            a.iter()
                .zip(&dz)
                .map(move |(ai, dzi)| dzi * inv * (1.0 - ai * ai))
        })
        .collect()
}

fn check_trajectory(params: &EncoderParams, traj: &Trajectory) -> Result<()> {
    if traj.frames.is_empty() {
        return Err(Error::Usage("trajectory has no frames".into()));
    }
    for f in &traj.frames {
        if f.features.len() != params.dims.frame_dim {
            return Err(Error::Usage(format!(
                "frame has {} features, encoder expects {}",
                f.features.len(),
                params.dims.frame_dim
            )));
        }
        if f.features.iter().any(|x| !x.is_finite()) {
            return Err(Error::Numeric("non-finite frame feature".into()));
        }
    }
    Ok(())
}

fn check_instruction(params: &EncoderParams, instr: &Instruction) -> Result<()> {
    if instr.tokens.is_empty() {
        return Err(Error::Usage("instruction has no tokens".into()));
    }
    if let Some(&t) = instr
        .tokens
        .iter()
        .find(|&&t| t as usize >= params.dims.vocab_size)
    {
        return Err(Error::Index(format!(
            "token {t} outside vocabulary of size {}",
            params.dims.vocab_size
        )));
    }
    Ok(())
}

fn token_rows<'a>(params: &'a EncoderParams, instr: &'a Instruction) -> impl ExactSizeIterator<Item = &'a [f64]> {
    let e = params.dims.token_dim;
    instr
        .tokens
        .iter()
        .map(move |&t| &params.token_table[t as usize * e..(t as usize + 1) * e])
}

fn encode_trajectory_cached(params: &EncoderParams, traj: &Trajectory) -> Result<(Embedding, StreamCache)> {
    check_trajectory(params, traj)?;
    Ok(stream_forward(
        &params.w_v,
        &params.b_v,
        traj.frames.iter().map(|f| f.features.as_slice()),
    ))
}

fn encode_instruction_cached(params: &EncoderParams, instr: &Instruction) -> Result<(Embedding, StreamCache)> {
    check_instruction(params, instr)?;
    Ok(stream_forward(&params.w_l, &params.b_l, token_rows(params, instr)))
}

pub fn encode_trajectory(params: &EncoderParams, traj: &Trajectory) -> Result<Embedding> {
    encode_trajectory_cached(params, traj).map(|(e, _)| e)
}

pub fn encode_instruction(params: &EncoderParams, instr: &Instruction) -> Result<Embedding> {
    encode_instruction_cached(params, instr).map(|(e, _)| e)
}

fn scorer_hidden(params: &EncoderParams, h_v: &Embedding, h_l: &Embedding) -> Result<(Vec<f64>, Vec<f64>)> {
    let h = params.dims.hidden_dim;
    if h_v.values.len() != h || h_l.values.len() != h {
        return Err(Error::Usage(format!("embeddings must have length {h}")));
    }
    let prod: Vec<f64> = h_v.values.iter().zip(&h_l.values).map(|(a, b)| a * b).collect();
    let mut u = params.b_1.clone();
    matvec_add(&params.w_1, &prod, &mut u);
    u.iter_mut().for_each(|x| *x = x.tanh());
    Ok((prod, u))
}

/// Compatibility score of a trajectory embedding with an instruction embedding.
pub fn score(params: &EncoderParams, h_v: &Embedding, h_l: &Embedding) -> Result<f64> {
    let (_, u) = scorer_hidden(params, h_v, h_l)?;
    Ok(params.w_2.iter().zip(&u).map(|(a, b)| a * b).sum::<f64>() + params.b2())
}

#[derive(Debug, Clone)]
struct CandidateCache {
    h_v: Embedding,
    stream: StreamCache,
    prod: Vec<f64>,
    hidden: Vec<f64>,
}

/// Forward pass of one instruction against a list of candidate trajectories,
/// with everything `backward` needs.
#[derive(Debug, Clone)]
pub struct EpisodeForward {
    dims: EncoderDims,
    instruction: Instruction,
    h_l: Embedding,
    instr_cache: StreamCache,
    frames: Vec<Vec<Vec<f64>>>,
    candidates: Vec<CandidateCache>,
    pub scores: Vec<f64>,
}

impl EpisodeForward {
    pub fn run(params: &EncoderParams, instr: &Instruction, candidates: &[&Trajectory]) -> Result<Self> {
        let (h_l, instr_cache) = encode_instruction_cached(params, instr)?;
        let mut caches = Vec::with_capacity(candidates.len());
        let mut scores = Vec::with_capacity(candidates.len());
        for traj in candidates {
            let (h_v, stream) = encode_trajectory_cached(params, traj)?;
            let (prod, hidden) = scorer_hidden(params, &h_v, &h_l)?;
            let s = params.w_2.iter().zip(&hidden).map(|(a, b)| a * b).sum::<f64>() + params.b2();
            scores.push(s);
            caches.push(CandidateCache { h_v, stream, prod, hidden });
        }
        Ok(Self {
            dims: params.dims,
            instruction: instr.clone(),
            h_l,
            instr_cache,
            frames: candidates
                .iter()
                .map(|t| t.frames.iter().map(|f| f.features.clone()).collect())
                .collect(),
            candidates: caches,
            scores,
        })
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn trajectory_embedding(&self, i: usize) -> &Embedding {
        &self.candidates[i].h_v
    }

    pub fn instruction_embedding(&self) -> &Embedding {
        &self.h_l
    }
}

/// Adds the gradient of a loss with `d loss / d score_i = upstream[i]` into `grads`.
pub fn accumulate_backward(
    params: &EncoderParams,
    fwd: &EpisodeForward,
    upstream: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    if fwd.dims != params.dims || grads.dims != params.dims {
        return Err(Error::Usage("forward cache was built for different encoder dims".into()));
    }
    if upstream.len() != fwd.len() {
        return Err(Error::Usage(format!(
            "{} upstream gradients for {} cached candidates",
            upstream.len(),
            fwd.len()
        )));
    }
    let d = params.dims;
    let (h, m, e) = (d.hidden_dim, d.scorer_dim, d.token_dim);
    let mut dh_l = vec![0.0; h];

    for ((cand, frames), &g) in fwd.candidates.iter().zip(&fwd.frames).zip(upstream) {
        grads.b_2[0] += g;
        let mut da = vec![0.0; m];
        for j in 0..m {
            grads.w_2[j] += g * cand.hidden[j];
            da[j] = g * params.w_2[j] * (1.0 - cand.hidden[j] * cand.hidden[j]);
        }
        let mut dprod = vec![0.0; h];
        for j in 0..m {
            grads.b_1[j] += da[j];
            let row = &params.w_1[j * h..(j + 1) * h];
            let grow = &mut grads.w_1[j * h..(j + 1) * h];
            for i in 0..h {
                grow[i] += da[j] * cand.prod[i];
                dprod[i] += row[i] * da[j];
            }
        }
        let dh_v: Vec<f64> = dprod.iter().zip(&fwd.h_l.values).map(|(a, b)| a * b).collect();
        for i in 0..h {
            dh_l[i] += dprod[i] * cand.h_v.values[i];
        }

        let dpre = stream_backward(&cand.h_v, &cand.stream, &dh_v);
        let fdim = d.frame_dim;
        for (dp, x) in dpre.chunks_exact(h).zip(frames) {
            for i in 0..h {
                grads.b_v[i] += dp[i];
                let grow = &mut grads.w_v[i * fdim..(i + 1) * fdim];
                for (gw, xi) in grow.iter_mut().zip(x) {
                    *gw += dp[i] * xi;
                }
            }
        }
    }

    let dpre = stream_backward(&fwd.h_l, &fwd.instr_cache, &dh_l);
    for (dp, &tok) in dpre.chunks_exact(h).zip(&fwd.instruction.tokens) {
        let t = tok as usize;
        let row = &params.token_table[t * e..(t + 1) * e];
        for i in 0..h {
            grads.b_l[i] += dp[i];
            let wrow = &params.w_l[i * e..(i + 1) * e];
            let gwrow = &mut grads.w_l[i * e..(i + 1) * e];
            for c in 0..e {
                gwrow[c] += dp[i] * row[c];
            }
            let grow = &mut grads.token_table[t * e..(t + 1) * e];
            for c in 0..e {
                grow[c] += wrow[c] * dp[i];
            }
        }
    }
    Ok(())
}

/// Exact gradients of `sum_b sum_i upstream[b][i] * score_{b,i}`, accumulated
/// in batch order.
pub fn backward(params: &EncoderParams, batch: &[EpisodeForward], upstream: &[Vec<f64>]) -> Result<Gradients> {
    if batch.len() != upstream.len() {
        return Err(Error::Usage("one upstream vector per cached episode required".into()));
    }
    let mut grads = Gradients::zeros(params.dims);
    for (fwd, up) in batch.iter().zip(upstream) {
        accumulate_backward(params, fwd, up, &mut grads)?;
    }
    Ok(grads)
}

/// Plain SGD, `p - lr * g`. A zero learning rate returns the parameters unchanged.
pub fn sgd_step(params: &EncoderParams, grads: &Gradients, lr: f64) -> Result<EncoderParams> {
    if !(lr.is_finite() && lr >= 0.0) {
        return Err(Error::config("lr", "must be finite and non-negative"));
    }
    if grads.dims != params.dims {
        return Err(Error::Usage("gradient shapes do not match parameters".into()));
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    let mut out = params.clone();
    for (p, g) in out.tensors_mut().into_iter().zip(grads.tensors()) {
        for (pi, gi) in p.iter_mut().zip(g) {
            *pi -= lr * gi;
        }
    }
    Ok(out)
}
