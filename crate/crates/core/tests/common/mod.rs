#![allow(dead_code)]

use fgmine::encoder::{backward, EncoderDims, EncoderParams, EpisodeForward};
use fgmine::ranking::{pr_loss, pr_loss_grad, ScoredEpisode};
use fgmine::rng::Rng;
use fgmine::world::{Frame, Instruction, Trajectory};
use rand::Rng as _;
use rand_distr::StandardNormal;

/// A random encoder and one ranking problem for it.
pub struct GradCase {
    pub params: EncoderParams,
    pub instruction: Instruction,
    pub candidates: Vec<Trajectory>,
}

pub fn random_case(rng: &mut Rng) -> GradCase {
    let dims = EncoderDims {
        frame_dim: rng.random_range(1..=5),
        vocab_size: rng.random_range(2..=8),
        hidden_dim: rng.random_range(1..=5),
        scorer_dim: rng.random_range(1..=5),
        token_dim: rng.random_range(1..=4),
    };
    // every tensor random, biases included
    let n = dims.n_params();
    let flat: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let params = EncoderParams::from_flat(dims, &flat).unwrap();
    let k = rng.random_range(1..=5);
    let n_cand = rng.random_range(2..=5);
    let candidates = (0..n_cand)
        .map(|_| Trajectory {
            frames: (0..k)
                .map(|_| Frame {
                    features: (0..dims.frame_dim).map(|_| rng.sample(StandardNormal)).collect(),
                })
                .collect(),
            room_sequence: vec![0; k],
            house_id: 0,
        })
        .collect();
    let t = rng.random_range(1..=5);
    let instruction = Instruction {
        tokens: (0..t).map(|_| rng.random_range(0..dims.vocab_size as u32)).collect(),
    };
    GradCase { params, instruction, candidates }
}

pub fn loss(case: &GradCase, params: &EncoderParams) -> f64 {
    let refs: Vec<&Trajectory> = case.candidates.iter().collect();
    let fwd = EpisodeForward::run(params, &case.instruction, &refs).unwrap();
    pr_loss(&ScoredEpisode::from_scores(fwd.scores[0], &fwd.scores[1..])).unwrap()
}

pub fn analytic_grad(case: &GradCase) -> Vec<f64> {
    let refs: Vec<&Trajectory> = case.candidates.iter().collect();
    let fwd = EpisodeForward::run(&case.params, &case.instruction, &refs).unwrap();
    let up = pr_loss_grad(&ScoredEpisode::from_scores(fwd.scores[0], &fwd.scores[1..])).unwrap();
    backward(&case.params, &[fwd], &[up]).unwrap().flatten()
}

pub fn numeric_grad(case: &GradCase, h: f64) -> Vec<f64> {
    let dims = case.params.dims;
    let base = case.params.flatten();
    (0..base.len())
        .map(|i| {
            let mut p = base.clone();
            p[i] = base[i] + h;
            let up = loss(case, &EncoderParams::from_flat(dims, &p).unwrap());
            p[i] = base[i] - h;
            let down = loss(case, &EncoderParams::from_flat(dims, &p).unwrap());
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps entries that are zero
/// in both from dividing by zero.
pub fn max_rel_error(a: &[f64], n: &[f64], floor: f64) -> f64 {
    a.iter()
        .zip(n)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
