//! Min-max training loop.
//!
//! Per outer step and per episode, a BO session searches frame masks that
//! maximize the ranking loss of the frozen target model (inner
//! maximization). The best `b` masks become fine-grained negatives that are
//! appended to the episode's coarse negatives, and the online model takes an
//! SGD step on the enlarged candidate set (outer minimization). The target
//! is a hard copy of the online model refreshed every `J` outer steps.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    accumulate_backward, encode_instruction, encode_trajectory, score, sgd_step, EncoderDims,
    EncoderParams, EpisodeForward, Gradients,
};
use crate::error::{Error, Result};
use crate::forge::{apply_mask, draw_replacement_pool, draw_replacements, select, shuffle_negative, Mask, Replacement, ReplacementMode};
use crate::ranking::{distance_stats, pr_loss, pr_loss_grad, ranking_accuracy, DistanceStats, Provenance, ScoredEpisode};
use crate::rng::{self, tag, Rng};
use crate::tpe::{propose, uniform_mask, TpeConfig, TrialHistory};
use crate::world::{Episode, Instruction, Split, Trajectory, World};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selector {
    Tpe,
    Random,
}

impl FromStr for Selector {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tpe" => Ok(Self::Tpe),
            "random" | "rand" => Ok(Self::Random),
            _ => Err(Error::config("selector", format!("unknown selector `{s}` (tpe|random)"))),
        }
    }
}

impl fmt::Display for Selector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Tpe => "tpe",
            Self::Random => "random",
        })
    }
}

/// Target refresh period in outer steps. Serialized as `"4"` or `"inf"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum SyncPeriod {
    Every(usize),
    /// Target stays at its initialization.
    Never,
}

impl FromStr for SyncPeriod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "inf" | "never" | "∞" => Ok(Self::Never),
            _ => match s.parse::<usize>() {
                Ok(j) if j >= 1 => Ok(Self::Every(j)),
                _ => Err(Error::config("sync", format!("expected a positive integer or `inf`, got `{s}`"))),
            },
        }
    }
}

impl From<SyncPeriod> for String {
    fn from(s: SyncPeriod) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for SyncPeriod {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl fmt::Display for SyncPeriod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Every(j) => write!(f, "{j}"),
            Self::Never => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub scorer_dim: usize,
    pub token_dim: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 32,
            scorer_dim: 32,
            token_dim: 16,
        }
    }
}

impl EncoderConfig {
    pub fn dims_for(&self, world: &World) -> EncoderDims {
        EncoderDims {
            frame_dim: world.config.frame_dim,
            vocab_size: world.config.vocab_size,
            hidden_dim: self.hidden_dim,
            scorer_dim: self.scorer_dim,
            token_dim: self.token_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// BO iterations per inner session (R).
    pub iters: usize,
    /// Fine-grained negatives per episode (b). Zero trains on coarse negatives only.
    pub n_fgn: usize,
    pub sync: SyncPeriod,
    pub n_rep: usize,
    pub replacement: ReplacementMode,
    /// Coarse negatives used per episode (N).
    pub n_coarse: usize,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub selector: Selector,
    /// Forge outer negatives from the inner session's replacement frames
    /// instead of fresh draws.
    pub reuse_inner_frames: bool,
    pub tpe_gamma: f64,
    pub tpe_candidates: usize,
    pub tpe_alpha: f64,
    /// Shuffle negatives also resample one frame.
    pub shuffle_resample: bool,
    /// Fine-grained negatives per episode in the evaluation pool.
    pub eval_fgn: usize,
    /// Seed of the evaluation pool, shared by every model evaluated on a world.
    pub eval_seed: u64,
    /// Evaluate on at most this many episodes per split (0 = all).
    pub eval_limit: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::fgvln()
    }
}

impl TrainConfig {
    /// Five BO iterations, two out-domain fine-grained negatives, delayed
    /// target updates, TPE selection.
    pub fn fgvln() -> Self {
        Self {
            iters: 5,
            n_fgn: 2,
            sync: SyncPeriod::Every(4),
            n_rep: 1,
            replacement: ReplacementMode::OutDomain,
            n_coarse: 3,
            epochs: 30,
            lr: 1e-2,
            batch_size: 1,
            seed: 0,
            selector: Selector::Tpe,
            reuse_inner_frames: false,
            tpe_gamma: 0.25,
            tpe_candidates: 16,
            tpe_alpha: 1.0,
            shuffle_resample: true,
            eval_fgn: 1,
            eval_seed: 20_240_601,
            eval_limit: 0,
        }
    }

    /// Coarse negatives only.
    pub fn baseline() -> Self {
        Self { n_fgn: 0, ..Self::fgvln() }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "fgvln" => Ok(Self::fgvln()),
            "baseline" => Ok(Self::baseline()),
            _ => Err(Error::config("preset", format!("unknown preset `{name}` (fgvln|baseline)"))),
        }
    }

    pub fn tpe_config(&self) -> TpeConfig {
        TpeConfig {
            n_startup: self.iters.div_ceil(3),
            gamma: self.tpe_gamma,
            n_candidates: self.tpe_candidates,
            alpha: self.tpe_alpha,
            distinct: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iters == 0 {
            return Err(Error::config("iters", "must be at least 1"));
        }
        if self.n_rep == 0 {
            return Err(Error::config("n_rep", "must be at least 1"));
        }
        if self.n_coarse == 0 {
            return Err(Error::config("n_coarse", "must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::config("lr", "must be finite and non-negative"));
        }
        if let SyncPeriod::Every(0) = self.sync {
            return Err(Error::config("sync", "must be at least 1"));
        }
        self.tpe_config().validate()
    }
}

/// Online model, its delayed target copy and the sync bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelPair {
    pub online: EncoderParams,
    pub target: EncoderParams,
    pub steps_since_sync: usize,
    /// Outer steps taken so far.
    pub step: u64,
    pub sync: SyncPeriod,
}

impl ModelPair {
    pub fn new(params: EncoderParams, sync: SyncPeriod) -> Self {
        Self {
            target: params.clone(),
            online: params,
            steps_since_sync: 0,
            step: 0,
            sync,
        }
    }

    /// Copies online into target once `J` outer steps have accumulated.
    /// Returns whether a sync happened.
    pub fn maybe_sync(&mut self) -> bool {
        match self.sync {
            SyncPeriod::Every(j) if self.steps_since_sync >= j => {
                self.target = self.online.clone();
                self.steps_since_sync = 0;
                true
            }
            _ => false,
        }
    }
}

/// Target-model scores of an episode's fixed candidates, shared by every
/// iteration of one BO session.
struct TargetContext<'a> {
    params: &'a EncoderParams,
    h_l: crate::encoder::Embedding,
    s_pos: f64,
    s_coarse: Vec<f64>,
}

impl<'a> TargetContext<'a> {
    fn new(params: &'a EncoderParams, episode: &Episode, n_coarse: usize) -> Result<Self> {
        let h_l = encode_instruction(params, &episode.instruction)?;
        let s_pos = score(params, &encode_trajectory(params, &episode.positive)?, &h_l)?;
        let s_coarse = coarse(episode, n_coarse)?
            .iter()
            .map(|t| score(params, &encode_trajectory(params, t)?, &h_l))
            .collect::<Result<_>>()?;
        Ok(Self { params, h_l, s_pos, s_coarse })
    }

    fn objective(&self, fg: &Trajectory) -> Result<f64> {
        let s_fg = score(self.params, &encode_trajectory(self.params, fg)?, &self.h_l)?;
        let mut negs = self.s_coarse.clone();
        negs.push(s_fg);
        pr_loss(&ScoredEpisode::from_scores(self.s_pos, &negs))
    }
}

fn coarse(episode: &Episode, n: usize) -> Result<&[Trajectory]> {
    if episode.coarse_negatives.len() < n {
        return Err(Error::Usage(format!(
            "episode has {} coarse negatives, {} requested",
            episode.coarse_negatives.len(),
            n
        )));
    }
    Ok(&episode.coarse_negatives[..n])
}

#[derive(Debug, Clone)]
pub struct InnerOutcome {
    /// The selected mask set, `b` masks.
    pub masks: Vec<Mask>,
    pub history: TrialHistory,
    /// Replacement frame for every position, used by all masks of the session.
    pub pool: Vec<Replacement>,
    pub padded: usize,
}

/// Runs one BO session of `cfg.iters` evaluations against the target model
/// and returns the `cfg.n_fgn` selected masks. The target is read only.
pub fn inner_maximize(pair: &ModelPair, episode: &Episode, cfg: &TrainConfig, world: &World, rng: &mut Rng) -> Result<InnerOutcome> {
    let k = episode.positive.len();
    let ctx = TargetContext::new(&pair.target, episode, cfg.n_coarse)?;
    let pool = draw_replacement_pool(world, &episode.positive, cfg.replacement, rng)?;
    let mut history = TrialHistory::new(cfg.tpe_config())?;

    for _ in 0..cfg.iters {
        let mask = match cfg.selector {
            Selector::Tpe => propose(&history, k, cfg.n_rep, rng)?,
            Selector::Random => propose_uniform_distinct(&history, k, cfg.n_rep, rng)?,
        };
        let fg = apply_mask(&episode.positive, &mask, &select(&pool, &mask))?;
        let objective = ctx.objective(&fg)?;
        history.observe(mask, objective)?;
    }

    let b = cfg.n_fgn.max(1);
    let (masks, padded) = match cfg.selector {
        Selector::Tpe => {
            let top = history.top_b(b, k, cfg.n_rep, rng)?;
            (top.masks, top.padded)
        }
        Selector::Random => {
            // proposal order, objective ignored
            let mut masks: Vec<Mask> = Vec::new();
            for t in history.trials() {
                if masks.len() < b && !masks.contains(&t.mask) {
                    masks.push(t.mask.clone());
                }
            }
            let mut padded = 0;
            while masks.len() < b {
                masks.push(uniform_mask(k, cfg.n_rep, rng)?);
                padded += 1;
            }
            (masks, padded)
        }
    };
    Ok(InnerOutcome { masks, history, pool, padded })
}

/// Uniform draw that avoids masks already in the session, while any remain.
fn propose_uniform_distinct(history: &TrialHistory, k: usize, n_rep: usize, rng: &mut Rng) -> Result<Mask> {
    let mut startup_only = history.clone();
    startup_only.config = TpeConfig {
        n_startup: usize::MAX,
        ..history.config
    };
    propose(&startup_only, k, n_rep, rng)
}

/// Candidate set of one outer step for one episode: positive first, then the
/// coarse negatives, then the fine-grained ones.
#[derive(Debug, Clone, Serialize)]
pub struct FgnBatch {
    pub positive: Trajectory,
    pub instruction: Instruction,
    pub negatives: Vec<Trajectory>,
    pub provenance: Vec<Provenance>,
}

impl FgnBatch {
    pub fn build(
        episode: &Episode,
        masks: &[Mask],
        cfg: &TrainConfig,
        world: &World,
        inner_pool: Option<&[Replacement]>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut negatives: Vec<Trajectory> = coarse(episode, cfg.n_coarse)?.to_vec();
        let mut provenance = vec![Provenance::AltPath; negatives.len()];
        for mask in masks.iter().take(cfg.n_fgn) {
            let reps = match inner_pool {
                Some(pool) if cfg.reuse_inner_frames => select(pool, mask),
                _ => draw_replacements(world, &episode.positive, cfg.replacement, mask.indices(), rng)?,
            };
            negatives.push(apply_mask(&episode.positive, mask, &reps)?);
            provenance.push(Provenance::FineGrained);
        }
        Ok(Self {
            positive: episode.positive.clone(),
            instruction: episode.instruction.clone(),
            negatives,
            provenance,
        })
    }

    pub fn candidates(&self) -> Vec<&Trajectory> {
        std::iter::once(&self.positive).chain(&self.negatives).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    /// Mean online loss over the batch before the update.
    pub loss: f64,
}

/// Mean loss and gradient of the online model over a set of FGN batches.
pub fn online_loss_and_grad(params: &EncoderParams, batches: &[FgnBatch]) -> Result<(f64, Gradients)> {
    let mut grads = Gradients::zeros(params.dims);
    let mut total = 0.0;
    for b in batches {
        let fwd = EpisodeForward::run(params, &b.instruction, &b.candidates())?;
        let scored = ScoredEpisode::new(fwd.scores[0], fwd.scores[1..].to_vec(), b.provenance.clone());
        total += pr_loss(&scored)?;
        accumulate_backward(params, &fwd, &pr_loss_grad(&scored)?, &mut grads)?;
    }
    let inv = 1.0 / batches.len().max(1) as f64;
    grads.scale(inv);
    Ok((total * inv, grads))
}

/// One batch entry: the episode, its selected masks and the inner session's
/// replacement pool, if any.
pub type BatchItem<'a> = (&'a Episode, &'a [Mask], Option<&'a [Replacement]>);

/// Builds the outer candidate sets of a batch from the selected masks.
pub fn forge_outer_batch(
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
    world: &World,
    rng: &mut Rng,
) -> Result<Vec<FgnBatch>> {
    let mut fgn = Vec::with_capacity(batch.len());
    for &(ep, masks, pool) in batch {
        if masks.len() < cfg.n_fgn {
            return Err(Error::Usage(format!("{} masks selected, {} needed", masks.len(), cfg.n_fgn)));
        }
        fgn.push(FgnBatch::build(ep, masks, cfg, world, pool, rng)?);
    }
    Ok(fgn)
}

/// One SGD step of the online model on forged candidate sets. Advances the
/// sync counter; the target is not touched.
pub fn outer_step_on(pair: &mut ModelPair, fgn: &[FgnBatch], cfg: &TrainConfig) -> Result<StepMetrics> {
    let (loss, grads) = online_loss_and_grad(&pair.online, fgn)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!("online loss became {loss} at step {}", pair.step)));
    }
    pair.online = sgd_step(&pair.online, &grads, cfg.lr)?;
    pair.steps_since_sync += 1;
    pair.step += 1;
    Ok(StepMetrics { loss })
}

/// Forges the fine-grained negatives from the selected masks and takes one
/// SGD step on the online model.
pub fn outer_minimize_step(
    pair: &mut ModelPair,
    batch: &[BatchItem<'_>],
    cfg: &TrainConfig,
    world: &World,
    rng: &mut Rng,
) -> Result<StepMetrics> {
    let fgn = forge_outer_batch(batch, cfg, world, rng)?;
    outer_step_on(pair, &fgn, cfg)
}

/// An evaluation episode with its fixed negative pool.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalEpisode {
    pub positive: Trajectory,
    pub instruction: Instruction,
    pub negatives: Vec<(Provenance, Trajectory)>,
}

/// Coarse negatives, one shuffle negative and `eval_fgn` randomly masked
/// out-domain fine-grained negatives per episode. Depends only on the world,
/// the episodes and `eval_seed`, so every model sees the same pool.
pub fn build_eval_pool(world: &World, episodes: &[Episode], split: Split, cfg: &TrainConfig) -> Result<Vec<EvalEpisode>> {
    let limit = if cfg.eval_limit == 0 { episodes.len() } else { cfg.eval_limit.min(episodes.len()) };
    let split_tag = match split {
        Split::Seen => 0,
        Split::Unseen => 1,
    };
    episodes[..limit]
        .iter()
        .enumerate()
        .map(|(i, ep)| {
            let mut r = rng::stream(cfg.eval_seed, &[tag::EVAL, split_tag, i as u64]);
            let mut negatives: Vec<(Provenance, Trajectory)> = coarse(ep, cfg.n_coarse)?
                .iter()
                .map(|t| (Provenance::AltPath, t.clone()))
                .collect();
            negatives.push((Provenance::Shuffle, shuffle_negative(world, &ep.positive, cfg.shuffle_resample, &mut r)?));
            for _ in 0..cfg.eval_fgn {
                let mask = uniform_mask(ep.positive.len(), cfg.n_rep, &mut r)?;
                let reps = draw_replacements(world, &ep.positive, ReplacementMode::OutDomain, mask.indices(), &mut r)?;
                negatives.push((Provenance::FineGrained, apply_mask(&ep.positive, &mask, &reps)?));
            }
            Ok(EvalEpisode {
                positive: ep.positive.clone(),
                instruction: ep.instruction.clone(),
                negatives,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitEval {
    pub ranking_accuracy: f64,
    pub mean_loss: f64,
    /// Accuracy against each negative style alone.
    pub style_accuracy: BTreeMap<Provenance, f64>,
    pub dist_stats: DistanceStats,
}

/// Scores every pool episode with `params`.
pub fn score_pool(params: &EncoderParams, pool: &[EvalEpisode]) -> Result<Vec<ScoredEpisode>> {
    pool.iter()
        .map(|ep| {
            let h_l = encode_instruction(params, &ep.instruction)?;
            let s_pos = score(params, &encode_trajectory(params, &ep.positive)?, &h_l)?;
            let mut s_negs = Vec::with_capacity(ep.negatives.len());
            let mut provenance = Vec::with_capacity(ep.negatives.len());
            for (p, t) in &ep.negatives {
                s_negs.push(score(params, &encode_trajectory(params, t)?, &h_l)?);
                provenance.push(*p);
            }
            Ok(ScoredEpisode::new(s_pos, s_negs, provenance))
        })
        .collect()
}

/// `(style, |h_v+ - h_v-|)` for every negative in the pool, in pool order.
pub fn embedding_distances(params: &EncoderParams, pool: &[EvalEpisode]) -> Result<Vec<(Provenance, f64)>> {
    let mut out = Vec::new();
    for ep in pool {
        let h_pos = encode_trajectory(params, &ep.positive)?;
        for (p, t) in &ep.negatives {
            out.push((*p, h_pos.distance(&encode_trajectory(params, t)?)));
        }
    }
    Ok(out)
}

pub fn embedding_distance_stats(params: &EncoderParams, pool: &[EvalEpisode]) -> Result<DistanceStats> {
    distance_stats(&embedding_distances(params, pool)?)
}

fn only_style(s: &ScoredEpisode, style: Provenance) -> ScoredEpisode {
    let (negs, prov): (Vec<f64>, Vec<Provenance>) = s
        .s_negs
        .iter()
        .zip(&s.provenance)
        .filter(|(_, &p)| p == style)
        .map(|(&x, &p)| (x, p))
        .unzip();
    ScoredEpisode::new(s.s_pos, negs, prov)
}

/// Ranking accuracy and loss over each episode's coarse candidates, plus
/// per-style accuracy and distance statistics over the whole pool.
pub fn evaluate(params: &EncoderParams, pool: &[EvalEpisode]) -> Result<SplitEval> {
    let scored = score_pool(params, pool)?;
    // headline metrics rank each episode's own candidate set; the extra
    // styles only feed the per-style breakdown and the distance statistics
    let dataset: Vec<ScoredEpisode> = scored.iter().map(|s| only_style(s, Provenance::AltPath)).collect();
    let mut mean_loss = 0.0;
    for s in &dataset {
        mean_loss += pr_loss(s)?;
    }
    mean_loss /= dataset.len().max(1) as f64;

    let mut style_accuracy = BTreeMap::new();
    for style in Provenance::ALL {
        let per_style: Vec<ScoredEpisode> = scored
            .iter()
            .map(|s| only_style(s, style))
            .filter(|s| !s.s_negs.is_empty())
            .collect();
        if !per_style.is_empty() {
            style_accuracy.insert(style, ranking_accuracy(&per_style));
        }
    }

    Ok(SplitEval {
        ranking_accuracy: ranking_accuracy(&dataset),
        mean_loss,
        style_accuracy,
        dist_stats: embedding_distance_stats(params, pool)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub split: Split,
    pub ranking_accuracy: f64,
    pub mean_loss: f64,
    pub train_loss: f64,
    pub style_accuracy: BTreeMap<Provenance, f64>,
    pub dist_stats: DistanceStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrialRecord {
    pub episode_id: usize,
    pub step: u64,
    pub iter: usize,
    pub mask: Vec<usize>,
    pub objective: f64,
}

/// Callbacks fired during training.
pub trait TrainObserver {
    fn on_epoch(&mut self, _metrics: &[EpochMetrics], _pair: &ModelPair) -> Result<()> {
        Ok(())
    }

    fn on_bo_trial(&mut self, _record: &BoTrialRecord) -> Result<()> {
        Ok(())
    }

    /// Candidate set used for `episode_id` at outer step `step`.
    fn on_outer_batch(&mut self, _step: u64, _episode_id: usize, _batch: &FgnBatch) -> Result<()> {
        Ok(())
    }
}

/// Observer that ignores everything.
pub struct Silent;

impl TrainObserver for Silent {}

pub struct TrainData<'a> {
    pub world: &'a World,
    pub train: &'a [Episode],
    pub eval_seen: &'a [EvalEpisode],
    pub eval_unseen: &'a [EvalEpisode],
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pair: ModelPair,
    pub history: Vec<EpochMetrics>,
}

pub fn init_pair(cfg: &TrainConfig, dims: EncoderDims) -> Result<ModelPair> {
    let mut r = rng::stream(cfg.seed, &[tag::INIT]);
    Ok(ModelPair::new(EncoderParams::init(dims, &mut r)?, cfg.sync))
}

/// Runs `cfg.epochs` passes over `data.train`, evaluating both splits after
/// every epoch. Deterministic given the config and data.
pub fn train(cfg: &TrainConfig, enc: &EncoderConfig, data: &TrainData<'_>, observer: &mut dyn TrainObserver) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::Usage("no training episodes".into()));
    }
    let world = data.world;
    let mut pair = init_pair(cfg, enc.dims_for(world))?;
    let mut history = Vec::new();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &[tag::ORDER, epoch as u64]));

        let mut loss_sum = 0.0;
        let mut n_steps = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let step = pair.step;
            let mut inner: Vec<Option<InnerOutcome>> = Vec::with_capacity(chunk.len());
            for (j, &ep_id) in chunk.iter().enumerate() {
                if cfg.n_fgn == 0 {
                    inner.push(None);
                    continue;
                }
                let mut r = rng::stream(cfg.seed, &[tag::INNER, step, j as u64]);
                let out = inner_maximize(&pair, &data.train[ep_id], cfg, world, &mut r)?;
                for (iter, t) in out.history.trials().iter().enumerate() {
                    observer.on_bo_trial(&BoTrialRecord {
                        episode_id: ep_id,
                        step,
                        iter,
                        mask: t.mask.indices().to_vec(),
                        objective: t.objective,
                    })?;
                }
                inner.push(Some(out));
            }
            let batch: Vec<BatchItem<'_>> = chunk
                .iter()
                .zip(&inner)
                .map(|(&ep_id, o)| match o {
                    Some(o) => (&data.train[ep_id], o.masks.as_slice(), Some(o.pool.as_slice())),
                    None => (&data.train[ep_id], &[][..], None),
                })
                .collect();
            let mut r = rng::stream(cfg.seed, &[tag::OUTER, step]);
            let fgn = forge_outer_batch(&batch, cfg, world, &mut r)?;
            for (&ep_id, b) in chunk.iter().zip(&fgn) {
                observer.on_outer_batch(step, ep_id, b)?;
            }
            let m = outer_step_on(&mut pair, &fgn, cfg)?;
            pair.maybe_sync();
            loss_sum += m.loss;
            n_steps += 1;
        }

        let train_loss = loss_sum / n_steps as f64;
        let mut records = Vec::with_capacity(2);
        for (split, pool) in [(Split::Seen, data.eval_seen), (Split::Unseen, data.eval_unseen)] {
            if pool.is_empty() {
                continue;
            }
            let e = evaluate(&pair.online, pool)?;
            records.push(EpochMetrics {
                epoch,
                split,
                ranking_accuracy: e.ranking_accuracy,
                mean_loss: e.mean_loss,
                train_loss,
                style_accuracy: e.style_accuracy,
                dist_stats: e.dist_stats,
            });
        }
        observer.on_epoch(&records, &pair)?;
        history.extend(records);
    }
    Ok(TrainOutcome { pair, history })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{dataset, generate_world, WorldConfig};

    fn setup() -> (World, Vec<Episode>) {
        let w = generate_world(&WorldConfig { seed: 3, ..WorldConfig::default() }).unwrap();
        let eps = dataset(&w, Split::Seen, 12, 3, 1).unwrap();
        (w, eps)
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig { epochs: 1, ..TrainConfig::fgvln() }
    }

    #[test]
    fn sync_period_parsing() {
        assert_eq!("4".parse::<SyncPeriod>().unwrap(), SyncPeriod::Every(4));
        assert_eq!("inf".parse::<SyncPeriod>().unwrap(), SyncPeriod::Never);
        assert!("0".parse::<SyncPeriod>().is_err());
    }

    #[test]
    fn single_iteration_selects_the_only_proposal() {
        let (w, eps) = setup();
        let cfg = TrainConfig { iters: 1, n_fgn: 1, ..small_cfg() };
        let pair = init_pair(&cfg, EncoderConfig::default().dims_for(&w)).unwrap();
        let mut r = rng::stream(1, &[]);
        let out = inner_maximize(&pair, &eps[0], &cfg, &w, &mut r).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.masks, vec![out.history.trials()[0].mask.clone()]);
    }

    #[test]
    fn random_selector_keeps_proposal_order() {
        let (w, eps) = setup();
        let cfg = TrainConfig { selector: Selector::Random, ..small_cfg() };
        let pair = init_pair(&cfg, EncoderConfig::default().dims_for(&w)).unwrap();
        let mut r = rng::stream(2, &[]);
        let out = inner_maximize(&pair, &eps[1], &cfg, &w, &mut r).unwrap();
        assert_eq!(out.history.len(), 5);
        let first: Vec<Mask> = out.history.trials()[..2].iter().map(|t| t.mask.clone()).collect();
        assert_eq!(out.masks, first);
    }

    #[test]
    fn inner_loop_leaves_target_untouched() {
        let (w, eps) = setup();
        let cfg = small_cfg();
        let pair = init_pair(&cfg, EncoderConfig::default().dims_for(&w)).unwrap();
        let before = pair.clone();
        let mut r = rng::stream(3, &[]);
        for ep in &eps {
            inner_maximize(&pair, ep, &cfg, &w, &mut r).unwrap();
        }
        assert_eq!(pair, before);
    }

    #[test]
    fn uniform_scores_give_log_of_candidate_count() {
        let (w, eps) = setup();
        let cfg = small_cfg();
        let mut pair = init_pair(&cfg, EncoderConfig::default().dims_for(&w)).unwrap();
        pair.online.w_2.fill(0.0);
        let masks = vec![Mask::new(8, vec![1]).unwrap(), Mask::new(8, vec![2]).unwrap()];
        let mut r = rng::stream(4, &[]);
        let m = outer_minimize_step(&mut pair, &[(&eps[0], &masks, None)], &cfg, &w, &mut r).unwrap();
        assert!((m.loss - 6f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_leaves_online_unchanged() {
        let (w, eps) = setup();
        let cfg = TrainConfig { lr: 0.0, ..small_cfg() };
        let mut pair = init_pair(&cfg, EncoderConfig::default().dims_for(&w)).unwrap();
        let before = pair.online.clone();
        let masks = vec![Mask::new(8, vec![1]).unwrap(), Mask::new(8, vec![5]).unwrap()];
        let mut r = rng::stream(5, &[]);
        outer_minimize_step(&mut pair, &[(&eps[0], &masks, None)], &cfg, &w, &mut r).unwrap();
        assert_eq!(pair.online, before);
        assert_eq!(pair.steps_since_sync, 1);
    }

    #[test]
    fn sync_schedule() {
        let (w, _) = setup();
        let dims = EncoderConfig::default().dims_for(&w);
        let mut pair = init_pair(&TrainConfig::fgvln(), dims).unwrap();
        pair.sync = SyncPeriod::Every(1);
        pair.online.b_v[0] += 1.0;
        pair.steps_since_sync = 1;
        assert!(pair.maybe_sync());
        assert_eq!(pair.target, pair.online);

        let mut frozen = init_pair(&TrainConfig::fgvln(), dims).unwrap();
        frozen.sync = SyncPeriod::Never;
        let init = frozen.target.clone();
        frozen.online.b_v[0] += 1.0;
        frozen.steps_since_sync = 1000;
        assert!(!frozen.maybe_sync());
        assert_eq!(frozen.target, init);
    }

    #[test]
    fn eval_pool_is_independent_of_train_seed() {
        let (w, eps) = setup();
        let a = build_eval_pool(&w, &eps, Split::Seen, &TrainConfig { seed: 1, ..small_cfg() }).unwrap();
        let b = build_eval_pool(&w, &eps, Split::Seen, &TrainConfig { seed: 2, ..small_cfg() }).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(a[0].negatives.len(), 3 + 1 + 1);
    }

    #[test]
    fn fgn_batch_layout() {
        let (w, eps) = setup();
        let cfg = small_cfg();
        let masks = vec![Mask::new(8, vec![0]).unwrap(), Mask::new(8, vec![7]).unwrap()];
        let mut r = rng::stream(6, &[]);
        let b = FgnBatch::build(&eps[0], &masks, &cfg, &w, None, &mut r).unwrap();
        assert_eq!(b.negatives.len(), cfg.n_coarse + cfg.n_fgn);
        assert_eq!(&b.negatives[..3], &eps[0].coarse_negatives[..]);
        for fg in &b.negatives[3..] {
            assert_eq!(fg.frame_hamming(&eps[0].positive), cfg.n_rep);
        }
        assert_eq!(b.instruction, eps[0].instruction);
    }
}
