//! Tree-structured Parzen Estimator over fixed-cardinality masks.
//!
//! Trials are split into a "good" top-`gamma` quantile (by objective, to be
//! maximized) and the "bad" remainder. Each side gets a Laplace-smoothed
//! categorical density over frame positions; candidates are drawn from the
//! good density and the one maximizing `prod_k l(k) / g(k)` is proposed.

use rand::seq::index;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forge::Mask;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TpeConfig {
    /// Trials drawn uniformly before the density model kicks in.
    pub n_startup: usize,
    pub gamma: f64,
    pub n_candidates: usize,
    /// Laplace pseudo-count added to every position.
    pub alpha: f64,
    /// Skip masks that were already observed while unobserved ones remain.
    pub distinct: bool,
}

impl Default for TpeConfig {
    fn default() -> Self {
        Self {
            n_startup: 4,
            gamma: 0.25,
            n_candidates: 16,
            alpha: 1.0,
            distinct: false,
        }
    }
}

impl TpeConfig {
    /// Defaults for a session with an iteration budget of `r`: startup is
    /// a third of the budget, rounded up.
    pub fn for_budget(r: usize) -> Self {
        Self {
            n_startup: r.div_ceil(3),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::config("gamma", "must lie in (0, 1)"));
        }
        if self.n_candidates == 0 {
            return Err(Error::config("n_candidates", "must be at least 1"));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::config("alpha", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub mask: Mask,
    pub objective: f64,
}

/// Append-only record of one BO session.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialHistory {
    pub config: TpeConfig,
    trials: Vec<Trial>,
}

impl TrialHistory {
    pub fn new(config: TpeConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config, trials: Vec::new() })
    }

    pub fn trials(&self) -> &[Trial] {
        &self.trials
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }

    pub fn observe(&mut self, mask: Mask, objective: f64) -> Result<()> {
        if !objective.is_finite() {
            return Err(Error::Numeric(format!("non-finite objective {objective}")));
        }
        self.trials.push(Trial { mask, objective });
        Ok(())
    }

    pub fn best_so_far(&self) -> Option<f64> {
        self.trials.iter().map(|t| t.objective).reduce(f64::max)
    }

    /// Best objective after each trial.
    pub fn best_trace(&self) -> Vec<f64> {
        let mut best = f64::NEG_INFINITY;
        self.trials
            .iter()
            .map(|t| {
                best = best.max(t.objective);
                best
            })
            .collect()
    }

    fn observed(&self, mask: &Mask) -> bool {
        self.trials.iter().any(|t| &t.mask == mask)
    }

    fn n_distinct(&self) -> usize {
        let mut masks: Vec<&Mask> = self.trials.iter().map(|t| &t.mask).collect();
        masks.sort();
        masks.dedup();
        masks.len()
    }

    /// The `b` distinct masks with the highest observed objectives. If fewer
    /// than `b` distinct masks were observed, the rest is padded with
    /// uniformly drawn unobserved masks.
    pub fn top_b(&self, b: usize, traj_len: usize, n_rep: usize, rng: &mut Rng) -> Result<TopB> {
        if b == 0 {
            return Err(Error::config("b", "must be at least 1"));
        }
        let mut best: Vec<Trial> = Vec::new();
        for t in &self.trials {
            match best.iter_mut().find(|x| x.mask == t.mask) {
                Some(x) => x.objective = x.objective.max(t.objective),
                None => best.push(t.clone()),
            }
        }
        // stable: earlier masks win ties
        best.sort_by(|a, b| b.objective.total_cmp(&a.objective));
        let mut masks: Vec<Mask> = best.into_iter().take(b).map(|t| t.mask).collect();
        let mut padded = 0;
        let total = n_choose_k(traj_len, n_rep);
        while masks.len() < b {
            let m = uniform_mask(traj_len, n_rep, rng)?;
            if masks.contains(&m) && (masks.len() as u128) < total {
                continue;
            }
            masks.push(m);
            padded += 1;
        }
        Ok(TopB { masks, padded })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopB {
    pub masks: Vec<Mask>,
    /// How many of `masks` are random padding rather than observed trials.
    pub padded: usize,
}

pub(crate) fn n_choose_k(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

fn check_shape(traj_len: usize, n_rep: usize) -> Result<()> {
    if traj_len < 2 || n_rep == 0 || n_rep >= traj_len {
        return Err(Error::Usage(format!(
            "n_rep must lie in [1, {traj_len}) for trajectories of length {traj_len}"
        )));
    }
    Ok(())
}

/// A mask drawn uniformly from all `traj_len choose n_rep` subsets.
pub fn uniform_mask(traj_len: usize, n_rep: usize, rng: &mut Rng) -> Result<Mask> {
    check_shape(traj_len, n_rep)?;
    Mask::new(traj_len, index::sample(rng, traj_len, n_rep).into_vec())
}

/// Good/bad partition of a history with the smoothed per-position densities.
#[derive(Debug, Clone, PartialEq)]
pub struct ParzenSplit {
    /// Trial indices, best first.
    pub good: Vec<usize>,
    pub bad: Vec<usize>,
    pub l: Vec<f64>,
    pub g: Vec<f64>,
}

impl ParzenSplit {
    pub fn build(history: &TrialHistory, traj_len: usize) -> Self {
        let n = history.trials.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| history.trials[b].objective.total_cmp(&history.trials[a].objective));
        let n_good = (history.config.gamma * n as f64).ceil() as usize;
        let bad = order.split_off(n_good.min(n));
        let good = order;
        let alpha = history.config.alpha;
        let density = |ids: &[usize]| -> Vec<f64> {
            let mut counts = vec![0.0; traj_len];
            let mut total = 0.0;
            for &i in ids {
                for &k in history.trials[i].mask.indices() {
                    counts[k] += 1.0;
                    total += 1.0;
                }
            }
            let denom = total + alpha * traj_len as f64;
            counts.iter().map(|c| (c + alpha) / denom).collect()
        };
        let l = density(&good);
        let g = density(&bad);
        Self { good, bad, l, g }
    }

    /// `sum_k log(l(k) / g(k))` over the mask's positions.
    pub fn log_ratio(&self, mask: &Mask) -> f64 {
        mask.indices().iter().map(|&k| (self.l[k] / self.g[k]).ln()).sum()
    }
}

/// Draws `n_rep` distinct positions by sequential weighted sampling without
/// replacement: each draw picks position `k` with probability proportional
/// to `weights[k]` among the positions not yet taken.
pub fn weighted_subset(weights: &[f64], n_rep: usize, rng: &mut Rng) -> Result<Mask> {
    check_shape(weights.len(), n_rep)?;
    let mut w = weights.to_vec();
    let mut picked = Vec::with_capacity(n_rep);
    for _ in 0..n_rep {
        let total: f64 = w.iter().sum();
        let u = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut choice = None;
        for (k, &wk) in w.iter().enumerate() {
            if wk <= 0.0 {
                continue;
            }
            acc += wk;
            choice = Some(k);
            if u < acc {
                break;
            }
        }
        let k = choice.ok_or_else(|| Error::Numeric("weights sum to zero".into()))?;
        picked.push(k);
        w[k] = 0.0;
    }
    Mask::new(weights.len(), picked)
}

/// Proposes the next mask of a session.
pub fn propose(history: &TrialHistory, traj_len: usize, n_rep: usize, rng: &mut Rng) -> Result<Mask> {
    check_shape(traj_len, n_rep)?;
    let cfg = &history.config;
    let exhausted = history.n_distinct() as u128 >= n_choose_k(traj_len, n_rep);
    let skip = |m: &Mask| cfg.distinct && !exhausted && history.observed(m);

    if history.len() < cfg.n_startup {
        loop {
            let m = uniform_mask(traj_len, n_rep, rng)?;
            if !skip(&m) {
                return Ok(m);
            }
        }
    }

    let split = ParzenSplit::build(history, traj_len);
    let mut best: Option<(f64, Mask)> = None;
    for _ in 0..cfg.n_candidates {
        let m = weighted_subset(&split.l, n_rep, rng)?;
        if skip(&m) {
            continue;
        }
        let r = split.log_ratio(&m);
        let better = match &best {
            None => true,
            Some((br, bm)) => r > *br || (r == *br && m < *bm),
        };
        if better {
            best = Some((r, m));
        }
    }
    match best {
        Some((_, m)) => Ok(m),
        // every candidate was already observed
        None => loop {
            let m = uniform_mask(traj_len, n_rep, rng)?;
            if !skip(&m) {
                return Ok(m);
            }
        },
    }
}
