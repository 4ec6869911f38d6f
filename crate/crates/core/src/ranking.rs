//! Path-ranking contrastive loss, ranking accuracy and embedding-distance
//! statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How a negative trajectory was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Shuffle,
    AltPath,
    FineGrained,
}

impl Provenance {
    pub const ALL: [Provenance; 3] = [Provenance::Shuffle, Provenance::AltPath, Provenance::FineGrained];

    pub fn as_str(self) -> &'static str {
        match self {
            Provenance::Shuffle => "shuffle",
            Provenance::AltPath => "alt_path",
            Provenance::FineGrained => "fine_grained",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEpisode {
    pub s_pos: f64,
    pub s_negs: Vec<f64>,
    pub provenance: Vec<Provenance>,
}

impl ScoredEpisode {
    pub fn new(s_pos: f64, s_negs: Vec<f64>, provenance: Vec<Provenance>) -> Self {
        Self { s_pos, s_negs, provenance }
    }

    /// Scores with unspecified provenance (treated as alternate paths).
    pub fn from_scores(s_pos: f64, s_negs: &[f64]) -> Self {
        Self {
            s_pos,
            provenance: vec![Provenance::AltPath; s_negs.len()],
            s_negs: s_negs.to_vec(),
        }
    }

    fn check(&self) -> Result<()> {
        if self.s_negs.is_empty() {
            return Err(Error::Usage("ranking loss needs at least one negative".into()));
        }
        if !self.s_pos.is_finite() || self.s_negs.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite score".into()));
        }
        Ok(())
    }
}

/// `-log softmax(scores)[0]` where `scores = [s_pos, s_negs...]`, evaluated
/// with the max score subtracted before exponentiation.
pub fn pr_loss(scored: &ScoredEpisode) -> Result<f64> {
    scored.check()?;
    let all = || std::iter::once(scored.s_pos).chain(scored.s_negs.iter().copied());
    let (arg, max) = all()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bm), (i, s)| if s > bm { (i, s) } else { (bi, bm) });
    // the max term contributes exactly 1; ln_1p keeps tiny losses positive
    let rest: f64 = all()
        .enumerate()
        .filter(|&(i, _)| i != arg)
        .map(|(_, s)| (s - max).exp())
        .sum();
    Ok((max - scored.s_pos) + rest.ln_1p())
}

/// Gradient of `pr_loss` with respect to `[s_pos, s_negs...]`.
pub fn pr_loss_grad(scored: &ScoredEpisode) -> Result<Vec<f64>> {
    scored.check()?;
    let max = scored.s_negs.iter().fold(scored.s_pos, |m, &s| m.max(s));
    let mut grad: Vec<f64> = std::iter::once(scored.s_pos)
        .chain(scored.s_negs.iter().copied())
        .map(|s| (s - max).exp())
        .collect();
    let sum: f64 = grad.iter().sum();
    grad.iter_mut().for_each(|g| *g /= sum);
    grad[0] -= 1.0;
    Ok(grad)
}

/// Fraction of episodes whose positive strictly beats every negative.
pub fn ranking_accuracy(episodes: &[ScoredEpisode]) -> f64 {
    if episodes.is_empty() {
        return 0.0;
    }
    let wins = episodes
        .iter()
        .filter(|e| e.s_negs.iter().all(|&n| e.s_pos > n))
        .count();
    wins as f64 / episodes.len() as f64
}

/// L2 distance summary for one negative style. `sigma` is the sample
/// standard deviation; `variance` its square.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleStats {
    pub mu: f64,
    pub sigma: f64,
    pub variance: f64,
    pub n: usize,
}

pub type DistanceStats = BTreeMap<Provenance, StyleStats>;

pub fn style_stats(distances: &[f64]) -> Result<StyleStats> {
    let n = distances.len();
    if n < 2 {
        return Err(Error::Usage(format!(
            "distance statistics need at least 2 samples, got {n}"
        )));
    }
    let mu = distances.iter().sum::<f64>() / n as f64;
    let variance = distances.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(StyleStats {
        mu,
        sigma: variance.sqrt(),
        variance,
        n,
    })
}

/// Reduces `(style, distance)` samples into per-style statistics. Every
/// style present must have at least two samples.
pub fn distance_stats(samples: &[(Provenance, f64)]) -> Result<DistanceStats> {
    let mut by_style: BTreeMap<Provenance, Vec<f64>> = BTreeMap::new();
    for &(style, d) in samples {
        by_style.entry(style).or_default().push(d);
    }
    by_style
        .into_iter()
        .map(|(style, ds)| style_stats(&ds).map(|s| (style, s)))
        .collect()
}
