//! Per-round client selection.
//!
//! Draws are a pure function of `(seed, round)`: each round gets its own
//! derived RNG stream, independent of local-training randomness.

use std::collections::{BTreeMap, BTreeSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingStrategy {
    /// Uniform without replacement.
    Uniform,
    /// `r` i.i.d. draws from a multinomial over clients; ids may repeat.
    Md,
    /// Weighted without replacement; weights follow local update norms.
    Adafl,
    /// Scheduled rounds use a fixed list, other rounds fall back to uniform.
    Forced,
}

impl SamplingStrategy {
    fn name(self) -> &'static str {
        match self {
            SamplingStrategy::Uniform => "uniform",
            SamplingStrategy::Md => "md",
            SamplingStrategy::Adafl => "adafl",
            SamplingStrategy::Forced => "forced",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerState {
    strategy: SamplingStrategy,
    weights: Vec<f64>,
    adafl_alpha: f64,
    forced_schedule: BTreeMap<usize, Vec<usize>>,
    seed: u64,
}

impl SamplerState {
    /// Sampler over `n` clients with uniform initial weights.
    pub fn new(strategy: SamplingStrategy, n: usize, seed: u64) -> Self {
        Self {
            strategy,
            weights: vec![1.0 / n.max(1) as f64; n],
            adafl_alpha: 0.5,
            forced_schedule: BTreeMap::new(),
            seed,
        }
    }

    pub fn with_adafl_alpha(mut self, alpha: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&alpha) {
            return Err(Error::config("sampler.adafl_alpha", "must be in [0, 1)"));
        }
        self.adafl_alpha = alpha;
        Ok(self)
    }

    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        let sum: f64 = weights.iter().sum();
        if weights.len() != self.weights.len() || weights.iter().any(|w| !(*w >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config("sampler.weights", "must be a probability vector over all clients"));
        }
        self.weights = weights;
        Ok(self)
    }

    pub fn with_schedule(mut self, schedule: BTreeMap<usize, Vec<usize>>) -> Result<Self> {
        let n = self.weights.len();
        for (round, ids) in &schedule {
            if ids.is_empty() {
                return Err(Error::config(format!("schedule.{round}"), "empty client list"));
            }
            if let Some(bad) = ids.iter().find(|&&id| id >= n) {
                return Err(Error::config(format!("schedule.{round}"), format!("client {bad} out of range")));
            }
        }
        self.forced_schedule = schedule;
        Ok(self)
    }

    pub fn strategy(&self) -> SamplingStrategy {
        self.strategy
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn schedule(&self) -> &BTreeMap<usize, Vec<usize>> {
        &self.forced_schedule
    }

    pub fn num_clients(&self) -> usize {
        self.weights.len()
    }

    /// Client ids for round `t`. Sampled rounds come back sorted ascending;
    /// forced rounds return the scheduled list verbatim.
    pub fn sample(&self, t: usize, r: usize) -> Result<Vec<usize>> {
        let n = self.weights.len();
        if r == 0 || (r > n && self.strategy != SamplingStrategy::Md) || n == 0 {
            return Err(Error::BadRatio { r, n });
        }
        let mut rng = rng::seeded(self.seed, &[stream::SAMPLING, t as u64]);
        let mut ids = match self.strategy {
            SamplingStrategy::Forced => {
                if let Some(ids) = self.forced_schedule.get(&t) {
                    return Ok(ids.clone());
                }
                index::sample(&mut rng, n, r).into_vec()
            }
            SamplingStrategy::Uniform => index::sample(&mut rng, n, r).into_vec(),
            SamplingStrategy::Md => {
                let dist = WeightedIndex::new(&self.weights)
                    .map_err(|e| Error::config("sampler.weights", e.to_string()))?;
                (0..r).map(|_| dist.sample(&mut rng)).collect()
            }
            SamplingStrategy::Adafl => {
                // a tiny floor keeps zero-weight clients drawable when r is large
                index::sample_weighted(&mut rng, n, |i| self.weights[i].max(1e-12), r)
                    .map_err(|e| Error::config("sampler.weights", e.to_string()))?
                    .into_vec()
            }
        };
        ids.sort_unstable();
        Ok(ids)
    }

    /// Moves participants' weights toward their share of the round's update
    /// norms, then renormalizes over all clients. Non-participants are only
    /// rescaled by the renormalization.
    pub fn adafl_update(&mut self, participated: &[usize], local_sq_norms: &BTreeMap<usize, f64>) -> Result<()> {
        if self.strategy != SamplingStrategy::Adafl {
            return Err(Error::WrongStrategy(self.strategy.name().to_string()));
        }
        let unique: BTreeSet<usize> = participated.iter().copied().collect();
        if let Some(&bad) = unique.iter().find(|&&k| k >= self.weights.len()) {
            return Err(Error::UnknownClient(bad));
        }
        let norm = |k: &usize| local_sq_norms.get(k).copied().unwrap_or(0.0).max(0.0).sqrt();
        let total: f64 = unique.iter().map(norm).sum();
        let a = self.adafl_alpha;
        for k in &unique {
            let share = if total > 0.0 { norm(k) / total } else { 1.0 / unique.len() as f64 };
            self.weights[*k] = (1.0 - a) * self.weights[*k] + a * share;
        }
        let sum: f64 = self.weights.iter().sum();
        if sum > 0.0 {
            self.weights.iter_mut().for_each(|w| *w /= sum);
        }
        Ok(())
    }
}
