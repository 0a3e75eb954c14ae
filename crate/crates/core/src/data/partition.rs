//! Label-skewed client partitioning.
//!
//! Each client draws a label mix `q_k ~ Dir(alpha * p)` and fills an equal
//! quota by drawing classes from `q_k` and taking samples from per-class
//! pools without replacement. A draw that hits an exhausted pool is
//! reassigned to the class with the most samples left (lowest index on
//! ties), so every quota is filled and the output is a pure function of
//! the seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::{LabelDistribution, LabeledDataset};
use crate::error::{Error, Result};
use crate::rng::{self, stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    assignments: Vec<Vec<usize>>,
    alpha: f64,
    seed: u64,
}

impl Partition {
    /// Builds a partition from explicit index lists, checking the
    /// disjointness and equal-size invariants.
    pub fn from_assignments(assignments: Vec<Vec<usize>>, alpha: f64, seed: u64) -> Result<Self> {
        let Some(first) = assignments.first() else {
            return Err(Error::EmptyClientSet);
        };
        let quota = first.len();
        if assignments.iter().any(|a| a.len() != quota) {
            return Err(Error::InvalidDims("client shards must have equal sizes".into()));
        }
        let mut seen = std::collections::HashSet::new();
        if !assignments.iter().flatten().all(|&i| seen.insert(i)) {
            return Err(Error::InvalidDims("client shards overlap".into()));
        }
        Ok(Self {
            assignments,
            alpha,
            seed,
        })
    }

    pub fn num_clients(&self) -> usize {
        self.assignments.len()
    }

    pub fn quota(&self) -> usize {
        self.assignments.first().map_or(0, Vec::len)
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn shard(&self, client: usize) -> Result<&[usize]> {
        self.assignments
            .get(client)
            .map(Vec::as_slice)
            .ok_or(Error::UnknownClient(client))
    }

    pub fn assignments(&self) -> &[Vec<usize>] {
        &self.assignments
    }

    pub fn client_counts(&self, ds: &LabeledDataset, client: usize) -> Result<Vec<usize>> {
        let mut counts = vec![0; ds.num_classes()];
        for &i in self.shard(client)? {
            counts[ds.labels()[i]] += 1;
        }
        Ok(counts)
    }

    pub fn client_distribution(&self, ds: &LabeledDataset, client: usize) -> Result<LabelDistribution> {
        LabelDistribution::from_counts(&self.client_counts(ds, client)?)
    }
}

/// Samples `Dir(concentration)` in log space so tiny concentrations do not
/// underflow to an all-zero vector. Zero-concentration components stay zero.
fn sample_dirichlet<R: Rng>(concentration: &[f64], rng: &mut R) -> Vec<f64> {
    let logs: Vec<f64> = concentration
        .iter()
        .map(|&a| {
            if a <= 0.0 {
                return f64::NEG_INFINITY;
            }
            // Gamma(a) = Gamma(a + 1) * U^(1/a)
            let g: f64 = Gamma::new(a + 1.0, 1.0).expect("positive shape").sample(rng);
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            g.max(f64::MIN_POSITIVE).ln() + u.ln() / a
        })
        .collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logs.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn draw_class<R: Rng>(q: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (c, &p) in q.iter().enumerate() {
        acc += p;
        if u < acc {
            return c;
        }
    }
    // rounding left u beyond the cumulative sum; take the last supported class
    q.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

fn largest_pool(pools: &[Vec<usize>]) -> usize {
    pools
        .iter()
        .enumerate()
        .fold((0, 0), |best, (c, p)| if p.len() > best.1 { (c, p.len()) } else { best })
        .0
}

pub fn dirichlet_partition(ds: &LabeledDataset, n_clients: usize, alpha: f64, seed: u64) -> Result<Partition> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidDims(format!("alpha must be positive, got {alpha}")));
    }
    let quota = ds.len().checked_div(n_clients).unwrap_or(0);
    if quota == 0 {
        return Err(Error::QuotaTooSmall {
            samples: ds.len(),
            clients: n_clients,
        });
    }
    let mut rng = rng::seeded(seed, &[stream::PARTITION]);

    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels().iter().enumerate() {
        pools[l].push(i);
    }
    for pool in &mut pools {
        pool.shuffle(&mut rng);
    }
    let global = ds.label_distribution();
    let concentration: Vec<f64> = global.probs().iter().map(|p| alpha * p).collect();

    let mut assignments = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let q = sample_dirichlet(&concentration, &mut rng);
        let mut shard = Vec::with_capacity(quota);
        for _ in 0..quota {
            let mut c = draw_class(&q, &mut rng);
            if pools[c].is_empty() {
                c = largest_pool(&pools);
            }
            shard.push(pools[c].pop().expect("retained samples cover every quota"));
        }
        assignments.push(shard);
    }
    Ok(Partition {
        assignments,
        alpha,
        seed,
    })
}

/// Normalized label histogram over the union of the given clients' shards.
/// Repeated client ids count once per occurrence.
pub fn merged_label_distribution(part: &Partition, ds: &LabeledDataset, clients: &[usize]) -> Result<LabelDistribution> {
    if clients.is_empty() {
        return Err(Error::EmptyClientSet);
    }
    let mut counts = vec![0; ds.num_classes()];
    for &k in clients {
        for (c, n) in part.client_counts(ds, k)?.into_iter().enumerate() {
            counts[c] += n;
        }
    }
    LabelDistribution::from_counts(&counts)
}
