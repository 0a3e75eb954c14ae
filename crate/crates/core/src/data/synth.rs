use rand::Rng;
use rand_distr::StandardNormal;

use super::LabeledDataset;
use crate::error::{Error, Result};
use crate::rng::{self, stream};

/// `C` points drawn uniformly on the unit sphere in `d` dimensions, row-major.
pub fn cluster_centers(d: usize, c: usize, seed: u64) -> Result<Vec<f64>> {
    if d == 0 || c < 2 {
        return Err(Error::InvalidDims(format!("need d >= 1 and C >= 2, got d={d}, C={c}")));
    }
    let mut rng = rng::seeded(seed, &[stream::DATA_CENTERS]);
    let mut centers = Vec::with_capacity(c * d);
    for _ in 0..c {
        let mut v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        v.iter_mut().for_each(|x| *x /= norm);
        centers.extend(v);
    }
    Ok(centers)
}

/// `n` balanced points around the given centers with isotropic Gaussian
/// noise of standard deviation `spread`. Point `i` belongs to class `i mod C`.
pub fn synth_from_centers(centers: &[f64], c: usize, n: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    if c < 2 || centers.is_empty() || !centers.len().is_multiple_of(c) {
        return Err(Error::InvalidDims(format!("{} center values for {c} classes", centers.len())));
    }
    if n < c {
        return Err(Error::InvalidDims(format!("n={n} is smaller than C={c}")));
    }
    if !(spread >= 0.0 && spread.is_finite()) {
        return Err(Error::InvalidDims(format!("spread must be finite and non-negative, got {spread}")));
    }
    let d = centers.len() / c;
    let mut rng = rng::seeded(seed, &[stream::DATA_TRAIN]);
    let mut features = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % c;
        let center = &centers[label * d..(label + 1) * d];
        for &m in center {
            let noise: f64 = rng.sample(StandardNormal);
            features.push(m + spread * noise);
        }
        labels.push(label);
    }
    LabeledDataset::new(features, d, labels, c)
}

/// Gaussian-cluster classification set; centers and noise both keyed by `seed`.
pub fn synth_clusters(n: usize, d: usize, c: usize, spread: f64, seed: u64) -> Result<LabeledDataset> {
    let centers = cluster_centers(d, c, seed)?;
    synth_from_centers(&centers, c, n, spread, seed)
}
