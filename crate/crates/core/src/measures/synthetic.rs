//! Synthetic datasets.
//!
//! All generators use `ChaCha8Rng::seed_from_u64(seed)`. The toy regression
//! stream draws, in order: every mean `(m1, m2)`, then every variance, then
//! each cloud's samples (x before y for each point, measures in order).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DiscreteMeasure, LabeledDataset, Responses};
use crate::error::{Error, Result};

/// Generating parameters of one toy Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyParams {
    pub mean: [f64; 2],
    /// Standard deviation (square root of the sampled variance).
    pub sigma: f64,
}

/// Random field value of an isotropic Gaussian with mean `m` and standard
/// deviation `sigma`.
pub fn toy_field(m: [f64; 2], sigma: f64) -> f64 {
    (m[0] + 0.5 - (m[1] + 0.5).powi(2)) / (1.0 + sigma)
}

/// `count` isotropic 2-D Gaussians with means in `[-0.3, 0.3]²` and variances
/// in `[0.01², 0.02²]`, each represented by `cloud_size` samples.
pub fn sample_toy_dataset(count: usize, cloud_size: usize, seed: u64) -> Result<LabeledDataset> {
    Ok(sample_toy_dataset_with_params(count, cloud_size, seed)?.0)
}

pub fn sample_toy_dataset_with_params(
    count: usize,
    cloud_size: usize,
    seed: u64,
) -> Result<(LabeledDataset, Vec<ToyParams>)> {
    if count == 0 || cloud_size == 0 {
        return Err(Error::validation("count and cloud_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let means: Vec<[f64; 2]> = (0..count)
        .map(|_| [rng.random_range(-0.3..=0.3), rng.random_range(-0.3..=0.3)])
        .collect();
    let sigmas: Vec<f64> = (0..count)
        .map(|_| rng.random_range(0.01f64.powi(2)..=0.02f64.powi(2)).sqrt())
        .collect();

    let mut measures = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    let mut targets = Vec::with_capacity(count);
    for (mean, sigma) in means.into_iter().zip(sigmas) {
        let mut points = Vec::with_capacity(cloud_size * 2);
        for _ in 0..cloud_size {
            let zx: f64 = rng.sample(StandardNormal);
            let zy: f64 = rng.sample(StandardNormal);
            points.push(mean[0] + sigma * zx);
            points.push(mean[1] + sigma * zy);
        }
        measures.push(DiscreteMeasure::uniform(points, 2)?);
        targets.push(toy_field(mean, sigma));
        params.push(ToyParams { mean, sigma });
    }
    Ok((
        LabeledDataset::new(measures, Responses::Targets(targets), 2)?,
        params,
    ))
}

/// Two-class task: each cloud is drawn from a two-component Gaussian mixture.
/// Class 0 mixtures sit left of the origin, class 1 mixtures right of it.
///
/// Labels alternate 0, 1, 0, … so any prefix is balanced.
pub fn sample_two_class_dataset(count: usize, cloud_size: usize, seed: u64) -> Result<LabeledDataset> {
    if count == 0 || cloud_size == 0 {
        return Err(Error::validation("count and cloud_size must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut measures = Vec::with_capacity(count);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = (i % 2) as u8;
        let side = if label == 0 { -1.0 } else { 1.0 };
        let centers = [
            [
                side * 0.3 + rng.random_range(-0.15..0.15),
                0.3 + rng.random_range(-0.15..0.15),
            ],
            [
                side * 0.3 + rng.random_range(-0.15..0.15),
                -0.3 + rng.random_range(-0.15..0.15),
            ],
        ];
        let mix: f64 = rng.random_range(0.2..0.8);
        let spread = 0.1;
        let mut points = Vec::with_capacity(cloud_size * 2);
        for _ in 0..cloud_size {
            let c = if rng.random::<f64>() < mix {
                centers[0]
            } else {
                centers[1]
            };
            let zx: f64 = rng.sample(StandardNormal);
            let zy: f64 = rng.sample(StandardNormal);
            points.push(c[0] + spread * zx);
            points.push(c[1] + spread * zy);
        }
        measures.push(DiscreteMeasure::uniform(points, 2)?);
        labels.push(label);
    }
    LabeledDataset::new(measures, Responses::Labels(labels), 2)
}
