//! Synthetic stand-in for extractor features: seeded Gaussian clusters, one
//! per class, pushed through a fixed random projection.

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::KwsClass;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub samples_per_class: usize,
    pub feature_dim: usize,
    /// Standard deviation of the class centres around the origin.
    pub center_spread: f64,
    /// Within-class standard deviation.
    pub noise_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            samples_per_class: 2000,
            feature_dim: 12,
            center_spread: 2.0,
            noise_std: 0.4,
        }
    }
}

/// Feature vectors and labels for every synthetic sample, classes interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub classes: Vec<KwsClass>,
    pub features: Vec<Vec<f64>>,
}

pub fn generate(cfg: &SyntheticConfig, seed: u64) -> SyntheticData {
    let d = cfg.feature_dim;
    let mut geometry = rng::seeded(rng::derive(seed, "synthetic/geometry"));
    let gauss = |r: &mut rng::Rng| -> f64 { StandardNormal.sample(r) };
    let centers: Vec<Vec<f64>> = (0..KwsClass::ALL.len())
        .map(|_| (0..d).map(|_| cfg.center_spread * gauss(&mut geometry)).collect())
        .collect();
    // frozen projection, scaled to keep feature norms comparable to the latent ones
    let scale = 1.0 / (d as f64).sqrt();
    let projection: Vec<f64> = (0..d * d).map(|_| scale * gauss(&mut geometry)).collect();

    let noise = Normal::new(0.0, cfg.noise_std).expect("noise_std must be finite and >= 0");
    let mut sampler = rng::seeded(rng::derive(seed, "synthetic/samples"));
    let total = cfg.samples_per_class * KwsClass::ALL.len();
    let mut classes = Vec::with_capacity(total);
    let mut features = Vec::with_capacity(total);
    for k in 0..total {
        let class = KwsClass::ALL[k % KwsClass::ALL.len()];
        let latent: Vec<f64> = centers[class.index()]
            .iter()
            .map(|c| c + noise.sample(&mut sampler))
            .collect();
        let f = (0..d)
            .map(|i| {
                projection[i * d..(i + 1) * d]
                    .iter()
                    .zip(&latent)
                    .map(|(p, z)| p * z)
                    .sum()
            })
            .collect();
        classes.push(class);
        features.push(f);
    }
    SyntheticData { classes, features }
}
