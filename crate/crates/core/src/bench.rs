//! Synthetic 2-D benchmark: Gaussian blob classes on a circle plus an
//! open-domain pool drawn from one distant Gaussian cluster.
//!
//! Class-holdout splits of this dataset reproduce the structure of the
//! intent-detection task at desk scale: held-out blobs sit next to known
//! ones, while the open pool is easy data off to one side, unrelated to any
//! class.

use std::f64::consts::TAU;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Utterance};
use crate::rng;
use crate::trainer::TrainConfig;

/// Four of the six classes are known.
pub const KNOWN_RATIO: f64 = 2.0 / 3.0;
pub const VAL_FRACTION: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobConfig {
    pub classes: usize,
    pub per_class: usize,
    /// Radius of the circle the class centers sit on.
    pub radius: f64,
    /// Per-coordinate standard deviation of each blob.
    pub spread: f64,
    pub pool_size: usize,
    /// The pool cluster is centered at `(pool_distance, 0)`.
    pub pool_distance: f64,
    pub pool_spread: f64,
    pub seed: u64,
}

impl Default for BlobConfig {
    fn default() -> Self {
        BlobConfig {
            classes: 6,
            per_class: 200,
            radius: 1.0,
            spread: 0.025,
            pool_size: 1000,
            pool_distance: 2.0,
            pool_spread: 0.5,
            seed: 0,
        }
    }
}

impl BlobConfig {
    pub fn center(&self, class: usize) -> [f64; 2] {
        let angle = TAU * class as f64 / self.classes as f64;
        [self.radius * angle.cos(), self.radius * angle.sin()]
    }
}

/// Training settings sized for the benchmark: a small head, a larger step
/// and more patience than the text defaults, so a 10-seed run takes seconds.
pub fn train_config() -> TrainConfig {
    TrainConfig {
        hidden: vec![64, 64],
        lr: 3e-3,
        patience: 10,
        max_epochs: 300,
        ..TrainConfig::default()
    }
}

pub fn gaussian_blobs(cfg: &BlobConfig) -> Dataset {
    let mut r = rng::stream(cfg.seed, rng::STREAM_BENCH);
    let noise = Normal::new(0.0, cfg.spread).expect("positive spread");
    let mut examples = Vec::with_capacity(cfg.classes * cfg.per_class);
    for c in 0..cfg.classes {
        let [cx, cy] = cfg.center(c);
        for i in 0..cfg.per_class {
            let x = cx + noise.sample(&mut r);
            let y = cy + noise.sample(&mut r);
            examples.push((
                Utterance::numeric(format!("blob{c}-{i}"), vec![x, y]),
                format!("blob{c}"),
            ));
        }
    }
    Dataset::from_examples(examples).expect("ids are unique")
}

pub fn open_pool(cfg: &BlobConfig) -> Vec<Utterance> {
    let mut r = rng::stream(cfg.seed, rng::STREAM_BENCH + 1);
    let noise = Normal::new(0.0, cfg.pool_spread).expect("positive spread");
    (0..cfg.pool_size)
        .map(|i| {
            let x = cfg.pool_distance + noise.sample(&mut r);
            let y = noise.sample(&mut r);
            Utterance::numeric(format!("open-{i}"), vec![x, y])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let cfg = BlobConfig::default();
        let ds = gaussian_blobs(&cfg);
        assert_eq!(ds.len(), 1200);
        assert_eq!(ds.class_names.len(), 6);
        assert_eq!(ds, gaussian_blobs(&cfg));
        let pool = open_pool(&cfg);
        assert_eq!(pool.len(), 1000);
        let mean_x = pool
            .iter()
            .map(|u| match &u.content {
                crate::data::Content::Numeric(v) => v[0],
                _ => panic!("numeric pool"),
            })
            .sum::<f64>()
            / 1000.0;
        assert!((mean_x - 2.0).abs() < 0.05);
    }
}
