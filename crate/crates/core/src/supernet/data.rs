//! Seeded Gaussian-cluster classification data.

use ndarray::{Array2, ArrayView2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub classes: usize,
    pub features: usize,
    pub train: usize,
    pub valid: usize,
    /// Each class is a mixture of this many clusters.
    pub clusters_per_class: usize,
    pub center_scale: f64,
    pub noise: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            classes: 4,
            features: 16,
            train: 8192,
            valid: 2048,
            clusters_per_class: 16,
            center_scale: 2.0,
            noise: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<F> {
    pub train_x: Array2<F>,
    pub train_y: Vec<usize>,
    pub valid_x: Array2<F>,
    pub valid_y: Vec<usize>,
}

impl<F: Scalar> Dataset<F> {
    /// Class labels cycle through `0..classes`, so both splits are balanced.
    pub fn generate(cfg: &DatasetConfig, seed: u64) -> Result<Self> {
        if cfg.classes < 2 || cfg.features == 0 || cfg.train == 0 || cfg.valid == 0 || cfg.clusters_per_class == 0 {
            return Err(Error::Config("dataset needs two classes, features, clusters and nonempty splits".into()));
        }
        if !(cfg.noise >= 0.0 && cfg.center_scale > 0.0) {
            return Err(Error::Config("dataset noise must be ≥ 0 and center scale > 0".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let centers: Vec<Vec<f64>> = (0..cfg.classes * cfg.clusters_per_class)
            .map(|_| (0..cfg.features).map(|_| cfg.center_scale * unit.sample(&mut rng)).collect())
            .collect();
        let split = |n: usize, rng: &mut ChaCha8Rng| {
            let mut labels: Vec<usize> = (0..n).map(|i| i % cfg.classes).collect();
            labels.shuffle(rng);
            let mut x = Array2::zeros((n, cfg.features));
            for (i, &y) in labels.iter().enumerate() {
                let c = &centers[y * cfg.clusters_per_class + rng.random_range(0..cfg.clusters_per_class)];
                for j in 0..cfg.features {
                    x[[i, j]] = F::lit(c[j] + cfg.noise * unit.sample(rng));
                }
            }
            (x, labels)
        };
        let (train_x, train_y) = split(cfg.train, &mut rng);
        let (valid_x, valid_y) = split(cfg.valid, &mut rng);
        Ok(Dataset {
            train_x,
            train_y,
            valid_x,
            valid_y,
        })
    }

    pub fn train_batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> (Array2<F>, Vec<usize>) {
        gather(&self.train_x.view(), &self.train_y, rng, size)
    }

    pub fn valid_batch<R: Rng + ?Sized>(&self, rng: &mut R, size: usize) -> (Array2<F>, Vec<usize>) {
        gather(&self.valid_x.view(), &self.valid_y, rng, size)
    }
}

fn gather<F: Scalar, R: Rng + ?Sized>(x: &ArrayView2<F>, y: &[usize], rng: &mut R, size: usize) -> (Array2<F>, Vec<usize>) {
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..y.len())).collect();
    let bx = x.select(ndarray::Axis(0), &idx);
    (bx, idx.iter().map(|&i| y[i]).collect())
}
