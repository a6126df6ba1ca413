use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{ClassData, Dataset, Split};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    /// Isotropic Gaussian clusters around well-separated means.
    Blobs,
    /// Noisy circles in the first two coordinates, centred on the blob centroid.
    Rings,
}

fn default_separation() -> f64 {
    4.0
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub n_classes: usize,
    pub dim: usize,
    pub n_per_class: usize,
    /// Standard deviation of the isotropic noise.
    pub spread: f64,
    /// Distance between any two blob means.
    #[serde(default = "default_separation")]
    pub separation: f64,
    /// Radius increment between consecutive rings; by default the
    /// outermost ring has radius `separation`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ring_step: Option<f64>,
    /// Classes per split `[train, val, test]`; defaults to a quarter of the
    /// classes each for val and test.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_sizes: Option<[usize; 3]>,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn blobs(n_classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Blobs,
            n_classes,
            dim,
            n_per_class,
            spread,
            separation: default_separation(),
            ring_step: None,
            split_sizes: None,
            seed,
        }
    }

    pub fn rings(n_classes: usize, dim: usize, n_per_class: usize, spread: f64, seed: u64) -> Self {
        SyntheticSpec {
            kind: SyntheticKind::Rings,
            ..Self::blobs(n_classes, dim, n_per_class, spread, seed)
        }
    }

    pub fn split_sizes(&self) -> [usize; 3] {
        self.split_sizes.unwrap_or_else(|| {
            let q = self.n_classes / 4;
            [self.n_classes - 2 * q, q, q]
        })
    }
}

/// Blob means with pairwise distance exactly `separation` when
/// `dim >= n_classes` (scaled simplex on the coordinate axes), otherwise at
/// least `separation` by seeded rejection sampling.
pub fn blob_means(n_classes: usize, dim: usize, separation: f64, seed: u64) -> Vec<Vec<f64>> {
    if dim >= n_classes {
        let a = separation / 2f64.sqrt();
        return (0..n_classes)
            .map(|c| {
                let mut m = vec![0.0; dim];
                m[c] = a;
                m
            })
            .collect();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut radius = separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(n_classes);
    let mut failures = 0;
    while means.len() < n_classes {
        let cand: Vec<f64> = (0..dim)
            .map(|_| {
                let e: f64 = StandardNormal.sample(&mut rng);
                radius * e
            })
            .collect();
        let ok = means
            .iter()
            .all(|m| m.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() >= separation);
        if ok {
            means.push(cand);
        } else {
            failures += 1;
            if failures % 100 == 0 {
                radius *= 1.1;
            }
        }
    }
    means
}

/// Generates blobs or rings; identical specs give identical datasets.
pub fn make_synthetic(spec: &SyntheticSpec) -> Result<Dataset<f64>> {
    if spec.n_classes < 2 || spec.dim < 2 {
        return Err(Error::Config("synthetic data needs n_classes >= 2 and dim >= 2".into()));
    }
    if spec.ring_step.is_some_and(|r| !(r > 0.0)) {
        return Err(Error::Config("ring_step must be positive".into()));
    }
    if spec.n_per_class == 0 || !(spec.spread >= 0.0) || !(spec.separation > 0.0) {
        return Err(Error::Config("synthetic data needs n_per_class > 0, spread >= 0, separation > 0".into()));
    }
    let sizes = spec.split_sizes();
    if sizes.iter().sum::<usize>() != spec.n_classes {
        return Err(Error::Config(format!(
            "split sizes {sizes:?} do not add up to {} classes",
            spec.n_classes
        )));
    }
    let means = blob_means(spec.n_classes, spec.dim, spec.separation, spec.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(match spec.kind {
        SyntheticKind::Blobs => 2,
        SyntheticKind::Rings => 3,
    });
    let ring_step = spec.ring_step.unwrap_or(spec.separation / spec.n_classes as f64);
    let centroid: Vec<f64> = (0..spec.dim)
        .map(|j| means.iter().map(|m| m[j]).sum::<f64>() / spec.n_classes as f64)
        .collect();

    let mut classes = Vec::with_capacity(spec.n_classes);
    for c in 0..spec.n_classes {
        let split = if c < sizes[0] {
            Split::Train
        } else if c < sizes[0] + sizes[1] {
            Split::Val
        } else {
            Split::Test
        };
        let examples = (0..spec.n_per_class)
            .map(|_| {
                let mut x: Vec<f64> = match spec.kind {
                    SyntheticKind::Blobs => means[c].clone(),
                    SyntheticKind::Rings => {
                        let r = ring_step * (c + 1) as f64;
                        let angle = rng.random_range(0.0..std::f64::consts::TAU);
                        let mut x = centroid.clone();
                        x[0] += r * angle.cos();
                        x[1] += r * angle.sin();
                        x
                    }
                };
                for v in &mut x {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += spec.spread * e;
                }
                x
            })
            .collect();
        let prefix = match spec.kind {
            SyntheticKind::Blobs => "blob",
            SyntheticKind::Rings => "ring",
        };
        classes.push(ClassData {
            name: format!("{prefix}_{c:03}"),
            split,
            examples,
        });
    }
    Dataset::new(vec![spec.dim], classes)
}
