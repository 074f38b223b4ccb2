//! The 2D toy problem: three Gaussians for data, two for the latent side.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::gmm::GaussianMixture;

/// Data mixture: means (20, 20), (25, 10), (10, 26), equal weights.
pub fn toy_p0() -> GaussianMixture {
    GaussianMixture::uniform(
        vec![vec![20.0, 20.0], vec![25.0, 10.0], vec![10.0, 26.0]],
        vec![
            vec![vec![0.6 * 0.6, 0.7 * 0.7], vec![0.7 * 0.7, 1.4 * 1.4]],
            vec![vec![1.3 * 1.3, -0.9 * 0.9], vec![-0.9 * 0.9, 1.0]],
            vec![vec![1.2 * 1.2, 0.0], vec![0.0, 1.2 * 1.2]],
        ],
    )
    .expect("toy data mixture is valid")
}

/// Latent mixture: unit-covariance Gaussians at (5, -5) and (-5, 3).
pub fn toy_p1() -> GaussianMixture {
    let eye = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
    GaussianMixture::uniform(vec![vec![5.0, -5.0], vec![-5.0, 3.0]], vec![eye.clone(), eye])
        .expect("toy latent mixture is valid")
}

/// Smooth single-Gaussian pair used for convergence studies.
pub fn gaussian_pair() -> (GaussianMixture, GaussianMixture) {
    (
        GaussianMixture::gaussian(vec![2.0, -1.0], vec![vec![1.0, 0.3], vec![0.3, 0.5]])
            .expect("valid covariance"),
        GaussianMixture::standard_normal(2),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default = "toy_p0")]
    pub p0: GaussianMixture,
    #[serde(default = "toy_p1")]
    pub p1: GaussianMixture,
    #[serde(default = "default_n")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_n() -> usize {
    30_000
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            p0: toy_p0(),
            p1: toy_p1(),
            n: default_n(),
            seed: 0,
        }
    }
}

/// `(p0 samples, p1 samples)`, each `n x d`, from disjoint seeded streams.
pub fn make_toy(spec: &DatasetSpec) -> (Array2<f64>, Array2<f64>) {
    (
        spec.p0.sample(spec.n, spec.seed.wrapping_mul(2)),
        spec.p1.sample(spec.n, spec.seed.wrapping_mul(2).wrapping_add(1)),
    )
}
