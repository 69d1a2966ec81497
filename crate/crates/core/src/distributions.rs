//! Data-generating distributions for the simulation harness and the
//! Monte-Carlo oracles.

use nalgebra::DMatrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{shape_normalize, LinalgError, SpdMatrix};
use crate::pairs::{Dataset, SchemeError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistributionError {
    #[error("invalid distribution: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Dataset(#[from] SchemeError),
}

/// Draws single observations in `R^q`.
pub trait ObservationSampler: Sync {
    fn dim(&self) -> usize;
    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]);
}

/// Named data distributions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub enum DistributionSpec {
    /// Independent standard exponential components.
    IidExponential,
    /// Independent standard normal components.
    IidGaussian,
    /// `Σ*^{1/2} Z / √(χ²_df / df)` with `Z` standard normal.
    EllipticalT { df: f64, scatter: Vec<Vec<f64>> },
}

impl DistributionSpec {
    /// Binds the distribution to a dimension, validating its parameters.
    pub fn sampler(&self, q: usize) -> Result<Sampler, DistributionError> {
        if q == 0 {
            return Err(DistributionError::Invalid("dimension must be positive".into()));
        }
        let kind = match self {
            DistributionSpec::IidExponential => Kind::Exponential,
            DistributionSpec::IidGaussian => Kind::Gaussian,
            DistributionSpec::EllipticalT { df, scatter } => {
                let chi = ChiSquared::new(*df)
                    .map_err(|e| DistributionError::Invalid(format!("df = {df}: {e}")))?;
                let sigma = scatter_matrix(scatter, q)?;
                let root = sigma.inv_sqrt().try_inverse().ok_or_else(|| {
                    DistributionError::Invalid("scatter matrix is singular".into())
                })?;
                Kind::EllipticalT {
                    df: *df,
                    chi,
                    root,
                }
            }
        };
        Ok(Sampler { q, kind })
    }

    /// Shape of the scatter matrix of the symmetrized distribution.
    pub fn true_shape(&self, q: usize) -> Result<SpdMatrix, DistributionError> {
        match self {
            // independent identically distributed components: the
            // symmetrized law is invariant under coordinate permutations
            // and sign changes, so its shape is the identity
            DistributionSpec::IidExponential | DistributionSpec::IidGaussian => {
                Ok(SpdMatrix::identity(q))
            }
            DistributionSpec::EllipticalT { scatter, .. } => {
                Ok(shape_normalize(&scatter_matrix(scatter, q)?))
            }
        }
    }
}

fn scatter_matrix(rows: &[Vec<f64>], q: usize) -> Result<SpdMatrix, DistributionError> {
    if rows.len() != q || rows.iter().any(|r| r.len() != q) {
        return Err(DistributionError::Invalid(format!("scatter matrix must be {q}x{q}")));
    }
    let m = DMatrix::from_fn(q, q, |i, j| rows[i][j]);
    Ok(SpdMatrix::from_matrix(m)?)
}

#[derive(Debug, Clone)]
pub struct Sampler {
    q: usize,
    kind: Kind,
}

#[derive(Debug, Clone)]
enum Kind {
    Exponential,
    Gaussian,
    EllipticalT {
        df: f64,
        chi: ChiSquared<f64>,
        root: DMatrix<f64>,
    },
}

impl ObservationSampler for Sampler {
    fn dim(&self) -> usize {
        self.q
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        match &self.kind {
            Kind::Exponential => {
                for v in out.iter_mut() {
                    let u: f64 = rng.random();
                    *v = -(1.0 - u).ln();
                }
            }
            Kind::Gaussian => {
                for v in out.iter_mut() {
                    *v = StandardNormal.sample(rng);
                }
            }
            Kind::EllipticalT { df, chi, root } => {
                let z: Vec<f64> = (0..self.q).map(|_| StandardNormal.sample(rng)).collect();
                let scale = (chi.sample(rng) / df).sqrt();
                for (i, v) in out.iter_mut().enumerate() {
                    *v = (0..self.q).map(|k| root[(i, k)] * z[k]).sum::<f64>() / scale;
                }
            }
        }
    }
}

/// Any closure `(rng, out)` as a sampler.
pub struct FnSampler<F> {
    q: usize,
    f: F,
}

impl<F: Fn(&mut dyn RngCore, &mut [f64]) + Sync> FnSampler<F> {
    pub fn new(q: usize, f: F) -> Self {
        Self { q, f }
    }
}

impl<F: Fn(&mut dyn RngCore, &mut [f64]) + Sync> ObservationSampler for FnSampler<F> {
    fn dim(&self) -> usize {
        self.q
    }

    fn sample_into(&self, rng: &mut dyn RngCore, out: &mut [f64]) {
        (self.f)(rng, out)
    }
}

/// `n` independent rows from `sampler`.
pub fn sample_dataset(
    sampler: &dyn ObservationSampler,
    n: usize,
    rng: &mut dyn RngCore,
) -> Result<Dataset, SchemeError> {
    let q = sampler.dim();
    let mut values = vec![0.0; n * q];
    for row in values.chunks_exact_mut(q) {
        sampler.sample_into(rng, row);
    }
    Dataset::from_flat(n, q, values)
}

/// `n` iid rows of the named distribution in dimension `q`.
pub fn generate_data(
    spec: &DistributionSpec,
    n: usize,
    q: usize,
    rng: &mut dyn RngCore,
) -> Result<Dataset, DistributionError> {
    if n == 0 {
        return Err(DistributionError::Invalid("n must be positive".into()));
    }
    let sampler = spec.sampler(q)?;
    Ok(sample_dataset(&sampler, n, rng)?)
}

/// Generator for replication `rep` of an experiment seeded with `seed`:
/// ChaCha8 keyed by `seed`, on stream `rep`. Streams never overlap, so the
/// draws of one replication do not depend on how many others ran.
pub fn replication_rng(seed: u64, rep: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_is_reproducible_and_centered() {
        let a = generate_data(&DistributionSpec::IidGaussian, 4000, 3, &mut replication_rng(1, 0))
            .unwrap();
        let b = generate_data(&DistributionSpec::IidGaussian, 4000, 3, &mut replication_rng(1, 0))
            .unwrap();
        assert_eq!(a, b);
        for j in 0..3 {
            let mean = a.rows().map(|r| r[j]).sum::<f64>() / 4000.0;
            // 4 standard errors of the mean
            assert!(mean.abs() < 4.0 / 4000f64.sqrt(), "{mean}");
        }
    }

    #[test]
    fn exponential_support_and_moments() {
        let data =
            generate_data(&DistributionSpec::IidExponential, 100_000, 1, &mut replication_rng(2, 0))
                .unwrap();
        assert!(data.as_flat().iter().all(|&v| v > 0.0));
        let n = data.n() as f64;
        let mean = data.as_flat().iter().sum::<f64>() / n;
        let var = data.as_flat().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!((mean - 1.0).abs() < 0.01, "{mean}");
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn elliptical_validation_and_shape() {
        let spec = DistributionSpec::EllipticalT {
            df: 5.0,
            scatter: vec![vec![4.0, 1.0], vec![1.0, 2.0]],
        };
        let shape = spec.true_shape(2).unwrap();
        assert!((shape.determinant() - 1.0).abs() < 1e-12);
        let data = generate_data(&spec, 10, 2, &mut replication_rng(3, 0)).unwrap();
        assert_eq!(data.q(), 2);

        let bad = DistributionSpec::EllipticalT {
            df: -1.0,
            scatter: vec![vec![1.0]],
        };
        assert!(bad.sampler(1).is_err());
        let wrong_dim = DistributionSpec::EllipticalT {
            df: 3.0,
            scatter: vec![vec![1.0]],
        };
        assert!(wrong_dim.sampler(2).is_err());
    }

    #[test]
    fn replication_streams_differ() {
        let mut a = replication_rng(7, 0);
        let mut b = replication_rng(7, 1);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}
