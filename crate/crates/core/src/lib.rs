//! Symmetrized M-estimators of scatter computed on pairwise differences,
//! with complete, balanced and randomized pair designs, U-statistic
//! variance tools, and a Monte-Carlo simulation harness.

pub mod distributions;
pub mod linalg;
pub mod pairs;
pub mod scatter;
pub mod sim;
pub mod ustat;

pub use distributions::{generate_data, replication_rng, DistributionSpec, ObservationSampler};
pub use linalg::{geodesic_distance, shape_normalize, Cholesky, LinalgError, SpdMatrix, SymMatrix};
pub use pairs::{couple_permutation, pair_differences, Dataset, PairScheme, Permutation, SchemeError};
pub use scatter::{
    averaged_randomized_estimator, check_existence, symmetrized_scatter, ExistenceVerdict, RhoNu,
    RhoSpec, ScatterError, ScatterFunctional, SolverOptions, SolverReport, WeightedSample,
};
pub use ustat::{decompose, predict_variance, u_statistic, Decomposition, DifferenceKernel, UStatError};
