//! Hoeffding decomposition of order-two difference kernels.
//!
//! For a kernel `f` on differences with symmetrization
//! `fˢ(z) = (f(z) + f(−z))/2`, the U-statistic over a pair design splits into
//! the mean `f₀`, the first-order projection `f₁` and the doubly centered
//! remainder `f₂`, with covariance components `Γ₁ = Var f₁(X)` and
//! `Γ₂ = Var f₂(X, X')`.
//!
//! Two routes to these quantities are provided:
//! * plug-in ([`decompose`]): empirical versions from one dataset, O(n²);
//! * population Monte Carlo ([`population_components`]): unbiased
//!   estimates from independent pairs, triples and quadruples of draws.
//!
//! Matrix-valued kernels are vectorized as the upper triangle in row-major
//! order, `(0,0), (0,1), …, (0,q−1), (1,1), …`, off-diagonals unscaled.

use nalgebra::DMatrix;
use rand::RngCore;
use thiserror::Error;

use crate::distributions::{replication_rng, sample_dataset, ObservationSampler};
use crate::linalg::SymMatrix;
use crate::pairs::{Dataset, PairScheme, SchemeError};
use crate::scatter::{influence_spherical_m, influence_spherical_tyler, RhoSpec};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum UStatError {
    #[error("need at least 3 observations, got {0}")]
    TooFewObservations(usize),
    #[error("no finite-sample variance identity for {0:?}")]
    UnsupportedScheme(PairScheme),
    #[error("need at least {min} replications, got {reps}")]
    TooFewReplications { reps: usize, min: usize },
    #[error("kernel dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

/// A function of one difference vector `z ∈ R^q`, with values in `R^r`.
pub trait DifferenceKernel: Sync {
    /// Output dimension `r` for inputs in `R^q`.
    fn output_dim(&self, q: usize) -> usize;

    fn eval(&self, z: &[f64], out: &mut [f64]);

    /// `f(−z) = f(z)` for all `z`; lets [`eval_symmetrized`] skip the
    /// second evaluation.
    ///
    /// [`eval_symmetrized`]: DifferenceKernel::eval_symmetrized
    fn is_even(&self) -> bool {
        false
    }

    /// `fˢ(z) = (f(z) + f(−z))/2`.
    fn eval_symmetrized(&self, z: &[f64], out: &mut [f64]) {
        self.eval(z, out);
        if self.is_even() {
            return;
        }
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        let mut other = vec![0.0; out.len()];
        self.eval(&neg, &mut other);
        for (o, b) in out.iter_mut().zip(&other) {
            *o = 0.5 * (*o + b);
        }
    }
}

/// `f(z) = c`.
pub struct ConstantKernel(pub Vec<f64>);

impl DifferenceKernel for ConstantKernel {
    fn output_dim(&self, _q: usize) -> usize {
        self.0.len()
    }

    fn eval(&self, _z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.0);
    }

    fn is_even(&self) -> bool {
        true
    }
}

/// `f(z) = z`; odd, so its symmetrization vanishes.
pub struct IdentityKernel;

impl DifferenceKernel for IdentityKernel {
    fn output_dim(&self, q: usize) -> usize {
        q
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        out.copy_from_slice(z);
    }
}

/// `f(z) = min(‖z‖, cap)`.
pub struct ClippedNorm {
    pub cap: f64,
}

impl DifferenceKernel for ClippedNorm {
    fn output_dim(&self, _q: usize) -> usize {
        1
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        out[0] = z.iter().map(|v| v * v).sum::<f64>().sqrt().min(self.cap);
    }

    fn is_even(&self) -> bool {
        true
    }
}

/// `f(z) = vech(z zᵀ)`.
pub struct OuterProduct;

impl DifferenceKernel for OuterProduct {
    fn output_dim(&self, q: usize) -> usize {
        vech_len(q)
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        let mut k = 0;
        for i in 0..z.len() {
            for j in i..z.len() {
                out[k] = z[i] * z[j];
                k += 1;
            }
        }
    }

    fn is_even(&self) -> bool {
        true
    }
}

/// A symmetric-matrix valued even kernel `J`, vectorized, with `J(0) := 0`.
pub struct InfluenceKernel<F> {
    f: F,
}

impl<F: Fn(&[f64]) -> SymMatrix + Sync> InfluenceKernel<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F: Fn(&[f64]) -> SymMatrix + Sync> DifferenceKernel for InfluenceKernel<F> {
    fn output_dim(&self, q: usize) -> usize {
        vech_len(q)
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        if z.iter().all(|v| *v == 0.0) {
            out.fill(0.0);
        } else {
            out.copy_from_slice(&(self.f)(z).upper());
        }
    }

    fn is_even(&self) -> bool {
        true
    }
}

/// Tyler's spherical influence function as a kernel.
pub fn tyler_influence_kernel() -> InfluenceKernel<impl Fn(&[f64]) -> SymMatrix + Sync> {
    InfluenceKernel::new(|z: &[f64]| {
        influence_spherical_tyler(z).expect("zero vector handled by the kernel")
    })
}

/// Spherical influence function of an M-functional as a kernel.
pub fn m_influence_kernel<R: RhoSpec + Sync>(
    rho: R,
    kappa: f64,
) -> InfluenceKernel<impl Fn(&[f64]) -> SymMatrix + Sync> {
    InfluenceKernel::new(move |z: &[f64]| influence_spherical_m(z, &rho, kappa))
}

/// Arbitrary closure kernel with fixed output dimension.
pub struct FnKernel<F> {
    r: usize,
    f: F,
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> FnKernel<F> {
    pub fn new(r: usize, f: F) -> Self {
        Self { r, f }
    }
}

impl<F: Fn(&[f64], &mut [f64]) + Sync> DifferenceKernel for FnKernel<F> {
    fn output_dim(&self, _q: usize) -> usize {
        self.r
    }

    fn eval(&self, z: &[f64], out: &mut [f64]) {
        (self.f)(z, out)
    }
}

pub fn vech_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// Plug-in Hoeffding decomposition of a kernel on one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub n: usize,
    /// `f̂₀`: mean of `fˢ(X_i − X_j)` over all pairs.
    pub f0: Vec<f64>,
    /// `f̂₁(X_i) = (n−1)⁻¹ Σ_{j≠i} fˢ(X_i − X_j) − f̂₀`.
    pub f1_values: Vec<Vec<f64>>,
    /// Sample covariance (divisor `n − 1`) of the `f̂₁` values.
    pub gamma1: DMatrix<f64>,
    /// Mean of `f̂₂ f̂₂ᵀ` over all pairs.
    pub gamma2: DMatrix<f64>,
}

impl Decomposition {
    pub fn output_dim(&self) -> usize {
        self.f0.len()
    }

    /// `f̂₂(X_i, X_j)` given the kernel value `fˢ(X_i − X_j)`.
    pub fn residual(&self, i: usize, j: usize, value: &[f64]) -> Vec<f64> {
        value
            .iter()
            .enumerate()
            .map(|(k, v)| v - self.f0[k] - self.f1_values[i][k] - self.f1_values[j][k])
            .collect()
    }
}

fn kernel_dim(kernel: &dyn DifferenceKernel, q: usize) -> Result<usize, UStatError> {
    match kernel.output_dim(q) {
        0 => Err(UStatError::DimensionMismatch("kernel has no outputs".into())),
        r => Ok(r),
    }
}

fn diff(data: &Dataset, i: usize, j: usize, out: &mut [f64]) {
    for ((o, a), b) in out.iter_mut().zip(data.row(i)).zip(data.row(j)) {
        *o = a - b;
    }
}

fn add_outer(acc: &mut DMatrix<f64>, v: &[f64], w: f64) {
    let r = v.len();
    for a in 0..r {
        let wa = w * v[a];
        for b in a..r {
            acc[(a, b)] += wa * v[b];
        }
    }
}

fn fill_lower(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for a in 0..m.nrows() {
        for b in 0..a {
            m[(a, b)] = m[(b, a)];
        }
    }
    m
}

/// Plug-in decomposition over all `n(n−1)/2` pairs.
pub fn decompose(data: &Dataset, kernel: &dyn DifferenceKernel) -> Result<Decomposition, UStatError> {
    let n = data.n();
    if n < 3 {
        return Err(UStatError::TooFewObservations(n));
    }
    let q = data.q();
    let r = kernel_dim(kernel, q)?;
    let pairs = (n * (n - 1) / 2) as f64;
    let mut z = vec![0.0; q];
    let mut value = vec![0.0; r];

    let mut row_sums = vec![vec![0.0; r]; n];
    let mut total = vec![0.0; r];
    for i in 0..n {
        for j in (i + 1)..n {
            diff(data, i, j, &mut z);
            kernel.eval_symmetrized(&z, &mut value);
            for k in 0..r {
                row_sums[i][k] += value[k];
                row_sums[j][k] += value[k];
                total[k] += value[k];
            }
        }
    }
    let f0: Vec<f64> = total.iter().map(|t| t / pairs).collect();
    let f1_values: Vec<Vec<f64>> = row_sums
        .iter()
        .map(|s| s.iter().zip(&f0).map(|(v, m)| v / (n - 1) as f64 - m).collect())
        .collect();

    let mut gamma1 = DMatrix::zeros(r, r);
    for f1 in &f1_values {
        add_outer(&mut gamma1, f1, 1.0 / (n - 1) as f64);
    }

    let mut gamma2 = DMatrix::zeros(r, r);
    let mut resid = vec![0.0; r];
    for i in 0..n {
        for j in (i + 1)..n {
            diff(data, i, j, &mut z);
            kernel.eval_symmetrized(&z, &mut value);
            for k in 0..r {
                resid[k] = value[k] - f0[k] - f1_values[i][k] - f1_values[j][k];
            }
            add_outer(&mut gamma2, &resid, 1.0 / pairs);
        }
    }

    Ok(Decomposition {
        n,
        f0,
        f1_values,
        gamma1: fill_lower(gamma1),
        gamma2: fill_lower(gamma2),
    })
}

/// Plug-in version of the influence-function decomposition: `Ĥ₁(X_i)` are
/// the `f1_values` and `Ĥ₂(X_i, X_j)` the pair residuals of the kernel
/// `vech J` (with `J(0) := 0`). The plug-in recenters by `f̂₀`, which
/// vanishes in the population because `∫ J dQ = 0`.
pub fn influence_decomposition<F>(data: &Dataset, influence: F) -> Result<Decomposition, UStatError>
where
    F: Fn(&[f64]) -> SymMatrix + Sync,
{
    decompose(data, &InfluenceKernel::new(influence))
}

/// `fˢ` averaged over the pairs of `scheme`.
pub fn u_statistic(
    data: &Dataset,
    kernel: &dyn DifferenceKernel,
    scheme: &PairScheme,
) -> Result<Vec<f64>, UStatError> {
    let pairs = scheme.pairs(data.n())?;
    let q = data.q();
    let r = kernel_dim(kernel, q)?;
    let mut z = vec![0.0; q];
    let mut value = vec![0.0; r];
    let mut total = vec![0.0; r];
    for &(i, j) in &pairs {
        diff(data, i, j, &mut z);
        kernel.eval_symmetrized(&z, &mut value);
        for (t, v) in total.iter_mut().zip(&value) {
            *t += v;
        }
    }
    Ok(total.iter().map(|t| t / pairs.len() as f64).collect())
}

/// The three terms of `U = f₀ + 2∫f₁ dP̂_n + M`, each computed separately.
#[derive(Debug, Clone, PartialEq)]
pub struct HajekParts {
    pub u: Vec<f64>,
    pub f0: Vec<f64>,
    /// `2 n⁻¹ Σ f̂₁(X_i)`.
    pub linear: Vec<f64>,
    /// Mean of `f̂₂` over the pairs of the scheme.
    pub remainder: Vec<f64>,
}

pub fn hajek_parts(
    data: &Dataset,
    kernel: &dyn DifferenceKernel,
    dec: &Decomposition,
    scheme: &PairScheme,
) -> Result<HajekParts, UStatError> {
    let n = data.n();
    if dec.n != n {
        return Err(UStatError::DimensionMismatch(format!(
            "decomposition of {} observations applied to {n}",
            dec.n
        )));
    }
    let r = dec.output_dim();
    if kernel_dim(kernel, data.q())? != r {
        return Err(UStatError::DimensionMismatch("kernel and decomposition differ".into()));
    }
    let u = u_statistic(data, kernel, scheme)?;
    let pairs = scheme.pairs(n)?;
    let mut z = vec![0.0; data.q()];
    let mut value = vec![0.0; r];
    let mut remainder = vec![0.0; r];
    for &(i, j) in &pairs {
        diff(data, i, j, &mut z);
        kernel.eval_symmetrized(&z, &mut value);
        for (m, v) in remainder.iter_mut().zip(dec.residual(i, j, &value)) {
            *m += v;
        }
    }
    let linear = (0..r)
        .map(|k| 2.0 * dec.f1_values.iter().map(|f| f[k]).sum::<f64>() / n as f64)
        .collect();
    Ok(HajekParts {
        u,
        f0: dec.f0.clone(),
        linear,
        remainder: remainder.iter().map(|m| m / pairs.len() as f64).collect(),
    })
}

/// Predicted `n · Var(U)` for a design.
#[derive(Debug, Clone, PartialEq)]
pub struct VariancePrediction {
    pub scheme: PairScheme,
    pub n: usize,
    pub predicted: DMatrix<f64>,
}

/// `4Γ₁ + 2(n−1)⁻¹Γ₂` for the complete design, `4Γ₁ + d⁻¹Γ₂` for the
/// balanced design of depth `d`.
pub fn predict_variance_from(
    gamma1: &DMatrix<f64>,
    gamma2: &DMatrix<f64>,
    scheme: &PairScheme,
    n: usize,
) -> Result<VariancePrediction, UStatError> {
    scheme.validate(n)?;
    let weight = match *scheme {
        PairScheme::Complete => 2.0 / (n - 1) as f64,
        PairScheme::Balanced { d } => 1.0 / d as f64,
        PairScheme::RandomizedCycles { .. } => return Err(UStatError::UnsupportedScheme(*scheme)),
    };
    Ok(VariancePrediction {
        scheme: *scheme,
        n,
        predicted: gamma1 * 4.0 + gamma2 * weight,
    })
}

pub fn predict_variance(
    dec: &Decomposition,
    scheme: &PairScheme,
    n: usize,
) -> Result<VariancePrediction, UStatError> {
    predict_variance_from(&dec.gamma1, &dec.gamma2, scheme, n)
}

/// Pair depth for the limit covariance of the scatter estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Depth {
    Finite(usize),
    /// The complete design, or any depth growing with `n`.
    Infinite,
}

/// Limit covariance of `√n (Σ(Q̂_{n,d}) − Σ(Q))`: `4Γ₁ + d⁻¹Γ₂`.
pub fn scatter_covariance(gamma1: &DMatrix<f64>, gamma2: &DMatrix<f64>, depth: Depth) -> DMatrix<f64> {
    match depth {
        Depth::Infinite => gamma1 * 4.0,
        Depth::Finite(d) => {
            assert!(d > 0, "depth must be positive");
            gamma1 * 4.0 + gamma2 / d as f64
        }
    }
}

/// [`scatter_covariance`] for a decomposition of the influence kernel.
/// Only meaningful for spherical `Q`, where `J` is known in closed form.
pub fn predict_scatter_covariance(dec_of_j: &Decomposition, depth: Depth) -> DMatrix<f64> {
    scatter_covariance(&dec_of_j.gamma1, &dec_of_j.gamma2, depth)
}

/// Replicate values of the U-statistic on `reps` independent datasets.
/// Replication `k` draws its data from [`replication_rng`]`(seed, k)`.
pub fn simulate_u_statistics(
    sampler: &dyn ObservationSampler,
    kernel: &dyn DifferenceKernel,
    scheme: &PairScheme,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>, UStatError> {
    scheme.validate(n)?;
    (0..reps)
        .map(|rep| {
            let mut rng = replication_rng(seed, rep as u64);
            let data = sample_dataset(sampler, n, &mut rng)?;
            u_statistic(&data, kernel, scheme)
        })
        .collect()
}

/// Sample covariance (divisor `m − 1`) of a list of vectors.
pub fn sample_covariance(values: &[Vec<f64>]) -> DMatrix<f64> {
    let m = values.len();
    let r = values.first().map_or(0, Vec::len);
    let mean: Vec<f64> = (0..r)
        .map(|k| values.iter().map(|v| v[k]).sum::<f64>() / m as f64)
        .collect();
    let mut acc = DMatrix::zeros(r, r);
    let mut centered = vec![0.0; r];
    for v in values {
        for k in 0..r {
            centered[k] = v[k] - mean[k];
        }
        add_outer(&mut acc, &centered, 1.0 / (m as f64 - 1.0));
    }
    fill_lower(acc)
}

/// `n ×` the sample covariance of the U-statistic over `reps` simulated
/// datasets.
pub fn empirical_u_variance(
    sampler: &dyn ObservationSampler,
    kernel: &dyn DifferenceKernel,
    scheme: &PairScheme,
    n: usize,
    reps: usize,
    seed: u64,
) -> Result<DMatrix<f64>, UStatError> {
    if reps < 100 {
        return Err(UStatError::TooFewReplications { reps, min: 100 });
    }
    let values = simulate_u_statistics(sampler, kernel, scheme, n, reps, seed)?;
    Ok(sample_covariance(&values) * n as f64)
}

/// A Monte-Carlo matrix estimate with entrywise standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixEstimate {
    pub value: DMatrix<f64>,
    pub std_error: DMatrix<f64>,
}

/// Population quantities estimated from independent draws.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationComponents {
    pub f0: Vec<f64>,
    /// `Var f(X₁ − X₂)` (unsymmetrized kernel).
    pub gamma: MatrixEstimate,
    /// `Var fˢ(X₁ − X₂)`.
    pub gamma_s: MatrixEstimate,
    /// `Cov(fˢ(X − X'), fˢ(X − X''))`, which equals `Var f₁(X)`.
    pub gamma1: MatrixEstimate,
    /// `E[D Dᵀ]/4` with `D = h(1,2) − h(1,3) − h(4,2) + h(4,3)`, `h(i,j) =
    /// fˢ(X_i − X_j)`: the `f₀` and `f₁` parts cancel in `D` and the four
    /// `f₂` terms are uncorrelated, so this equals `Var f₂(X, X')`.
    pub gamma2: MatrixEstimate,
}

/// Streaming mean and entrywise standard error of per-draw matrices.
struct TermAverager {
    count: usize,
    sum: DMatrix<f64>,
    sum_sq: DMatrix<f64>,
}

impl TermAverager {
    fn new(r: usize) -> Self {
        Self {
            count: 0,
            sum: DMatrix::zeros(r, r),
            sum_sq: DMatrix::zeros(r, r),
        }
    }

    fn push(&mut self, term: &DMatrix<f64>) {
        self.count += 1;
        self.sum += term;
        self.sum_sq += term.component_mul(term);
    }

    fn finish(&self) -> MatrixEstimate {
        let m = self.count as f64;
        let value = &self.sum / m;
        let std_error = DMatrix::from_fn(value.nrows(), value.ncols(), |a, b| {
            let var = (self.sum_sq[(a, b)] / m - value[(a, b)].powi(2)).max(0.0) * m / (m - 1.0);
            (var / m).sqrt()
        });
        MatrixEstimate { value, std_error }
    }
}

fn outer(a: &[f64], b: &[f64]) -> DMatrix<f64> {
    // symmetrized cross product, so cross-covariances come out symmetric
    DMatrix::from_fn(a.len(), a.len(), |i, j| 0.5 * (a[i] * b[j] + a[j] * b[i]))
}

/// Unbiased Monte-Carlo estimates of `f₀, Γ, Γˢ, Γ₁, Γ₂` from `draws`
/// independent pairs, triples and quadruples of observations (fresh draws
/// for each of the three estimators).
pub fn population_components(
    sampler: &dyn ObservationSampler,
    kernel: &dyn DifferenceKernel,
    draws: usize,
    rng: &mut dyn RngCore,
) -> Result<PopulationComponents, UStatError> {
    if draws < 2 {
        return Err(UStatError::TooFewReplications { reps: draws, min: 2 });
    }
    let q = sampler.dim();
    let r = kernel_dim(kernel, q)?;
    let mut x: Vec<Vec<f64>> = vec![vec![0.0; q]; 4];
    let mut z = vec![0.0; q];
    let h = |a: &[f64], b: &[f64], z: &mut Vec<f64>, out: &mut [f64]| {
        for ((zi, ai), bi) in z.iter_mut().zip(a).zip(b) {
            *zi = ai - bi;
        }
        kernel.eval_symmetrized(z, out);
    };

    // pairs: f0, Γ and Γˢ
    let mut raw = vec![vec![0.0; r]; draws];
    let mut sym = vec![vec![0.0; r]; draws];
    for k in 0..draws {
        sampler.sample_into(rng, &mut x[0]);
        sampler.sample_into(rng, &mut x[1]);
        for ((zi, a), b) in z.iter_mut().zip(&x[0]).zip(&x[1]) {
            *zi = a - b;
        }
        kernel.eval(&z, &mut raw[k]);
        kernel.eval_symmetrized(&z, &mut sym[k]);
    }
    let f0: Vec<f64> = (0..r).map(|c| sym.iter().map(|v| v[c]).sum::<f64>() / draws as f64).collect();
    let raw_mean: Vec<f64> =
        (0..r).map(|c| raw.iter().map(|v| v[c]).sum::<f64>() / draws as f64).collect();
    let bessel = draws as f64 / (draws as f64 - 1.0);
    let covariance_of = |values: &[Vec<f64>], mean: &[f64]| {
        let mut avg = TermAverager::new(r);
        for v in values {
            let c: Vec<f64> = v.iter().zip(mean).map(|(a, m)| a - m).collect();
            avg.push(&(outer(&c, &c) * bessel));
        }
        avg.finish()
    };
    let gamma = covariance_of(&raw, &raw_mean);
    let gamma_s = covariance_of(&sym, &f0);

    // triples: Γ₁ as the covariance of two kernel values sharing one point
    let mut a = vec![vec![0.0; r]; draws];
    let mut b = vec![vec![0.0; r]; draws];
    for k in 0..draws {
        for p in x.iter_mut().take(3) {
            sampler.sample_into(rng, p);
        }
        h(&x[0], &x[1], &mut z, &mut a[k]);
        h(&x[0], &x[2], &mut z, &mut b[k]);
    }
    let mean_a: Vec<f64> = (0..r).map(|c| a.iter().map(|v| v[c]).sum::<f64>() / draws as f64).collect();
    let mean_b: Vec<f64> = (0..r).map(|c| b.iter().map(|v| v[c]).sum::<f64>() / draws as f64).collect();
    let mut avg = TermAverager::new(r);
    for k in 0..draws {
        let ca: Vec<f64> = a[k].iter().zip(&mean_a).map(|(v, m)| v - m).collect();
        let cb: Vec<f64> = b[k].iter().zip(&mean_b).map(|(v, m)| v - m).collect();
        avg.push(&(outer(&ca, &cb) * bessel));
    }
    let gamma1 = avg.finish();

    // quadruples: Γ₂ from the double difference
    let mut avg = TermAverager::new(r);
    let mut vals = vec![vec![0.0; r]; 4];
    for _ in 0..draws {
        for p in x.iter_mut() {
            sampler.sample_into(rng, p);
        }
        h(&x[0], &x[1], &mut z, &mut vals[0]);
        h(&x[0], &x[2], &mut z, &mut vals[1]);
        h(&x[3], &x[1], &mut z, &mut vals[2]);
        h(&x[3], &x[2], &mut z, &mut vals[3]);
        let dd: Vec<f64> = (0..r)
            .map(|c| vals[0][c] - vals[1][c] - vals[2][c] + vals[3][c])
            .collect();
        avg.push(&(outer(&dd, &dd) * 0.25));
    }
    let gamma2 = avg.finish();

    Ok(PopulationComponents {
        f0,
        gamma,
        gamma_s,
        gamma1,
        gamma2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::replication_rng;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn gaussian_data(n: usize, q: usize, seed: u64) -> Dataset {
        let mut rng = replication_rng(seed, 0);
        let values = (0..n * q).map(|_| rng.sample(StandardNormal)).collect();
        Dataset::from_flat(n, q, values).unwrap()
    }

    #[test]
    fn constant_kernel_has_no_fluctuation() {
        let data = gaussian_data(10, 2, 1);
        let dec = decompose(&data, &ConstantKernel(vec![2.5, -1.0])).unwrap();
        assert_eq!(dec.f0, vec![2.5, -1.0]);
        assert!(dec.f1_values.iter().flatten().all(|v| v.abs() < 1e-14));
        assert!(dec.gamma1.norm() < 1e-25);
        assert!(dec.gamma2.norm() < 1e-25);
    }

    #[test]
    fn odd_kernel_is_annihilated() {
        let data = gaussian_data(9, 3, 2);
        let dec = decompose(&data, &IdentityKernel).unwrap();
        assert!(dec.f0.iter().all(|v| *v == 0.0));
        assert!(dec.gamma1.iter().all(|v| *v == 0.0));
        assert!(dec.gamma2.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn clipped_norm_matches_double_loop() {
        let data = gaussian_data(8, 2, 3);
        let kernel = ClippedNorm { cap: 2.0 };
        let dec = decompose(&data, &kernel).unwrap();
        let f = |i: usize, j: usize| {
            let (a, b) = (data.row(i), data.row(j));
            ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt().min(2.0)
        };
        let mut total = 0.0;
        for i in 0..8 {
            for j in 0..8 {
                if i != j {
                    total += f(i, j);
                }
            }
        }
        let f0 = total / 56.0;
        assert!((dec.f0[0] - f0).abs() < 1e-12);
        for i in 0..8 {
            let own = (0..8).filter(|&j| j != i).map(|j| f(i, j)).sum::<f64>() / 7.0 - f0;
            assert!((dec.f1_values[i][0] - own).abs() < 1e-12);
        }
    }

    #[test]
    fn decomposition_invariants() {
        let data = gaussian_data(15, 3, 4);
        let dec = decompose(&data, &OuterProduct).unwrap();
        for k in 0..6 {
            let mean = dec.f1_values.iter().map(|f| f[k]).sum::<f64>() / 15.0;
            assert!(mean.abs() < 1e-10);
        }
        for g in [&dec.gamma1, &dec.gamma2] {
            assert_eq!(g, &g.transpose());
            let eig = g.clone().symmetric_eigenvalues();
            assert!(eig.iter().all(|&l| l >= -1e-10));
        }
    }

    #[test]
    fn decompose_needs_three_points() {
        let data = gaussian_data(2, 2, 5);
        assert_eq!(
            decompose(&data, &OuterProduct),
            Err(UStatError::TooFewObservations(2))
        );
    }

    #[test]
    fn prediction_examples() {
        let g1 = DMatrix::from_row_slice(1, 1, &[0.3]);
        let zero = DMatrix::zeros(1, 1);
        for scheme in [PairScheme::Complete, PairScheme::Balanced { d: 3 }] {
            let p = predict_variance_from(&g1, &zero, &scheme, 21).unwrap();
            assert_eq!(p.predicted[(0, 0)], 1.2);
        }
        let g2 = DMatrix::from_row_slice(1, 1, &[0.7]);
        let complete = predict_variance_from(&g1, &g2, &PairScheme::Complete, 21).unwrap();
        let balanced = predict_variance_from(&g1, &g2, &PairScheme::Balanced { d: 10 }, 21).unwrap();
        assert_eq!(complete.predicted, balanced.predicted);
        assert!(matches!(
            predict_variance_from(&g1, &g2, &PairScheme::RandomizedCycles { d: 1, seed: 0 }, 21),
            Err(UStatError::UnsupportedScheme(_))
        ));
    }

    #[test]
    fn scatter_covariance_depths() {
        let g1 = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.2, 0.5]);
        let g2 = DMatrix::from_row_slice(2, 2, &[2.0, -0.1, -0.1, 1.0]);
        assert_eq!(scatter_covariance(&g1, &g2, Depth::Infinite), &g1 * 4.0);
        assert_eq!(scatter_covariance(&g1, &g2, Depth::Finite(1)), &g1 * 4.0 + &g2);
    }

    #[test]
    fn zero_influence_gives_zero_decomposition() {
        let data = gaussian_data(7, 2, 6);
        let dec = influence_decomposition(&data, |_z: &[f64]| SymMatrix::zeros(2)).unwrap();
        assert!(dec.f0.iter().chain(dec.f1_values.iter().flatten()).all(|v| *v == 0.0));
    }

    #[test]
    fn influence_residuals_are_doubly_centered() {
        let data = gaussian_data(12, 3, 7);
        let kernel = tyler_influence_kernel();
        let dec = decompose(&data, &kernel).unwrap();
        let parts = hajek_parts(&data, &kernel, &dec, &PairScheme::Complete).unwrap();
        assert!(parts.remainder.iter().all(|m| m.abs() < 1e-10));
    }

    #[test]
    fn empirical_variance_of_constant_kernel() {
        let sampler = crate::distributions::DistributionSpec::IidGaussian.sampler(2).unwrap();
        let v = empirical_u_variance(
            &sampler,
            &ConstantKernel(vec![1.0]),
            &PairScheme::Balanced { d: 2 },
            9,
            100,
            3,
        )
        .unwrap();
        assert_eq!(v[(0, 0)], 0.0);
        assert!(empirical_u_variance(&sampler, &OuterProduct, &PairScheme::Complete, 9, 10, 3).is_err());
    }

    #[test]
    fn complete_and_full_depth_balanced_coincide() {
        let sampler = crate::distributions::DistributionSpec::IidGaussian.sampler(2).unwrap();
        let kernel = ClippedNorm { cap: 2.0 };
        let a = simulate_u_statistics(&sampler, &kernel, &PairScheme::Complete, 11, 50, 9).unwrap();
        let b = simulate_u_statistics(&sampler, &kernel, &PairScheme::Balanced { d: 5 }, 11, 50, 9)
            .unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x[0] - y[0]).abs() < 1e-12);
        }
    }
}
