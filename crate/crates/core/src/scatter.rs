//! M-functionals of scatter and Tyler's functional on weighted samples,
//! plus the symmetrized estimators built on pair designs.
//!
//! Both solvers run the classical fixed-point iteration
//! (`Σ ← Ψ(Σ)` for ρ-driven functionals, `Σ ← shape(T(Σ))` for Tyler),
//! halving the step whenever the objective would increase. Convergence is
//! declared on the whitened residual `‖L⁻¹ Ψ(Σ) L⁻ᵀ − I‖_F`, which is
//! invariant under `Σ ↦ BΣBᵀ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{shape_normalize, Cholesky, LinalgError, SpdMatrix, SymMatrix};
use crate::pairs::{
    cycle_pairs, differences_for, pair_differences, scheme_permutations, Dataset, PairScheme,
    SchemeError,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScatterError {
    #[error("fixed-point iteration did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged {
        iterations: usize,
        residual: f64,
        last: Box<SolverReport>,
    },
    #[error("degenerate sample: {0}")]
    DegenerateSample(String),
    #[error("sample point {index} is the zero vector")]
    ZeroVectorInSample { index: usize },
    #[error("influence function undefined at the zero vector")]
    ZeroVector,
    #[error("invalid rho: {0}")]
    InvalidRho(String),
    #[error("invalid weighted sample: {0}")]
    InvalidSample(String),
    #[error("invalid solver option: {0}")]
    InvalidOptions(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Scheme(#[from] SchemeError),
}

/// The function ρ driving an M-functional, with `ψ(s) = s ρ'(s)`.
pub trait RhoSpec {
    fn rho(&self, s: f64) -> f64;
    fn rho_prime(&self, s: f64) -> f64;
    fn rho_double_prime(&self, s: f64) -> f64;
    /// `lim_{s→∞} ψ(s)`.
    fn psi_infinity(&self) -> f64;

    fn psi(&self, s: f64) -> f64 {
        s * self.rho_prime(s)
    }
}

/// `ρ_ν(s) = (ν + q) log(s + ν)`, the multivariate t likelihood.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RhoNu {
    nu: f64,
    q: usize,
}

impl RhoNu {
    pub fn new(nu: f64, q: usize) -> Result<Self, ScatterError> {
        if !(nu > 0.0 && nu.is_finite()) {
            return Err(ScatterError::InvalidRho(format!("nu must be positive, got {nu}")));
        }
        if q == 0 {
            return Err(ScatterError::InvalidRho("dimension must be positive".into()));
        }
        Ok(Self { nu, q })
    }

    pub fn nu(&self) -> f64 {
        self.nu
    }

    pub fn q(&self) -> usize {
        self.q
    }

    fn coef(&self) -> f64 {
        self.nu + self.q as f64
    }
}

impl RhoSpec for RhoNu {
    fn rho(&self, s: f64) -> f64 {
        self.coef() * (s + self.nu).ln()
    }

    fn rho_prime(&self, s: f64) -> f64 {
        self.coef() / (s + self.nu)
    }

    fn rho_double_prime(&self, s: f64) -> f64 {
        -self.coef() / (s + self.nu).powi(2)
    }

    fn psi_infinity(&self) -> f64 {
        self.coef()
    }
}

/// Spot-checks the requirements on ρ for dimension `q`: `q < ψ(∞) < ∞`
/// and ψ strictly increasing on a log-spaced grid of `(0, ∞)`.
pub fn validate_rho(rho: &dyn RhoSpec, q: usize) -> Result<(), ScatterError> {
    let psi_inf = rho.psi_infinity();
    if !(psi_inf.is_finite() && psi_inf > q as f64) {
        return Err(ScatterError::InvalidRho(format!(
            "psi(inf) = {psi_inf} must lie in ({q}, inf)"
        )));
    }
    let mut prev = rho.psi(0.0);
    for k in -40..=40 {
        let s = 10f64.powf(k as f64 / 5.0);
        let psi = rho.psi(s);
        if psi.is_nan() || psi <= prev {
            return Err(ScatterError::InvalidRho(format!(
                "psi is not strictly increasing near s = {s:e}"
            )));
        }
        prev = psi;
    }
    Ok(())
}

/// Points `y_1, …, y_m` in `R^q` with nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    q: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl WeightedSample {
    pub fn new(q: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, ScatterError> {
        if q == 0 {
            return Err(ScatterError::InvalidSample("dimension must be positive".into()));
        }
        if points.len() != q * weights.len() {
            return Err(ScatterError::InvalidSample(format!(
                "{} coordinates do not form {} points in dimension {q}",
                points.len(),
                weights.len()
            )));
        }
        if weights.is_empty() {
            return Err(ScatterError::InvalidSample("sample is empty".into()));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(ScatterError::InvalidSample("non-finite coordinate".into()));
        }
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(ScatterError::InvalidSample("weights must be nonnegative".into()));
        }
        let total: f64 = weights.iter().sum();
        // summation rounding grows with the number of terms
        let slack = 1e-12 + 4.0 * f64::EPSILON * weights.len() as f64;
        if (total - 1.0).abs() > slack {
            return Err(ScatterError::InvalidSample(format!("weights sum to {total}")));
        }
        Ok(Self { q, points, weights })
    }

    /// Equal weights `1/m` on every point.
    pub fn uniform(q: usize, points: Vec<f64>) -> Result<Self, ScatterError> {
        let m = points.len().checked_div(q).unwrap_or(0);
        Self::new(q, points, vec![1.0 / m.max(1) as f64; m])
    }

    pub fn dim(&self) -> usize {
        self.q
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, k: usize) -> &[f64] {
        &self.points[k * self.q..(k + 1) * self.q]
    }

    pub fn weight(&self, k: usize) -> f64 {
        self.weights[k]
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], f64)> {
        self.points.chunks_exact(self.q).zip(self.weights.iter().copied())
    }

    /// `Σ w_k y_k y_kᵀ`.
    pub fn second_moment(&self) -> SymMatrix {
        let mut acc = vec![0.0; packed_len(self.q)];
        for (y, w) in self.iter() {
            add_outer(&mut acc, y, w);
        }
        unpack(self.q, &acc)
    }

    /// The sample `B y_1, …, B y_m` with unchanged weights.
    pub fn transformed(&self, b: &DMatrix<f64>) -> Self {
        let q = self.q;
        assert_eq!(b.shape(), (q, q));
        let mut points = vec![0.0; self.points.len()];
        for (src, dst) in self.points.chunks_exact(q).zip(points.chunks_exact_mut(q)) {
            for i in 0..q {
                dst[i] = (0..q).map(|k| b[(i, k)] * src[k]).sum();
            }
        }
        Self {
            points,
            ..self.clone()
        }
    }

    /// The sample with every point replaced by its negative.
    pub fn negated(&self) -> Self {
        Self {
            points: self.points.iter().map(|v| -v).collect(),
            ..self.clone()
        }
    }
}

fn packed_len(q: usize) -> usize {
    q * (q + 1) / 2
}

/// `acc += w · y yᵀ` on the packed upper triangle.
#[inline]
fn add_outer(acc: &mut [f64], y: &[f64], w: f64) {
    let q = y.len();
    let mut k = 0;
    for i in 0..q {
        let wy = w * y[i];
        for (a, yj) in acc[k..k + q - i].iter_mut().zip(&y[i..]) {
            *a += wy * yj;
        }
        k += q - i;
    }
}

fn unpack(q: usize, acc: &[f64]) -> SymMatrix {
    SymMatrix::from_upper(q, acc).expect("packed accumulator has q(q+1)/2 finite entries")
}

/// Which scatter functional to compute.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScatterFunctional {
    /// M-functional with `ρ = ρ_ν`.
    MType { nu: f64 },
    /// Tyler's distribution-free functional, normalized to determinant one.
    Tyler,
}

impl ScatterFunctional {
    /// Solves the functional on `sample`.
    pub fn solve(
        &self,
        sample: &WeightedSample,
        opts: &SolverOptions,
    ) -> Result<SolverReport, ScatterError> {
        match *self {
            ScatterFunctional::MType { nu } => {
                let rho = RhoNu::new(nu, sample.dim())?;
                solve_m_estimator(sample, &rho, opts)
            }
            ScatterFunctional::Tyler => solve_tyler(sample, opts),
        }
    }

    /// Largest mass a subspace of dimension `dim < q` may carry.
    pub fn mass_bound(&self, dim: usize, q: usize) -> f64 {
        match *self {
            ScatterFunctional::MType { nu } => {
                let psi_inf = nu + q as f64;
                (psi_inf - q as f64 + dim as f64) / psi_inf
            }
            ScatterFunctional::Tyler => dim as f64 / q as f64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            tol: 1e-9,
            max_iter: 500,
        }
    }
}

impl SolverOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self {
            tol,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ScatterError> {
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(ScatterError::InvalidOptions(format!("tol = {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub estimate: SpdMatrix,
    /// Fixed-point updates performed.
    pub iterations: usize,
    /// Whitened stationarity residual at `estimate`.
    pub residual: f64,
    pub converged: bool,
    /// Objective value at every accepted iterate, starting with the initial one.
    pub objective_path: Vec<f64>,
}

/// `∫ [ρ(yᵀΣ⁻¹y) − ρ(yᵀy)] Q(dy) + log det Σ`.
pub fn objective_l_rho(
    sigma: &SpdMatrix,
    sample: &WeightedSample,
    rho: &dyn RhoSpec,
) -> Result<f64, ScatterError> {
    check_dim(sigma, sample)?;
    let chol = sigma.cholesky();
    let mut scratch = vec![0.0; sample.dim()];
    let mut total = 0.0;
    for (y, w) in sample.iter() {
        let s = chol.mahalanobis_sq(y, &mut scratch);
        let s0: f64 = y.iter().map(|v| v * v).sum();
        total += w * (rho.rho(s) - rho.rho(s0));
    }
    Ok(total + chol.log_det())
}

/// `q ∫ log(yᵀΣ⁻¹y / yᵀy) Q(dy) + log det Σ`, Tyler's objective.
pub fn objective_tyler(sigma: &SpdMatrix, sample: &WeightedSample) -> Result<f64, ScatterError> {
    check_dim(sigma, sample)?;
    check_no_zero(sample)?;
    let chol = sigma.cholesky();
    let q = sample.dim() as f64;
    let mut scratch = vec![0.0; sample.dim()];
    let mut total = 0.0;
    for (y, w) in sample.iter() {
        let s = chol.mahalanobis_sq(y, &mut scratch);
        let s0: f64 = y.iter().map(|v| v * v).sum();
        total += w * q * (s / s0).ln();
    }
    Ok(total + chol.log_det())
}

fn check_dim(sigma: &SpdMatrix, sample: &WeightedSample) -> Result<(), ScatterError> {
    if sigma.dim() != sample.dim() {
        return Err(LinalgError::DimensionMismatch {
            left: sigma.dim(),
            right: sample.dim(),
        }
        .into());
    }
    Ok(())
}

fn check_no_zero(sample: &WeightedSample) -> Result<(), ScatterError> {
    match (0..sample.len()).find(|&k| sample.point(k).iter().all(|v| *v == 0.0)) {
        Some(index) => Err(ScatterError::ZeroVectorInSample { index }),
        None => Ok(()),
    }
}

enum Update<'a> {
    M(&'a dyn RhoSpec),
    Tyler,
}

/// Objective and fixed-point image at one iterate.
struct Evaluation {
    chol: Cholesky,
    objective: f64,
    image: SymMatrix,
}

impl Update<'_> {
    /// Constant part of the objective, `∫ρ(yᵀy)` or `q ∫ log yᵀy`.
    fn baseline(&self, sample: &WeightedSample) -> f64 {
        let q = sample.dim() as f64;
        sample
            .iter()
            .map(|(y, w)| {
                let s0: f64 = y.iter().map(|v| v * v).sum();
                match self {
                    Update::M(rho) => w * rho.rho(s0),
                    Update::Tyler => w * q * s0.ln(),
                }
            })
            .sum()
    }

    fn evaluate(
        &self,
        sigma: &SymMatrix,
        sample: &WeightedSample,
        baseline: f64,
    ) -> Result<Evaluation, LinalgError> {
        let chol = Cholesky::factor(sigma)?;
        let q = sample.dim();
        let mut scratch = vec![0.0; q];
        let mut acc = vec![0.0; packed_len(q)];
        let mut total = 0.0;
        for (y, w) in sample.iter() {
            if w == 0.0 {
                continue;
            }
            let s = chol.mahalanobis_sq(y, &mut scratch);
            let (coef, term) = match self {
                Update::M(rho) => (w * rho.rho_prime(s), w * rho.rho(s)),
                Update::Tyler => (w * q as f64 / s, w * q as f64 * s.ln()),
            };
            total += term;
            add_outer(&mut acc, y, coef);
        }
        let image = unpack(q, &acc);
        Ok(Evaluation {
            objective: total - baseline + chol.log_det(),
            chol,
            image,
        })
    }

    /// For M-type updates, the multiple `cΣ` minimizing the objective along
    /// the ray through `sigma`: the root of `∫ψ(yᵀΣ⁻¹y / c) = q` with
    /// `ψ(s) = sρ'(s)`. The plain iteration converges slowest in this
    /// direction. Returns `sigma` unchanged when no root is bracketed.
    fn rescale(&self, sigma: SymMatrix, sample: &WeightedSample) -> SymMatrix {
        let Update::M(rho) = self else {
            return sigma;
        };
        let Ok(chol) = Cholesky::factor(&sigma) else {
            return sigma;
        };
        let q = sample.dim();
        let mut scratch = vec![0.0; q];
        let dist: Vec<(f64, f64)> = sample
            .iter()
            .filter(|(_, w)| *w > 0.0)
            .map(|(y, w)| (chol.mahalanobis_sq(y, &mut scratch), w))
            .collect();
        // decreasing in t = log c
        let excess = |t: f64| {
            let inv = (-t).exp();
            dist.iter().map(|&(s, w)| w * rho.psi(s * inv)).sum::<f64>() - q as f64
        };
        let (mut lo, mut hi) = (0.0, 0.0);
        if excess(0.0) > 0.0 {
            while excess(hi) > 0.0 {
                hi += 1.0;
                if hi > 700.0 {
                    return sigma;
                }
            }
        } else {
            while excess(lo) <= 0.0 {
                lo -= 1.0;
                if lo < -700.0 {
                    return sigma;
                }
            }
        }
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if excess(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        sigma.scale((0.5 * (lo + hi)).exp())
    }

    /// The next iterate proposed from a fixed-point image.
    fn normalize(&self, image: &SymMatrix) -> Result<SymMatrix, LinalgError> {
        match self {
            Update::M(_) => Ok(image.clone()),
            Update::Tyler => {
                Ok(shape_normalize(&SpdMatrix::new(image.clone())?).into_sym())
            }
        }
    }
}

const MAX_HALVINGS: usize = 60;

fn fixed_point(
    sample: &WeightedSample,
    update: Update<'_>,
    opts: &SolverOptions,
) -> Result<SolverReport, ScatterError> {
    opts.validate()?;
    let q = sample.dim();
    let baseline = update.baseline(sample);
    let start = update.normalize(&sample.second_moment()).map_err(|_| {
        ScatterError::DegenerateSample("second-moment matrix is singular".into())
    })?;
    let mut sigma = start;
    let mut eval = update
        .evaluate(&sigma, sample, baseline)
        .map_err(|e| ScatterError::DegenerateSample(e.to_string()))?;
    let mut path = vec![eval.objective];
    let identity = DMatrix::<f64>::identity(q, q);

    let mut iterations = 0;
    loop {
        let residual = (eval.chol.whiten(&eval.image).as_matrix() - &identity).norm();
        if residual <= opts.tol || iterations >= opts.max_iter {
            let report = SolverReport {
                estimate: SpdMatrix::new(sigma)?,
                iterations,
                residual,
                converged: residual <= opts.tol,
                objective_path: path,
            };
            if report.converged {
                return Ok(report);
            }
            return Err(ScatterError::NotConverged {
                iterations,
                residual,
                last: Box::new(report),
            });
        }

        let mut candidate = update
            .normalize(&eval.image)
            .map_err(|_| ScatterError::DegenerateSample("fixed-point image lost rank".into()))?;
        candidate = update.rescale(candidate, sample);
        let slack = 1e-12 * (1.0 + eval.objective.abs());
        let mut halvings = 0;
        let next = loop {
            match update.evaluate(&candidate, sample, baseline) {
                Ok(next) if next.objective <= eval.objective + slack => break next,
                _ => {}
            }
            halvings += 1;
            if halvings > MAX_HALVINGS {
                return Err(ScatterError::DegenerateSample(
                    "step halving failed to decrease the objective".into(),
                ));
            }
            let mid = SymMatrix::symmetrize((sigma.as_matrix() + candidate.as_matrix()) * 0.5);
            candidate = update.normalize(&mid)?;
        };
        sigma = candidate;
        eval = next;
        path.push(eval.objective);
        iterations += 1;
    }
}

/// Minimizes `L_ρ(·, Q)` for the weighted sample `Q`.
pub fn solve_m_estimator(
    sample: &WeightedSample,
    rho: &dyn RhoSpec,
    opts: &SolverOptions,
) -> Result<SolverReport, ScatterError> {
    validate_rho(rho, sample.dim())?;
    fixed_point(sample, Update::M(rho), opts)
}

/// Tyler's functional: minimizes `L_0(·, Q)` over determinant-one matrices.
pub fn solve_tyler(
    sample: &WeightedSample,
    opts: &SolverOptions,
) -> Result<SolverReport, ScatterError> {
    check_no_zero(sample)?;
    let mut report = fixed_point(sample, Update::Tyler, opts)?;
    report.estimate = shape_normalize(&report.estimate);
    Ok(report)
}

/// A subspace whose sample mass violates the existence condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceWitness {
    pub dim: usize,
    pub mass: f64,
    pub bound: f64,
    /// Sample points spanning the subspace (empty for `{0}`).
    pub spanned_by: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ExistenceVerdict {
    /// Every proper subspace was checked exhaustively.
    Pass,
    /// Only the cheap necessary checks were run, and they passed.
    HeuristicPass,
    Fail(SubspaceWitness),
}

impl ExistenceVerdict {
    pub fn is_fail(&self) -> bool {
        matches!(self, ExistenceVerdict::Fail(_))
    }
}

pub const DEFAULT_EXISTENCE_CAP: usize = 25;
const MEMBERSHIP_TOL: f64 = 1e-9;

/// Checks `Q(W) < bound(dim W)` for proper linear subspaces `W`.
///
/// Samples with at most `cap` points are checked exactly by enumerating the
/// spans of up to `q − 1` sample points. Larger samples only get the checks
/// for `{0}`, the span of the whole sample and single lines.
pub fn check_existence(
    sample: &WeightedSample,
    functional: &ScatterFunctional,
    cap: usize,
) -> ExistenceVerdict {
    let q = sample.dim();
    let zero_mass: f64 = (0..sample.len())
        .filter(|&k| is_zero(sample.point(k)))
        .map(|k| sample.weight(k))
        .sum();
    let zero_bound = match functional {
        ScatterFunctional::Tyler => 0.0,
        _ => functional.mass_bound(0, q),
    };
    if zero_mass > 0.0 && zero_mass >= zero_bound - 1e-12 {
        return ExistenceVerdict::Fail(SubspaceWitness {
            dim: 0,
            mass: zero_mass,
            bound: zero_bound,
            spanned_by: vec![],
        });
    }
    let nonzero: Vec<usize> = (0..sample.len()).filter(|&k| !is_zero(sample.point(k))).collect();

    let full = Basis::spanning(sample, &nonzero, q);
    if full.rank() < q {
        let dim = full.rank();
        return ExistenceVerdict::Fail(SubspaceWitness {
            dim,
            mass: 1.0,
            bound: functional.mass_bound(dim, q),
            spanned_by: full.members.clone(),
        });
    }
    if q == 1 {
        return ExistenceVerdict::Pass;
    }

    if sample.len() <= cap {
        let mut search = SubspaceSearch {
            sample,
            functional,
            nonzero: &nonzero,
            zero_mass,
            q,
            witness: None,
        };
        search.extend(&Basis::empty(q), 0);
        return match search.witness {
            Some(w) => ExistenceVerdict::Fail(w),
            None => ExistenceVerdict::Pass,
        };
    }

    // lines through the origin carrying several sample points
    let bound = functional.mass_bound(1, q);
    let mut directions: Vec<(Vec<f64>, usize)> = nonzero
        .iter()
        .map(|&k| (canonical_direction(sample.point(k)), k))
        .collect();
    directions.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut start = 0;
    while start < directions.len() {
        let mut end = start + 1;
        while end < directions.len() && same_direction(&directions[start].0, &directions[end].0) {
            end += 1;
        }
        let mass: f64 =
            zero_mass + directions[start..end].iter().map(|(_, k)| sample.weight(*k)).sum::<f64>();
        if mass >= bound - 1e-12 {
            return ExistenceVerdict::Fail(SubspaceWitness {
                dim: 1,
                mass,
                bound,
                spanned_by: vec![directions[start].1],
            });
        }
        start = end;
    }
    ExistenceVerdict::HeuristicPass
}

fn is_zero(y: &[f64]) -> bool {
    y.iter().all(|v| *v == 0.0)
}

fn canonical_direction(y: &[f64]) -> Vec<f64> {
    let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    let sign = y
        .iter()
        .find(|v| v.abs() > MEMBERSHIP_TOL * norm)
        .map_or(1.0, |v| v.signum());
    y.iter().map(|v| sign * v / norm).collect()
}

fn same_direction(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= MEMBERSHIP_TOL)
}

/// Orthonormal basis grown by Gram–Schmidt from sample points.
#[derive(Clone)]
struct Basis {
    q: usize,
    vectors: Vec<Vec<f64>>,
    members: Vec<usize>,
}

impl Basis {
    fn empty(q: usize) -> Self {
        Self {
            q,
            vectors: vec![],
            members: vec![],
        }
    }

    fn spanning(sample: &WeightedSample, indices: &[usize], q: usize) -> Self {
        let mut basis = Self::empty(q);
        for &k in indices {
            if let Some(next) = basis.with(sample.point(k), k) {
                basis = next;
                if basis.rank() == q {
                    break;
                }
            }
        }
        basis
    }

    fn rank(&self) -> usize {
        self.vectors.len()
    }

    /// Residual of `y` after projecting onto the span.
    fn residual(&self, y: &[f64]) -> Vec<f64> {
        let mut r = y.to_vec();
        for e in &self.vectors {
            let c: f64 = r.iter().zip(e).map(|(a, b)| a * b).sum();
            for (ri, ei) in r.iter_mut().zip(e) {
                *ri -= c * ei;
            }
        }
        r
    }

    fn contains(&self, y: &[f64]) -> bool {
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        let res = self.residual(y).iter().map(|v| v * v).sum::<f64>().sqrt();
        res <= MEMBERSHIP_TOL * norm.max(f64::MIN_POSITIVE)
    }

    /// The basis extended by `y`, or `None` if `y` already lies in the span.
    fn with(&self, y: &[f64], index: usize) -> Option<Self> {
        if self.contains(y) {
            return None;
        }
        let r = self.residual(y);
        let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
        let mut next = self.clone();
        next.vectors.push(r.into_iter().map(|v| v / norm).collect());
        next.members.push(index);
        debug_assert!(next.q >= next.vectors.len());
        Some(next)
    }
}

struct SubspaceSearch<'a> {
    sample: &'a WeightedSample,
    functional: &'a ScatterFunctional,
    nonzero: &'a [usize],
    zero_mass: f64,
    q: usize,
    witness: Option<SubspaceWitness>,
}

impl SubspaceSearch<'_> {
    /// Depth-first enumeration of independent subsets in increasing index order.
    fn extend(&mut self, basis: &Basis, from: usize) {
        if self.witness.is_some() || basis.rank() == self.q - 1 {
            return;
        }
        for pos in from..self.nonzero.len() {
            let k = self.nonzero[pos];
            let Some(next) = basis.with(self.sample.point(k), k) else {
                continue;
            };
            let mass = self.zero_mass
                + self
                    .nonzero
                    .iter()
                    .filter(|&&j| next.contains(self.sample.point(j)))
                    .map(|&j| self.sample.weight(j))
                    .sum::<f64>();
            let bound = self.functional.mass_bound(next.rank(), self.q);
            if mass >= bound - 1e-12 {
                self.witness = Some(SubspaceWitness {
                    dim: next.rank(),
                    mass,
                    bound,
                    spanned_by: next.members.clone(),
                });
                return;
            }
            self.extend(&next, pos + 1);
        }
    }
}

/// `κ = q⁻¹ ∫ ρ''(‖y‖²) ‖y‖⁴ Q(dy)`.
pub fn kappa_spherical(sample: &WeightedSample, rho: &dyn RhoSpec) -> f64 {
    let q = sample.dim() as f64;
    sample
        .iter()
        .map(|(y, w)| {
            let s: f64 = y.iter().map(|v| v * v).sum();
            w * rho.rho_double_prime(s) * s * s
        })
        .sum::<f64>()
        / q
}

/// Influence function of an M-functional at a spherical `Q` with `Σ(Q) = I`:
/// `(q+2)/(q+2+2κ) ρ'(‖y‖²)(yyᵀ − ‖y‖²/q I) + (1+κ)⁻¹(ρ'(‖y‖²)‖y‖²/q − 1) I`.
pub fn influence_spherical_m(y: &[f64], rho: &dyn RhoSpec, kappa: f64) -> SymMatrix {
    assert!(kappa > -1.0, "kappa must exceed -1");
    let q = y.len();
    let qf = q as f64;
    let s: f64 = y.iter().map(|v| v * v).sum();
    let rp = rho.rho_prime(s);
    let a = (qf + 2.0) / (qf + 2.0 + 2.0 * kappa) * rp;
    let diag = -a * s / qf + (rp * s / qf - 1.0) / (1.0 + kappa);
    let m = DMatrix::from_fn(q, q, |i, j| {
        a * y[i] * y[j] + if i == j { diag } else { 0.0 }
    });
    SymMatrix::symmetrize(m)
}

/// Influence function of Tyler's functional at a spherical `Q`:
/// `(q+2)(yyᵀ/‖y‖² − I/q)`.
pub fn influence_spherical_tyler(y: &[f64]) -> Result<SymMatrix, ScatterError> {
    let q = y.len() as f64;
    let s: f64 = y.iter().map(|v| v * v).sum();
    if s == 0.0 {
        return Err(ScatterError::ZeroVector);
    }
    let m = DMatrix::from_fn(y.len(), y.len(), |i, j| {
        (q + 2.0) * (y[i] * y[j] / s - if i == j { 1.0 / q } else { 0.0 })
    });
    Ok(SymMatrix::symmetrize(m))
}

/// The functional applied to the uniform distribution on the pair
/// differences of `scheme`.
pub fn symmetrized_scatter(
    data: &Dataset,
    scheme: &PairScheme,
    functional: &ScatterFunctional,
    opts: &SolverOptions,
) -> Result<SolverReport, ScatterError> {
    let diffs = pair_differences(data, scheme)?;
    let sample = WeightedSample::uniform(data.q(), diffs)?;
    functional.solve(&sample, opts)
}

/// Entrywise mean of the functional over `d` single-cycle designs, one per
/// random permutation. The permutations are those of
/// `PairScheme::RandomizedCycles { d, seed }`.
pub fn averaged_randomized_estimator(
    data: &Dataset,
    d: usize,
    functional: &ScatterFunctional,
    opts: &SolverOptions,
    seed: u64,
) -> Result<SpdMatrix, ScatterError> {
    PairScheme::RandomizedCycles { d, seed }.validate(data.n())?;
    let q = data.q();
    let mut sum = DMatrix::<f64>::zeros(q, q);
    for perm in scheme_permutations(data.n(), d, seed) {
        let pairs: Vec<_> = cycle_pairs(&perm)?.collect();
        let sample = WeightedSample::uniform(q, differences_for(data, &pairs))?;
        sum += functional.solve(&sample, opts)?.estimate.as_matrix();
    }
    Ok(SpdMatrix::new(SymMatrix::symmetrize(sum / d as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::log_det;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn gaussian_sample(m: usize, q: usize, seed: u64) -> WeightedSample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..m * q).map(|_| rng.sample(StandardNormal)).collect();
        WeightedSample::uniform(q, points).unwrap()
    }

    fn basis_pm(q: usize) -> WeightedSample {
        let mut points = vec![];
        for k in 0..q {
            for sign in [1.0, -1.0] {
                let mut e = vec![0.0; q];
                e[k] = sign;
                points.extend(e);
            }
        }
        WeightedSample::uniform(q, points).unwrap()
    }

    #[test]
    fn rho_nu_derivatives() {
        let rho = RhoNu::new(1.0, 10).unwrap();
        assert_eq!(rho.psi_infinity(), 11.0);
        let s = 2.5;
        let h = 1e-5;
        let fd = (rho.rho(s + h) - rho.rho(s - h)) / (2.0 * h);
        assert!((fd - rho.rho_prime(s)).abs() < 1e-8);
        let fd2 = (rho.rho_prime(s + h) - rho.rho_prime(s - h)) / (2.0 * h);
        assert!((fd2 - rho.rho_double_prime(s)).abs() < 1e-8);
        validate_rho(&rho, 10).unwrap();
        assert!(validate_rho(&rho, 11).is_err());
        assert!(RhoNu::new(0.0, 3).is_err());
    }

    #[test]
    fn weighted_sample_validation() {
        assert!(WeightedSample::new(2, vec![1.0, 2.0], vec![0.5]).is_err());
        assert!(WeightedSample::new(1, vec![1.0, 2.0], vec![1.5, -0.5]).is_err());
        assert!(WeightedSample::new(1, vec![], vec![]).is_err());
        assert!(WeightedSample::new(1, vec![1.0, 2.0], vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn objective_vanishes_at_identity() {
        let sample = gaussian_sample(30, 3, 1);
        let rho = RhoNu::new(2.0, 3).unwrap();
        let v = objective_l_rho(&SpdMatrix::identity(3), &sample, &rho).unwrap();
        assert!(v.abs() < 1e-14);
    }

    #[test]
    fn objective_at_scaled_identity() {
        let sample = gaussian_sample(25, 4, 2);
        let rho = RhoNu::new(1.0, 4).unwrap();
        let c: f64 = 2.3;
        let expected: f64 = sample
            .iter()
            .map(|(y, w)| {
                let s: f64 = y.iter().map(|v| v * v).sum();
                w * (rho.rho(s / c) - rho.rho(s))
            })
            .sum::<f64>()
            + 4.0 * c.ln();
        let v = objective_l_rho(&SpdMatrix::identity(4).scale(c), &sample, &rho).unwrap();
        assert!((v - expected).abs() < 1e-12);
    }

    #[test]
    fn m_estimator_is_a_local_minimum() {
        let sample = gaussian_sample(200, 3, 3);
        let rho = RhoNu::new(1.0, 3).unwrap();
        let report = solve_m_estimator(&sample, &rho, &SolverOptions::default()).unwrap();
        let best = objective_l_rho(&report.estimate, &sample, &rho).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let e = DMatrix::from_fn(3, 3, |_, _| rng.random_range(-0.05..0.05));
            let b = DMatrix::identity(3, 3) + e;
            let probe = report.estimate.congruence(&b).unwrap();
            assert!(objective_l_rho(&probe, &sample, &rho).unwrap() >= best - 1e-12);
        }
    }

    #[test]
    fn m_estimator_objective_is_monotone() {
        let sample = gaussian_sample(150, 4, 5);
        let rho = RhoNu::new(1.0, 4).unwrap();
        let report = solve_m_estimator(&sample, &rho, &SolverOptions::default()).unwrap();
        assert!(report.converged && report.residual <= 1e-9);
        for w in report.objective_path.windows(2) {
            assert!(w[1] <= w[0] + 1e-12 * (1.0 + w[0].abs()));
        }
    }

    #[test]
    fn m_estimator_on_signed_basis_is_scalar() {
        let q = 4;
        let rho = RhoNu::new(1.0, q).unwrap();
        let report = solve_m_estimator(&basis_pm(q), &rho, &SolverOptions::default()).unwrap();
        let est = report.estimate.as_matrix();
        let c = est[(0, 0)];
        assert!(c > 0.0);
        for i in 0..q {
            for j in 0..q {
                if i == j {
                    assert!((est[(i, j)] - c).abs() < 1e-8);
                } else {
                    assert!(est[(i, j)].abs() <= 1e-8);
                }
            }
        }
    }

    #[test]
    fn m_estimator_scalar_case_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let ys: Vec<f64> = (0..40).map(|_| rng.sample::<f64, _>(StandardNormal) * 1.7).collect();
        let nu = 2.0;
        let sample = WeightedSample::uniform(1, ys.clone()).unwrap();
        let rho = RhoNu::new(nu, 1).unwrap();
        let report = solve_m_estimator(&sample, &rho, &SolverOptions::with_tol(1e-12)).unwrap();

        // σ² = mean[(ν+1) y² / (y²/σ² + ν)] ⇔ g(σ²) = 0
        let g = |v: f64| {
            ys.iter().map(|y| (nu + 1.0) * y * y / (y * y / v + nu)).sum::<f64>() / ys.len() as f64
                - v
        };
        let (mut lo, mut hi) = (1e-6, 1e3);
        assert!(g(lo) > 0.0 && g(hi) < 0.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) > 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        assert!((report.estimate.get(0, 0) - 0.5 * (lo + hi)).abs() < 1e-8);
    }

    #[test]
    fn tyler_on_basis_is_identity() {
        for q in 2..6 {
            let points: Vec<f64> = (0..q)
                .flat_map(|k| (0..q).map(move |j| if j == k { 1.0 } else { 0.0 }))
                .collect();
            let sample = WeightedSample::uniform(q, points).unwrap();
            let report = solve_tyler(&sample, &SolverOptions::default()).unwrap();
            let err = (report.estimate.as_matrix() - DMatrix::identity(q, q)).norm();
            assert!(err < 1e-8, "q = {q}: {err}");
        }
    }

    #[test]
    fn tyler_is_scale_invariant() {
        let sample = gaussian_sample(60, 3, 7);
        let scaled = sample.transformed(&(DMatrix::identity(3, 3) * 3.0));
        let a = solve_tyler(&sample, &SolverOptions::default()).unwrap();
        let b = solve_tyler(&scaled, &SolverOptions::default()).unwrap();
        assert!((a.estimate.as_matrix() - b.estimate.as_matrix()).norm() < 1e-10);
        assert!(log_det(&a.estimate).abs() < 1e-10);
    }

    #[test]
    fn tyler_rejects_zero_vector() {
        let sample = WeightedSample::uniform(2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap();
        assert!(matches!(
            solve_tyler(&sample, &SolverOptions::default()),
            Err(ScatterError::ZeroVectorInSample { index: 1 })
        ));
    }

    #[test]
    fn degenerate_sample_is_reported() {
        let sample = WeightedSample::uniform(2, vec![1.0, 1.0, 2.0, 2.0, -1.0, -1.0]).unwrap();
        let rho = RhoNu::new(1.0, 2).unwrap();
        assert!(matches!(
            solve_m_estimator(&sample, &rho, &SolverOptions::default()),
            Err(ScatterError::DegenerateSample(_))
        ));
    }

    #[test]
    fn not_converged_carries_last_iterate() {
        let sample = gaussian_sample(50, 3, 8);
        let opts = SolverOptions {
            tol: 1e-14,
            max_iter: 2,
        };
        match solve_tyler(&sample, &opts) {
            Err(ScatterError::NotConverged { iterations, last, .. }) => {
                assert_eq!(iterations, 2);
                assert!(!last.converged);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn existence_examples() {
        let tyler = ScatterFunctional::Tyler;
        let line = WeightedSample::uniform(2, vec![1.0, 1.0, 2.0, 2.0, -3.0, -3.0]).unwrap();
        match check_existence(&line, &tyler, DEFAULT_EXISTENCE_CAP) {
            ExistenceVerdict::Fail(w) => {
                assert_eq!(w.dim, 1);
                assert!((w.mass - 1.0).abs() < 1e-12);
                assert_eq!(w.bound, 0.5);
            }
            v => panic!("{v:?}"),
        }
        let general =
            WeightedSample::uniform(2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0, -2.0]).unwrap();
        assert_eq!(check_existence(&general, &tyler, DEFAULT_EXISTENCE_CAP), ExistenceVerdict::Pass);

        // two of four points on one line: mass 1/2 is not < 1/2
        let half =
            WeightedSample::uniform(2, vec![1.0, 0.0, 2.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(check_existence(&half, &tyler, DEFAULT_EXISTENCE_CAP).is_fail());
        // the M-functional tolerates more: bound (ν + 1)/(ν + 2) for lines in q = 2
        let m = ScatterFunctional::MType { nu: 1.0 };
        assert_eq!(check_existence(&half, &m, DEFAULT_EXISTENCE_CAP), ExistenceVerdict::Pass);
    }

    #[test]
    fn existence_zero_mass() {
        let with_zero = WeightedSample::uniform(2, vec![0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        assert!(check_existence(&with_zero, &ScatterFunctional::Tyler, 25).is_fail());
        // M-type with ν = 1, q = 2 allows mass < 1/3 at the origin
        let m = ScatterFunctional::MType { nu: 1.0 };
        assert_eq!(check_existence(&with_zero, &m, 25), ExistenceVerdict::Pass);
    }

    #[test]
    fn existence_heuristic_path() {
        let sample = gaussian_sample(100, 3, 9);
        assert_eq!(
            check_existence(&sample, &ScatterFunctional::Tyler, 25),
            ExistenceVerdict::HeuristicPass
        );
        // half the mass on one line
        let mut points = sample.points.clone();
        for k in 0..50 {
            points[3 * k] = (k + 1) as f64;
            points[3 * k + 1] = 0.0;
            points[3 * k + 2] = 0.0;
        }
        let bad = WeightedSample::uniform(3, points).unwrap();
        assert!(check_existence(&bad, &ScatterFunctional::Tyler, 25).is_fail());
    }

    #[test]
    fn kappa_examples() {
        let rho = RhoNu::new(1.5, 3).unwrap();
        let zeros = WeightedSample::uniform(3, vec![0.0; 6]).unwrap();
        assert_eq!(kappa_spherical(&zeros, &rho), 0.0);
        let y = [1.0, 2.0, -0.5];
        let s: f64 = y.iter().map(|v| v * v).sum();
        let single = WeightedSample::uniform(3, y.to_vec()).unwrap();
        let expected = -(1.5 + 3.0) / (s + 1.5).powi(2) * s * s / 3.0;
        assert!((kappa_spherical(&single, &rho) - expected).abs() < 1e-14);
    }

    #[test]
    fn influence_m_examples() {
        let rho = RhoNu::new(1.0, 3).unwrap();
        let kappa = -0.3;
        let j0 = influence_spherical_m(&[0.0; 3], &rho, kappa);
        assert!((j0.as_matrix() + DMatrix::identity(3, 3) / (1.0 + kappa)).norm() < 1e-15);
        let y = [0.3, -1.2, 2.0];
        let neg = [-0.3, 1.2, -2.0];
        assert_eq!(
            influence_spherical_m(&y, &rho, kappa),
            influence_spherical_m(&neg, &rho, kappa)
        );
    }

    #[test]
    fn influence_tyler_examples() {
        let j = influence_spherical_tyler(&[1.0, 0.0]).unwrap();
        assert_eq!(j.as_matrix(), &DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -2.0]));
        let y = [0.4, -1.1, 0.7];
        let a = influence_spherical_tyler(&y).unwrap();
        let b = influence_spherical_tyler(&[-1.2, 3.3, -2.1]).unwrap();
        assert!((a.as_matrix() - b.as_matrix()).norm() < 1e-14);
        assert!(a.trace().abs() < 1e-14);
        assert_eq!(influence_spherical_tyler(&[0.0, 0.0]), Err(ScatterError::ZeroVector));
    }

    #[test]
    fn symmetrized_tyler_with_minimal_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let rows: Vec<Vec<f64>> =
            (0..4).map(|_| (0..3).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let report = symmetrized_scatter(
            &data,
            &PairScheme::Complete,
            &ScatterFunctional::Tyler,
            &SolverOptions::default(),
        )
        .unwrap();
        assert!(report.converged);
    }

    #[test]
    fn averaged_estimator_with_one_cycle_matches_scheme() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let rows: Vec<Vec<f64>> =
            (0..30).map(|_| (0..2).map(|_| rng.sample(StandardNormal)).collect()).collect();
        let data = Dataset::from_rows(&rows).unwrap();
        let f = ScatterFunctional::MType { nu: 1.0 };
        let opts = SolverOptions::default();
        let avg = averaged_randomized_estimator(&data, 1, &f, &opts, 5).unwrap();
        let direct = symmetrized_scatter(
            &data,
            &PairScheme::RandomizedCycles { d: 1, seed: 5 },
            &f,
            &opts,
        )
        .unwrap();
        assert_eq!(&avg, &direct.estimate);
    }
}
