//! Monte-Carlo harness comparing the complete-pair estimator with balanced
//! and randomized incomplete designs.

use std::time::Instant;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distributions::{generate_data, replication_rng, DistributionError, DistributionSpec};
use crate::linalg::{geodesic_distance, shape_normalize, SpdMatrix};
use crate::pairs::{max_balanced_depth, Dataset, PairScheme};
use crate::scatter::{
    averaged_randomized_estimator, symmetrized_scatter, ScatterError, ScatterFunctional,
    SolverOptions,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid experiment config: {0}")]
    InvalidConfig(String),
    #[error("cannot summarize an empty set of rows")]
    EmptyRows,
    #[error(transparent)]
    Distribution(#[from] DistributionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FunctionalName {
    M,
    Tyler,
}

/// Incomplete designs compared against the complete one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SchemeName {
    /// Circulant pairs `(i, i + j mod n)`, `j ≤ d`.
    Balanced,
    /// Shape of the mean of `d` single-cycle estimates.
    Randomized,
}

impl SchemeName {
    pub fn as_str(&self) -> &'static str {
        match self {
            SchemeName::Balanced => "balanced",
            SchemeName::Randomized => "randomized",
        }
    }
}

fn default_nu() -> f64 {
    1.0
}

fn default_reps() -> usize {
    200
}

fn default_tol() -> f64 {
    SolverOptions::default().tol
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub n: usize,
    pub q: usize,
    pub distribution: DistributionSpec,
    pub functional: FunctionalName,
    /// `ν` of `ρ_ν`; ignored for Tyler.
    #[serde(default = "default_nu")]
    pub rho_nu: f64,
    pub d_values: Vec<usize>,
    pub schemes: Vec<SchemeName>,
    #[serde(default = "default_reps")]
    pub reps: usize,
    pub seed: u64,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |m: String| Err(SimError::InvalidConfig(m));
        if self.n < 3 || self.q == 0 {
            return bad(format!("need n >= 3 and q >= 1, got n = {}, q = {}", self.n, self.q));
        }
        if self.reps == 0 {
            return bad("reps must be at least 1".into());
        }
        let max = max_balanced_depth(self.n);
        if let Some(d) = self.d_values.iter().find(|&&d| d == 0 || d > max) {
            return bad(format!("d = {d} outside 1..={max}"));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return bad(format!("tol = {}", self.tol));
        }
        if self.functional == FunctionalName::M && !(self.rho_nu > 0.0 && self.rho_nu.is_finite()) {
            return bad(format!("rho_nu = {}", self.rho_nu));
        }
        self.distribution.sampler(self.q)?;
        Ok(())
    }

    pub fn scatter_functional(&self) -> ScatterFunctional {
        match self.functional {
            FunctionalName::M => ScatterFunctional::MType { nu: self.rho_nu },
            FunctionalName::Tyler => ScatterFunctional::Tyler,
        }
    }
}

/// Execution knobs that do not change the estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Worker threads; replications are split by index, output order is
    /// always by replication.
    pub workers: usize,
    /// Record wall-clock time per row. Off by default so that reruns
    /// produce identical output; `runtime_ms` is then 0.
    pub timing: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            timing: false,
        }
    }
}

/// One (replication, depth, design) comparison. Distances are NaN and
/// `failed` is set when a solver failed in that replication.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRow {
    pub rep: usize,
    pub d: usize,
    pub scheme: SchemeName,
    /// `D(Ĥ_{n,d}, Ĥ_n)`.
    pub approx_error: f64,
    /// `D(Ĥ_{n,d}, H)`.
    pub est_error: f64,
    /// `D(Ĥ_n, H)`.
    pub full_error: f64,
    pub runtime_ms: f64,
    pub failed: bool,
}

impl ExperimentRow {
    pub fn approx_ratio(&self) -> f64 {
        self.approx_error / self.full_error
    }

    pub fn est_ratio(&self) -> f64 {
        self.est_error / self.full_error
    }
}

struct Context {
    functional: ScatterFunctional,
    opts: SolverOptions,
    truth: SpdMatrix,
}

/// Runs all replications of `config`.
pub fn run_experiment(
    config: &ExperimentConfig,
    options: RunOptions,
) -> Result<Vec<ExperimentRow>, SimError> {
    config.validate()?;
    let ctx = Context {
        functional: config.scatter_functional(),
        opts: SolverOptions::with_tol(config.tol),
        truth: config.distribution.true_shape(config.q)?,
    };
    let workers = options.workers.clamp(1, config.reps);
    if workers == 1 {
        return (0..config.reps)
            .map(|rep| run_replication(config, &ctx, rep, options.timing))
            .collect::<Result<Vec<_>, _>>()
            .map(|v| v.into_iter().flatten().collect());
    }
    let chunk = config.reps.div_ceil(workers);
    let results: Vec<Result<Vec<ExperimentRow>, SimError>> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let ctx = &ctx;
                s.spawn(move || {
                    let reps = (w * chunk)..((w + 1) * chunk).min(config.reps);
                    let mut rows = Vec::new();
                    for rep in reps {
                        rows.extend(run_replication(config, ctx, rep, options.timing)?);
                    }
                    Ok(rows)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("replication worker panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    for part in results {
        rows.extend(part?);
    }
    Ok(rows)
}

fn estimate_shape(
    data: &Dataset,
    scheme: &PairScheme,
    ctx: &Context,
) -> Result<SpdMatrix, ScatterError> {
    let report = symmetrized_scatter(data, scheme, &ctx.functional, &ctx.opts)?;
    Ok(shape_normalize(&report.estimate))
}

fn run_replication(
    config: &ExperimentConfig,
    ctx: &Context,
    rep: usize,
    timing: bool,
) -> Result<Vec<ExperimentRow>, SimError> {
    let mut rng = replication_rng(config.seed, rep as u64);
    let data = generate_data(&config.distribution, config.n, config.q, &mut rng)?;
    // permutation seeds come after the data on the same stream
    let perm_seeds: Vec<u64> = config.d_values.iter().map(|_| rng.next_u64()).collect();

    let full = estimate_shape(&data, &PairScheme::Complete, ctx).ok();
    let full_error = full
        .as_ref()
        .and_then(|h| geodesic_distance(h, &ctx.truth).ok())
        .unwrap_or(f64::NAN);

    let mut rows = Vec::with_capacity(config.d_values.len() * config.schemes.len());
    for (&d, &perm_seed) in config.d_values.iter().zip(&perm_seeds) {
        for &scheme in &config.schemes {
            let start = Instant::now();
            let partial = match scheme {
                SchemeName::Balanced => estimate_shape(&data, &PairScheme::Balanced { d }, ctx),
                SchemeName::Randomized => {
                    averaged_randomized_estimator(&data, d, &ctx.functional, &ctx.opts, perm_seed)
                        .map(|m| shape_normalize(&m))
                }
            }
            .ok();
            let runtime_ms = if timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let distances = match (&full, &partial) {
                (Some(f), Some(p)) => geodesic_distance(p, f)
                    .and_then(|a| Ok((a, geodesic_distance(p, &ctx.truth)?)))
                    .ok(),
                _ => None,
            };
            let (approx_error, est_error) = distances.unwrap_or((f64::NAN, f64::NAN));
            let failed = distances.is_none() || !full_error.is_finite();
            rows.push(ExperimentRow {
                rep,
                d,
                scheme,
                approx_error,
                est_error,
                full_error,
                runtime_ms,
                failed,
            });
        }
    }
    Ok(rows)
}

/// Box-plot statistics. Quantiles use linear interpolation between order
/// statistics (position `(m − 1)p` in the sorted sample); whiskers are the
/// most extreme observations within 1.5 IQR of the quartiles.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub lower_whisker: f64,
    pub upper_whisker: f64,
}

/// Linear-interpolation quantile of an ascending sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl BoxStats {
    /// Statistics of the finite values of `values`; `None` if there are none.
    pub fn from_values(values: &[f64]) -> Option<Self> {
        let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
        if v.is_empty() {
            return None;
        }
        v.sort_by(f64::total_cmp);
        let q1 = quantile_sorted(&v, 0.25);
        let q3 = quantile_sorted(&v, 0.75);
        let reach = 1.5 * (q3 - q1);
        let lower_whisker = *v.iter().find(|&&x| x >= q1 - reach).expect("q1 lies in range");
        let upper_whisker = *v.iter().rev().find(|&&x| x <= q3 + reach).expect("q3 lies in range");
        Some(Self {
            median: quantile_sorted(&v, 0.5),
            q1,
            q3,
            lower_whisker,
            upper_whisker,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub d: usize,
    pub scheme: SchemeName,
    pub rows: usize,
    /// Rows excluded from the statistics because a solver failed.
    pub failed: usize,
    pub approx_ratio: Option<BoxStats>,
    pub est_ratio: Option<BoxStats>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    /// Median of `D(Ĥ_n, H)` over replications where it is finite.
    pub median_full_error: Option<f64>,
    pub replications: usize,
    pub failed_replications: usize,
    /// Sorted by `(d, scheme)`.
    pub groups: Vec<GroupSummary>,
}

/// Per-(d, scheme) box statistics of the relative approximation and
/// estimation errors.
pub fn summarize(rows: &[ExperimentRow]) -> Result<ExperimentSummary, SimError> {
    if rows.is_empty() {
        return Err(SimError::EmptyRows);
    }
    let mut full_by_rep: Vec<(usize, f64)> = rows.iter().map(|r| (r.rep, r.full_error)).collect();
    full_by_rep.sort_by_key(|&(rep, _)| rep);
    full_by_rep.dedup_by_key(|&mut (rep, _)| rep);
    let full: Vec<f64> = full_by_rep.iter().map(|&(_, e)| e).collect();
    let failed_replications = full.iter().filter(|e| !e.is_finite()).count();
    let median_full_error = BoxStats::from_values(&full).map(|b| b.median);

    let mut keys: Vec<(usize, SchemeName)> = rows.iter().map(|r| (r.d, r.scheme)).collect();
    keys.sort();
    keys.dedup();
    let groups = keys
        .into_iter()
        .map(|(d, scheme)| {
            let group: Vec<&ExperimentRow> =
                rows.iter().filter(|r| r.d == d && r.scheme == scheme).collect();
            let ok: Vec<&&ExperimentRow> = group.iter().filter(|r| !r.failed).collect();
            let approx: Vec<f64> = ok.iter().map(|r| r.approx_ratio()).collect();
            let est: Vec<f64> = ok.iter().map(|r| r.est_ratio()).collect();
            GroupSummary {
                d,
                scheme,
                rows: group.len(),
                failed: group.len() - ok.len(),
                approx_ratio: BoxStats::from_values(&approx),
                est_ratio: BoxStats::from_values(&est),
            }
        })
        .collect();
    Ok(ExperimentSummary {
        median_full_error,
        replications: full.len(),
        failed_replications,
        groups,
    })
}
