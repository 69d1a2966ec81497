//! Pairwise-difference designs: complete, balanced (circulant) and
//! permutation-randomized cycles.
//!
//! Observation indices are 0-based in this module. Pair order is frozen:
//! i-major, then offset, so every stream is reproducible.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SchemeError {
    #[error("need at least {min} observations, got {n}")]
    TooFewObservations { n: usize, min: usize },
    #[error("pair depth d = {d} outside 1..={max} for n = {n}")]
    DepthOutOfRange { n: usize, d: usize, max: usize },
    #[error("not a permutation of 0..{0}")]
    NotAPermutation(usize),
    #[error("dataset rows must have {expected} finite coordinates (row {row})")]
    BadRow { row: usize, expected: usize },
    #[error("dataset dimension must be positive")]
    ZeroDimension,
}

/// `n` observations in `R^q`, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    n: usize,
    q: usize,
    values: Vec<f64>,
}

impl Dataset {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, SchemeError> {
        let q = rows.first().map_or(0, Vec::len);
        let mut values = Vec::with_capacity(rows.len() * q);
        for (row, r) in rows.iter().enumerate() {
            if r.len() != q {
                return Err(SchemeError::BadRow { row, expected: q });
            }
            values.extend_from_slice(r);
        }
        Self::from_flat(rows.len(), q, values)
    }

    pub fn from_flat(n: usize, q: usize, values: Vec<f64>) -> Result<Self, SchemeError> {
        if n < 2 {
            return Err(SchemeError::TooFewObservations { n, min: 2 });
        }
        if q == 0 {
            return Err(SchemeError::ZeroDimension);
        }
        assert_eq!(values.len(), n * q, "flat buffer must hold n*q values");
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(SchemeError::BadRow {
                row: pos / q,
                expected: q,
            });
        }
        Ok(Self { n, q, values })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn q(&self) -> usize {
        self.q
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.q..(i + 1) * self.q]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.values.chunks_exact(self.q)
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.values
    }

    /// Rows reordered as `row(perm[0]), row(perm[1]), …`.
    pub fn permuted(&self, perm: &Permutation) -> Self {
        assert_eq!(perm.len(), self.n);
        let mut values = Vec::with_capacity(self.values.len());
        for &k in perm.images() {
            values.extend_from_slice(self.row(k));
        }
        Self { values, ..*self }
    }

    /// Applies `x ↦ B x` to every row (`B` given row-major, `q × q`).
    pub fn transformed(&self, b: &nalgebra::DMatrix<f64>) -> Self {
        let q = self.q;
        assert_eq!(b.shape(), (q, q));
        let mut values = vec![0.0; self.values.len()];
        for (src, dst) in self.values.chunks_exact(q).zip(values.chunks_exact_mut(q)) {
            for i in 0..q {
                dst[i] = (0..q).map(|k| b[(i, k)] * src[k]).sum();
            }
        }
        Self { values, ..*self }
    }
}

/// A pairing design over `n` observations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum PairScheme {
    /// All `n(n-1)/2` pairs.
    Complete,
    /// The `nd` circulant pairs `(i, i+j mod n)`, `1 ≤ j ≤ d`.
    Balanced { d: usize },
    /// `d` independent uniform permutations, each contributing the `n`
    /// adjacent pairs of its cycle. Permutations are drawn in order from a
    /// ChaCha8 stream seeded with `seed`.
    RandomizedCycles { d: usize, seed: u64 },
}

impl PairScheme {
    /// Checks that the scheme is usable with `n` observations.
    pub fn validate(&self, n: usize) -> Result<(), SchemeError> {
        match *self {
            PairScheme::Complete => {
                if n < 2 {
                    return Err(SchemeError::TooFewObservations { n, min: 2 });
                }
            }
            PairScheme::Balanced { d } => {
                let max = max_balanced_depth(n);
                if d == 0 || d > max {
                    return Err(SchemeError::DepthOutOfRange { n, d, max });
                }
            }
            PairScheme::RandomizedCycles { d, .. } => {
                if n < 3 {
                    return Err(SchemeError::TooFewObservations { n, min: 3 });
                }
                if d == 0 {
                    return Err(SchemeError::DepthOutOfRange { n, d, max: usize::MAX });
                }
            }
        }
        Ok(())
    }

    /// Number of pairs the scheme emits for `n` observations.
    pub fn pair_count(&self, n: usize) -> usize {
        match *self {
            PairScheme::Complete => n * (n - 1) / 2,
            PairScheme::Balanced { d } | PairScheme::RandomizedCycles { d, .. } => n * d,
        }
    }

    /// Every index pair of the scheme, in the frozen order.
    pub fn pairs(&self, n: usize) -> Result<Vec<(usize, usize)>, SchemeError> {
        match *self {
            PairScheme::Complete => Ok(complete_pairs(n)?.collect()),
            PairScheme::Balanced { d } => Ok(balanced_pairs(n, d)?.collect()),
            PairScheme::RandomizedCycles { d, seed } => {
                self.validate(n)?;
                let mut out = Vec::with_capacity(n * d);
                for perm in scheme_permutations(n, d, seed) {
                    out.extend(cycle_pairs(&perm)?);
                }
                Ok(out)
            }
        }
    }
}

/// Largest admissible balanced depth, `⌊(n-1)/2⌋`.
pub fn max_balanced_depth(n: usize) -> usize {
    n.saturating_sub(1) / 2
}

/// The `d` permutations used by `RandomizedCycles { d, seed }`.
pub fn scheme_permutations(n: usize, d: usize, seed: u64) -> Vec<Permutation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d).map(|_| sample_permutation(n, &mut rng)).collect()
}

/// `(i, j)` with `i < j`, i-major.
pub fn complete_pairs(n: usize) -> Result<impl Iterator<Item = (usize, usize)>, SchemeError> {
    if n < 2 {
        return Err(SchemeError::TooFewObservations { n, min: 2 });
    }
    Ok((0..n).flat_map(move |i| ((i + 1)..n).map(move |j| (i, j))))
}

/// `(i, (i + j) mod n)` for `i = 0..n`, `j = 1..=d`.
pub fn balanced_pairs(
    n: usize,
    d: usize,
) -> Result<impl Iterator<Item = (usize, usize)>, SchemeError> {
    PairScheme::Balanced { d }.validate(n)?;
    Ok((0..n).flat_map(move |i| (1..=d).map(move |j| (i, (i + j) % n))))
}

/// A bijection of `0..n`, stored as its image list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn new(images: Vec<usize>) -> Result<Self, SchemeError> {
        let n = images.len();
        let mut seen = vec![false; n];
        for &v in &images {
            if v >= n || seen[v] {
                return Err(SchemeError::NotAPermutation(n));
            }
            seen[v] = true;
        }
        Ok(Self(images))
    }

    pub fn identity(n: usize) -> Self {
        Self((0..n).collect())
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn images(&self) -> &[usize] {
        &self.0
    }

    pub fn apply(&self, i: usize) -> usize {
        self.0[i]
    }

    /// Single-cycle permutation `a[0] → a[1] → … → a[m-1] → a[0]`, identity
    /// elsewhere.
    pub fn from_cycle(n: usize, cycle: &[usize]) -> Result<Self, SchemeError> {
        let mut images: Vec<usize> = (0..n).collect();
        compose_cycle(&mut images, cycle);
        Self::new(images)
    }
}

fn compose_cycle(images: &mut [usize], cycle: &[usize]) {
    let m = cycle.len();
    for k in 0..m {
        images[cycle[k]] = cycle[(k + 1) % m];
    }
}

/// Uniform random permutation by Fisher–Yates shuffle.
pub fn sample_permutation<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Permutation {
    let mut images: Vec<usize> = (0..n).collect();
    images.shuffle(rng);
    Permutation(images)
}

/// The `n` cyclically adjacent pairs `(p(i), p(i+1))`, with `p(n) := p(0)`.
pub fn cycle_pairs(
    p: &Permutation,
) -> Result<impl Iterator<Item = (usize, usize)> + '_, SchemeError> {
    let n = p.len();
    if n < 3 {
        return Err(SchemeError::TooFewObservations { n, min: 3 });
    }
    Ok((0..n).map(move |i| (p.apply(i), p.apply((i + 1) % n))))
}

/// Output of [`couple_permutation`].
#[derive(Debug, Clone, PartialEq)]
pub struct Coupling {
    /// Permutation whose standardized cycle representation is read off `p`.
    pub sigma: Permutation,
    /// The single cycle `(p(0), p(1), …, p(n-1))`.
    pub sigma_star: Permutation,
    /// Positions `t` (0-based) where `p(t)` is the minimum of the values not
    /// yet used; the last one is always `n - 1`.
    pub cut_points: Vec<usize>,
}

impl Coupling {
    /// Points `x` with `sigma(x) != sigma_star(x)`.
    pub fn disagreements(&self) -> Vec<usize> {
        (0..self.sigma.len())
            .filter(|&x| self.sigma.apply(x) != self.sigma_star.apply(x))
            .collect()
    }
}

/// Couples `p` with a permutation `sigma` (a bijective image of `p`) and the
/// single cycle `sigma_star`, cutting `p` into cycles after every record
/// minimum of the remaining values.
pub fn couple_permutation(p: &Permutation) -> Coupling {
    let n = p.len();
    let values = p.images();

    // suffix_min[t] = min{p(s) : s ≥ t}, i.e. min of the values not used before t.
    let mut suffix_min = vec![usize::MAX; n + 1];
    for t in (0..n).rev() {
        suffix_min[t] = suffix_min[t + 1].min(values[t]);
    }
    let cut_points: Vec<usize> = (0..n).filter(|&t| values[t] == suffix_min[t]).collect();

    let mut sigma: Vec<usize> = (0..n).collect();
    let mut start = 0;
    for &t in &cut_points {
        compose_cycle(&mut sigma, &values[start..=t]);
        start = t + 1;
    }
    let mut sigma_star: Vec<usize> = (0..n).collect();
    compose_cycle(&mut sigma_star, values);

    Coupling {
        sigma: Permutation(sigma),
        sigma_star: Permutation(sigma_star),
        cut_points,
    }
}

/// `X_j − X_i` for every pair `(i, j)` of the scheme, concatenated row-major.
pub fn pair_differences(data: &Dataset, scheme: &PairScheme) -> Result<Vec<f64>, SchemeError> {
    let pairs = scheme.pairs(data.n())?;
    Ok(differences_for(data, &pairs))
}

pub(crate) fn differences_for(data: &Dataset, pairs: &[(usize, usize)]) -> Vec<f64> {
    let q = data.q();
    let mut out = Vec::with_capacity(pairs.len() * q);
    for &(i, j) in pairs {
        let (xi, xj) = (data.row(i), data.row(j));
        out.extend(xj.iter().zip(xi).map(|(b, a)| b - a));
    }
    out
}
