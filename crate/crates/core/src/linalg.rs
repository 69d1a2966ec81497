//! Dense symmetric and positive definite matrices.
//!
//! Everything here works on small `q × q` matrices (q up to a few hundred).
//! [`SymMatrix`] guarantees exact symmetry of its entries, [`SpdMatrix`]
//! additionally guarantees that a Cholesky factorization exists.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not positive definite (pivot {pivot} at index {index})")]
    NotPositiveDefinite { index: usize, pivot: f64 },
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("matrix must have positive dimension")]
    Empty,
}

/// Relative asymmetry tolerated by [`SymMatrix::new`] before the input is
/// rejected. Accepted inputs are symmetrized exactly.
const SYMMETRY_TOL: f64 = 1e-10;

/// A real symmetric matrix. `m[(i, j)] == m[(j, i)]` holds bit for bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix(DMatrix<f64>);

impl SymMatrix {
    /// Accepts a square, finite, numerically symmetric matrix and replaces
    /// each off-diagonal pair by its average.
    pub fn new(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        let (rows, cols) = m.shape();
        if rows != cols {
            return Err(LinalgError::NotSquare { rows, cols });
        }
        if rows == 0 {
            return Err(LinalgError::Empty);
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let scale = m.iter().fold(0.0_f64, |acc, x| acc.max(x.abs())).max(1.0);
        let mut worst = 0.0_f64;
        for i in 0..rows {
            for j in (i + 1)..rows {
                worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        if worst > SYMMETRY_TOL * scale {
            return Err(LinalgError::NotSymmetric(worst));
        }
        Ok(Self::symmetrize(m))
    }

    /// Symmetrizes `(m + mᵀ)/2` without any check. `m` must be square.
    pub fn symmetrize(mut m: DMatrix<f64>) -> Self {
        let q = m.nrows();
        debug_assert_eq!(q, m.ncols());
        for i in 0..q {
            for j in (i + 1)..q {
                let v = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self(m)
    }

    /// Builds a symmetric matrix from its upper triangle, given in row-major
    /// order (`(0,0), (0,1), …, (0,q-1), (1,1), …`).
    pub fn from_upper(q: usize, upper: &[f64]) -> Result<Self, LinalgError> {
        if upper.len() != q * (q + 1) / 2 {
            return Err(LinalgError::DimensionMismatch {
                left: upper.len(),
                right: q * (q + 1) / 2,
            });
        }
        let mut m = DMatrix::zeros(q, q);
        let mut k = 0;
        for i in 0..q {
            for j in i..q {
                m[(i, j)] = upper[k];
                m[(j, i)] = upper[k];
                k += 1;
            }
        }
        Self::new(m)
    }

    pub fn identity(q: usize) -> Self {
        Self(DMatrix::identity(q, q))
    }

    pub fn zeros(q: usize) -> Self {
        Self(DMatrix::zeros(q, q))
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        Self(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(diag)))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0[(i, j)]
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.0.norm()
    }

    /// Upper triangle in row-major order; the inverse of [`SymMatrix::from_upper`].
    pub fn upper(&self) -> Vec<f64> {
        let q = self.dim();
        let mut out = Vec::with_capacity(q * (q + 1) / 2);
        for i in 0..q {
            for j in i..q {
                out.push(self.0[(i, j)]);
            }
        }
        out
    }

    pub fn scale(&self, c: f64) -> Self {
        Self(&self.0 * c)
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self, LinalgError> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self(&self.0 + &other.0))
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<Self, LinalgError> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self(&self.0 - &other.0))
    }

    /// `B · self · Bᵀ` for a square `B` of matching size.
    pub fn congruence(&self, b: &DMatrix<f64>) -> Result<Self, LinalgError> {
        if b.nrows() != b.ncols() {
            return Err(LinalgError::NotSquare {
                rows: b.nrows(),
                cols: b.ncols(),
            });
        }
        check_dims(self.dim(), b.nrows())?;
        Ok(Self::symmetrize(b * &self.0 * b.transpose()))
    }
}

fn check_dims(left: usize, right: usize) -> Result<(), LinalgError> {
    if left == right {
        Ok(())
    } else {
        Err(LinalgError::DimensionMismatch { left, right })
    }
}

/// A symmetric positive definite matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct SpdMatrix(SymMatrix);

impl SpdMatrix {
    pub fn new(m: SymMatrix) -> Result<Self, LinalgError> {
        Cholesky::factor(&m)?;
        Ok(Self(m))
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self, LinalgError> {
        Self::new(SymMatrix::new(m)?)
    }

    pub fn identity(q: usize) -> Self {
        Self(SymMatrix::identity(q))
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self, LinalgError> {
        Self::new(SymMatrix::from_diagonal(diag))
    }

    pub fn dim(&self) -> usize {
        self.0.dim()
    }

    pub fn as_sym(&self) -> &SymMatrix {
        &self.0
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        self.0.as_matrix()
    }

    pub fn into_sym(self) -> SymMatrix {
        self.0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.0.get(i, j)
    }

    /// Multiplies by a positive scalar.
    pub fn scale(&self, c: f64) -> Self {
        assert!(c > 0.0 && c.is_finite(), "scale factor must be positive");
        Self(self.0.scale(c))
    }

    pub fn cholesky(&self) -> Cholesky {
        Cholesky::factor(&self.0).expect("SpdMatrix invariant: factorization exists")
    }

    pub fn determinant(&self) -> f64 {
        log_det(self).exp()
    }

    /// `B · self · Bᵀ`; fails if the result is not positive definite
    /// (e.g. singular `B`).
    pub fn congruence(&self, b: &DMatrix<f64>) -> Result<Self, LinalgError> {
        Self::new(self.0.congruence(b)?)
    }

    /// Symmetric inverse square root via the eigendecomposition.
    pub fn inv_sqrt(&self) -> DMatrix<f64> {
        let eig = eigen_sym(&self.0);
        let scaled = DMatrix::from_fn(self.dim(), self.dim(), |i, k| {
            eig.vectors[(i, k)] / eig.values[k].sqrt()
        });
        &scaled * eig.vectors.transpose()
    }
}

/// Lower triangular Cholesky factor `L` with `L·Lᵀ = m`, stored row-major
/// so that forward substitution walks contiguous memory.
#[derive(Debug, Clone)]
pub struct Cholesky {
    dim: usize,
    lower: Vec<f64>,
    inv_diag: Vec<f64>,
}

impl Cholesky {
    /// Cholesky–Banachiewicz factorization; any pivot `≤ 0` (or NaN)
    /// signals that `m` is not positive definite.
    pub fn factor(m: &SymMatrix) -> Result<Self, LinalgError> {
        let q = m.dim();
        let a = m.as_matrix();
        let mut lower = vec![0.0; q * q];
        let mut inv_diag = vec![0.0; q];
        for i in 0..q {
            for j in 0..=i {
                let mut sum = a[(i, j)];
                for k in 0..j {
                    sum -= lower[i * q + k] * lower[j * q + k];
                }
                if i == j {
                    if sum.is_nan() || sum <= 0.0 {
                        return Err(LinalgError::NotPositiveDefinite {
                            index: i,
                            pivot: sum,
                        });
                    }
                    let d = sum.sqrt();
                    lower[i * q + i] = d;
                    inv_diag[i] = 1.0 / d;
                } else {
                    lower[i * q + j] = sum * inv_diag[j];
                }
            }
        }
        Ok(Self {
            dim: q,
            lower,
            inv_diag,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn factor_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.lower)
    }

    /// `log det(m) = 2 Σ log L_ii`.
    pub fn log_det(&self) -> f64 {
        self.inv_diag.iter().map(|d| -2.0 * d.ln()).sum()
    }

    /// Overwrites `v` with `L⁻¹ v`.
    #[inline]
    pub fn forward_solve_in_place(&self, v: &mut [f64]) {
        let q = self.dim;
        debug_assert_eq!(v.len(), q);
        for i in 0..q {
            let row = &self.lower[i * q..i * q + i];
            let mut s = v[i];
            for (l, z) in row.iter().zip(v.iter()) {
                s -= l * z;
            }
            v[i] = s * self.inv_diag[i];
        }
    }

    /// `yᵀ m⁻¹ y = ‖L⁻¹ y‖²`, using `scratch` as workspace.
    #[inline]
    pub fn mahalanobis_sq(&self, y: &[f64], scratch: &mut [f64]) -> f64 {
        scratch.copy_from_slice(y);
        self.forward_solve_in_place(scratch);
        scratch.iter().map(|z| z * z).sum()
    }

    /// `L⁻¹ a L⁻ᵀ`, the matrix `a` expressed in the whitened coordinates of `m`.
    pub fn whiten(&self, a: &SymMatrix) -> SymMatrix {
        let q = self.dim;
        let mut tmp = a.as_matrix().clone();
        let mut col = vec![0.0; q];
        for j in 0..q {
            for i in 0..q {
                col[i] = tmp[(i, j)];
            }
            self.forward_solve_in_place(&mut col);
            for i in 0..q {
                tmp[(i, j)] = col[i];
            }
        }
        // tmp = L⁻¹ a; apply L⁻¹ to the rows of tmp, i.e. to the columns of tmpᵀ.
        let mut out = tmp.transpose();
        for j in 0..q {
            for i in 0..q {
                col[i] = out[(i, j)];
            }
            self.forward_solve_in_place(&mut col);
            for i in 0..q {
                out[(i, j)] = col[i];
            }
        }
        SymMatrix::symmetrize(out)
    }
}

/// Cholesky factor of `m` as a dense lower triangular matrix.
pub fn spd_factorize(m: &SymMatrix) -> Result<DMatrix<f64>, LinalgError> {
    Ok(Cholesky::factor(m)?.factor_matrix())
}

pub fn log_det(m: &SpdMatrix) -> f64 {
    m.cholesky().log_det()
}

/// `det(m)^{-1/q} · m`, the determinant-one representative of the ray through `m`.
pub fn shape_normalize(m: &SpdMatrix) -> SpdMatrix {
    let q = m.dim() as f64;
    let c = (-log_det(m) / q).exp();
    m.scale(c)
}

/// Eigenvalues sorted in decreasing order with matching orthonormal
/// eigenvectors stored as columns.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

pub fn eigen_sym(m: &SymMatrix) -> SymEigen {
    let q = m.dim();
    let eig = SymmetricEigen::new(m.as_matrix().clone());
    let mut order: Vec<usize> = (0..q).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(q, q, |i, k| eig.eigenvectors[(i, order[k])]);
    SymEigen { values, vectors }
}

/// Eigenvalues of `a⁻¹ b`, obtained from the symmetric pencil
/// `a^{-1/2} b a^{-1/2}`; sorted decreasingly, all positive.
pub fn relative_eigenvalues(a: &SpdMatrix, b: &SpdMatrix) -> Result<Vec<f64>, LinalgError> {
    check_dims(a.dim(), b.dim())?;
    let root = a.inv_sqrt();
    let pencil = SymMatrix::symmetrize(&root * b.as_matrix() * &root);
    Ok(eigen_sym(&pencil).values)
}

/// Affine-invariant Riemannian distance `√Σ_j log²λ_j(a⁻¹b)`.
pub fn geodesic_distance(a: &SpdMatrix, b: &SpdMatrix) -> Result<f64, LinalgError> {
    let values = relative_eigenvalues(a, b)?;
    Ok(values.iter().map(|l| l.ln().powi(2)).sum::<f64>().sqrt())
}
