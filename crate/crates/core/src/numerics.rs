//! Dense symmetric / PSD linear algebra.
//!
//! Everything here operates on [`faer::Mat`] storage. Matrices that are
//! mathematically symmetric are carried as [`SymMatrix`], which symmetrizes
//! its entries on construction so that `a[i][j] == a[j][i]` holds bit for bit.

use faer::linalg::triangular_solve;
use faer::{Mat, MatRef, Par, Side};

use crate::error::{DppError, Result};
use crate::model::{Point, RkhsKernel};

/// Default diagonal jitter added to kernel matrices before factorization.
pub const DEFAULT_JITTER: f64 = 1e-10;
/// Largest jitter the Cholesky ladder will try before giving up.
pub const MAX_JITTER: f64 = 1e-4;
/// Relative tolerance for eigenvalues that are treated as roundoff negatives.
pub const PSD_TOLERANCE: f64 = 1e-10;

/// A dense real symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymMatrix {
    inner: Mat<f64>,
}

impl SymMatrix {
    /// Wraps a square matrix, replacing it by `(M + Mᵀ) / 2`.
    pub fn from_mat(mat: Mat<f64>) -> Result<Self> {
        let n = mat.nrows();
        if n == 0 || mat.ncols() != n {
            return Err(DppError::DimensionMismatch(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                mat.nrows(),
                mat.ncols()
            )));
        }
        let mut inner = mat;
        for j in 0..n {
            for i in (j + 1)..n {
                let v = 0.5 * (inner[(i, j)] + inner[(j, i)]);
                inner[(i, j)] = v;
                inner[(j, i)] = v;
            }
        }
        if !all_finite(inner.as_ref()) {
            return Err(DppError::input("matrix has non-finite entries"));
        }
        Ok(SymMatrix { inner })
    }

    pub fn from_fn(n: usize, f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        Self::from_mat(Mat::from_fn(n, n, f))
    }

    /// Builds from row vectors; every row must have length `rows.len()`.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some(bad) = rows.iter().position(|r| r.len() != n) {
            return Err(DppError::DimensionMismatch(format!(
                "row {bad} has {} entries, expected {n}",
                rows[bad].len()
            )));
        }
        Self::from_fn(n, |i, j| rows[i][j])
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        assert!(n > 0, "dimension must be positive");
        SymMatrix {
            inner: Mat::from_fn(n, n, |i, j| if i == j { c } else { 0.0 }),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self::scaled_identity(n, 0.0)
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        Self::from_fn(diag.len(), |i, j| if i == j { diag[i] } else { 0.0 })
    }

    pub fn dim(&self) -> usize {
        self.inner.nrows()
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.inner[(i, j)]
    }

    pub fn as_mat(&self) -> MatRef<'_, f64> {
        self.inner.as_ref()
    }

    pub fn into_mat(self) -> Mat<f64> {
        self.inner
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..n).map(|i| (0..n).map(|j| self.inner[(i, j)]).collect()).collect()
    }

    pub fn trace(&self) -> f64 {
        (0..self.dim()).map(|i| self.inner[(i, i)]).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.inner.norm_l2()
    }

    pub fn scale(&self, c: f64) -> SymMatrix {
        let n = self.dim();
        SymMatrix {
            inner: Mat::from_fn(n, n, |i, j| c * self.inner[(i, j)]),
        }
    }

    /// Copy of the principal submatrix on `start..start+len`.
    pub fn principal_block(&self, start: usize, len: usize) -> Mat<f64> {
        self.inner.as_ref().submatrix(start, start, len, len).to_owned()
    }

    /// `Mᵀ · self · M` for a general (not necessarily square) `M`.
    pub fn congruence(&self, m: MatRef<'_, f64>) -> Result<SymMatrix> {
        let tmp = self.as_mat() * m;
        SymMatrix::from_mat(m.transpose() * &tmp)
    }
}

impl PartialEq for SymMatrix {
    /// Exact entrywise equality (bitwise on finite values).
    fn eq(&self, other: &Self) -> bool {
        let n = self.dim();
        n == other.dim() && (0..n).all(|j| (0..n).all(|i| self.inner[(i, j)] == other.inner[(i, j)]))
    }
}

pub(crate) fn all_finite(m: MatRef<'_, f64>) -> bool {
    (0..m.ncols()).all(|j| (0..m.nrows()).all(|i| m[(i, j)].is_finite()))
}

/// `(M + Mᵀ)/2` without the validation of [`SymMatrix::from_mat`].
pub(crate) fn symmetrize(mut m: Mat<f64>) -> Mat<f64> {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Symmetric eigendecomposition with eigenvalues in descending order.
#[derive(Clone, Debug)]
pub struct EigDecomp {
    pub values: Vec<f64>,
    /// Orthonormal eigenvectors stored as columns, aligned with `values`.
    pub vectors: Mat<f64>,
}

impl EigDecomp {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `V diag(f(λ)) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let n = self.dim();
        let fv: Vec<f64> = self.values.iter().map(|&v| f(v)).collect();
        let scaled = Mat::from_fn(n, n, |i, j| self.vectors[(i, j)] * fv[j]);
        let out = &scaled * self.vectors.transpose();
        SymMatrix { inner: symmetrize(out) }
    }

    pub fn reconstruct(&self) -> SymMatrix {
        self.map(|v| v)
    }

    pub fn max_abs_value(&self) -> f64 {
        self.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
    }

    /// Fails if an eigenvalue lies below `-PSD_TOLERANCE * ||M||_op`.
    pub fn check_psd(&self) -> Result<()> {
        let tolerance = PSD_TOLERANCE * self.max_abs_value();
        match self.values.last() {
            Some(&min) if min < -tolerance => Err(DppError::NotPsd {
                eigenvalue: min,
                tolerance,
            }),
            _ => Ok(()),
        }
    }
}

/// Full symmetric eigendecomposition, values descending.
pub fn sym_eig(m: &SymMatrix) -> Result<EigDecomp> {
    let evd = m
        .as_mat()
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| DppError::Numeric(format!("eigendecomposition did not converge: {e:?}")))?;
    let n = m.dim();
    let s = evd.S().column_vector();
    let u = evd.U();
    // faer returns ascending order
    let values: Vec<f64> = (0..n).rev().map(|i| s[i]).collect();
    let vectors = Mat::from_fn(n, n, |i, j| u[(i, n - 1 - j)]);
    Ok(EigDecomp { values, vectors })
}

/// Eigenvalues only, descending.
pub fn sym_eigenvalues(m: MatRef<'_, f64>) -> Result<Vec<f64>> {
    let mut values = m
        .self_adjoint_eigenvalues(Side::Lower)
        .map_err(|e| DppError::Numeric(format!("eigenvalue computation failed: {e:?}")))?;
    values.reverse();
    Ok(values)
}

/// PSD square root via eigendecomposition; roundoff negatives are clamped to zero.
pub fn psd_sqrt(m: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eig(m)?;
    eig.check_psd()?;
    Ok(eig.map(|v| v.max(0.0).sqrt()))
}

/// Factor `F` (r×n) with `FᵀF = M` built from the positive part of the spectrum.
///
/// Rows belonging to non-positive eigenvalues are dropped, so `r` is the
/// numerical rank of `M`.
pub fn psd_factor(m: &SymMatrix) -> Result<Mat<f64>> {
    let eig = sym_eig(m)?;
    eig.check_psd()?;
    let keep: Vec<usize> = (0..eig.dim()).filter(|&k| eig.values[k] > 0.0).collect();
    let n = eig.dim();
    Ok(Mat::from_fn(keep.len(), n, |r, j| {
        let k = keep[r];
        eig.values[k].sqrt() * eig.vectors[(j, k)]
    }))
}

/// Cholesky factor `R` (upper triangular) with `M + jitter·I = RᵀR`.
#[derive(Clone, Debug)]
pub struct CholFactor {
    lower: Mat<f64>,
    jitter: f64,
}

impl CholFactor {
    pub fn dim(&self) -> usize {
        self.lower.nrows()
    }

    /// Jitter that was actually added to the diagonal.
    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    /// `R`, upper triangular.
    pub fn upper(&self) -> MatRef<'_, f64> {
        self.lower.transpose()
    }

    /// `Rᵀ`, lower triangular.
    pub fn lower(&self) -> MatRef<'_, f64> {
        self.lower.as_ref()
    }

    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.lower[(i, i)].ln()).sum::<f64>()
    }

    /// `R⁻¹ · rhs`.
    pub fn solve_upper(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let mut out = rhs.to_owned();
        triangular_solve::solve_upper_triangular_in_place(self.upper(), out.as_mut(), Par::Seq);
        out
    }

    /// `R⁻ᵀ · rhs`.
    pub fn solve_upper_transpose(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let mut out = rhs.to_owned();
        triangular_solve::solve_lower_triangular_in_place(self.lower(), out.as_mut(), Par::Seq);
        out
    }

    /// `(M + jitter·I)⁻¹ · rhs`.
    pub fn solve(&self, rhs: MatRef<'_, f64>) -> Mat<f64> {
        let tmp = self.solve_upper_transpose(rhs);
        self.solve_upper(tmp.as_ref())
    }

    /// `RᵀR`.
    pub fn reconstruct(&self) -> Mat<f64> {
        self.lower() * self.upper()
    }
}

fn try_cholesky(m: MatRef<'_, f64>, jitter: f64) -> std::result::Result<Mat<f64>, usize> {
    let n = m.nrows();
    let shifted = Mat::from_fn(n, n, |i, j| if i == j { m[(i, j)] + jitter } else { m[(i, j)] });
    match shifted.llt(Side::Lower) {
        Ok(llt) => Ok(llt.L().to_owned()),
        Err(faer::linalg::cholesky::llt::factor::LltError::NonPositivePivot { index }) => Err(index),
    }
}

/// Cholesky with an escalating jitter ladder.
///
/// Tries `base_jitter` first, then multiplies by ten until [`MAX_JITTER`]
/// is exceeded. A zero base starts the ladder at [`DEFAULT_JITTER`] after
/// the unjittered attempt.
pub fn chol_psd(m: &SymMatrix, base_jitter: f64) -> Result<CholFactor> {
    if !(base_jitter >= 0.0) || !base_jitter.is_finite() {
        return Err(DppError::input(format!(
            "base jitter must be finite and non-negative, got {base_jitter}"
        )));
    }
    let mut jitter = base_jitter;
    let tried = loop {
        if let Ok(lower) = try_cholesky(m.as_mat(), jitter) {
            return Ok(CholFactor { lower, jitter });
        }
        let tried = jitter;
        jitter = if jitter == 0.0 { DEFAULT_JITTER } else { jitter * 10.0 };
        if jitter > MAX_JITTER * (1.0 + 1e-9) {
            break tried;
        }
    };
    let min_eigenvalue = sym_eigenvalues(m.as_mat())
        .ok()
        .and_then(|v| v.last().copied())
        .unwrap_or(f64::NAN);
    Err(DppError::Conditioning {
        max_jitter: tried,
        min_eigenvalue,
    })
}

/// `log det M` for a positive definite `M`, through an unjittered Cholesky.
pub fn logdet_psd(m: &SymMatrix) -> Result<f64> {
    logdet_pd_mat(m.as_mat())
}

pub(crate) fn logdet_pd_mat(m: MatRef<'_, f64>) -> Result<f64> {
    match try_cholesky(m, 0.0) {
        Ok(l) => Ok(2.0 * (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>()),
        Err(pivot) => Err(DppError::NotPositiveDefinite {
            pivot,
            context: String::new(),
        }),
    }
}

fn check_points(points: &[Point]) -> Result<()> {
    for (i, p) in points.iter().enumerate() {
        if p.iter().any(|c| !c.is_finite()) {
            return Err(DppError::input(format!("point {i} has a non-finite coordinate")));
        }
    }
    Ok(())
}

/// Kernel matrix `[k(z_i, z_j)]`.
pub fn build_gram(points: &[Point], kernel: &RkhsKernel) -> Result<SymMatrix> {
    if points.is_empty() {
        return Err(DppError::input("cannot build a Gram matrix on zero points"));
    }
    check_points(points)?;
    let n = points.len();
    let mut k = Mat::<f64>::zeros(n, n);
    for j in 0..n {
        for i in j..n {
            let v = kernel.eval(&points[i], &points[j]);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    Ok(SymMatrix { inner: k })
}

/// Rectangular kernel matrix `[k(a_i, b_j)]`.
pub fn cross_gram(a: &[Point], b: &[Point], kernel: &RkhsKernel) -> Result<Mat<f64>> {
    check_points(a)?;
    check_points(b)?;
    Ok(Mat::from_fn(a.len(), b.len(), |i, j| kernel.eval(&a[i], &b[j])))
}
