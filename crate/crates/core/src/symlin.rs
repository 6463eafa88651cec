//! Symmetric-matrix vectorization, H-representation, and the generalized
//! Lyapunov operator `L(X) = XA + A'X + A1'XA1` for mean-square stability
//! analysis and linear-equation solves on the symmetric cone.
//!
//! Two coordinate systems for symmetric matrices appear here:
//! - `theta`: plain upper-triangle stacking, ordered (1,1),(1,2),..,(n,n);
//! - `vecs`:  the same ordering with off-diagonal entries scaled by sqrt(2),
//!   which makes the stacking an isometry for the Frobenius norm.
//!
//! The reduced operator matrix built from the H-representation acts on
//! `theta` coordinates; `vecs` coordinates are reached by conjugating with
//! the diagonal scaling. Both routes are validated against the full
//! n^2-vectorization form in the tests.

use nalgebra::{Complex, DMatrix, DVector};

use crate::error::{Error, Result};

/// Length of the stacked upper triangle of an `n x n` symmetric matrix.
pub fn tri_len(n: usize) -> usize {
    n * (n + 1) / 2
}

/// Inverse of [`tri_len`]: the matrix dimension whose upper triangle has
/// `len` entries, if `len` is a triangular number.
pub fn tri_dim(len: usize) -> Option<usize> {
    let n = ((((8 * len + 1) as f64).sqrt() - 1.0) / 2.0).round() as usize;
    (tri_len(n) == len && n >= 1).then_some(n)
}

fn tri_index(n: usize, i: usize, j: usize) -> usize {
    debug_assert!(i <= j && j < n);
    i * n - i * (i + 1) / 2 + j
}

/// Diagonal of the scaling matrix converting `theta` to `vecs` coordinates:
/// 1 on diagonal positions, sqrt(2) on off-diagonal positions.
pub fn vecs_scaling(n: usize) -> DVector<f64> {
    let mut d = DVector::zeros(tri_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            d[k] = if i == j { 1.0 } else { std::f64::consts::SQRT_2 };
            k += 1;
        }
    }
    d
}

/// A real symmetric matrix, symmetrized at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMat {
    data: DMatrix<f64>,
}

impl SymMat {
    /// Wraps a square matrix, enforcing symmetry as `(M + M') / 2`.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() || m.nrows() == 0 {
            return Err(Error::DimensionMismatch(format!(
                "symmetric matrix must be square and non-empty, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let data = (&m + m.transpose()) * 0.5;
        Ok(Self { data })
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            data: DMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            data: DMatrix::identity(n, n),
        }
    }

    pub fn scaled_identity(n: usize, c: f64) -> Self {
        Self {
            data: DMatrix::identity(n, n) * c,
        }
    }

    /// 1x1 convenience constructor for scalar systems.
    pub fn scalar(v: f64) -> Self {
        Self {
            data: DMatrix::from_element(1, 1, v),
        }
    }

    pub fn dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.data
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.data[(i, j)]
    }

    pub fn norm(&self) -> f64 {
        self.data.norm()
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            data: &self.data * c,
        }
    }

    /// Stacked upper triangle with sqrt(2)-scaled off-diagonals; an isometry
    /// between the Frobenius and Euclidean norms.
    pub fn vecs(&self) -> DVector<f64> {
        let n = self.dim();
        let mut v = DVector::zeros(tri_len(n));
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                v[k] = if i == j {
                    self.data[(i, i)]
                } else {
                    std::f64::consts::SQRT_2 * self.data[(i, j)]
                };
                k += 1;
            }
        }
        v
    }

    /// Inverse of [`SymMat::vecs`].
    pub fn from_vecs(v: &DVector<f64>) -> Result<Self> {
        let n = tri_dim(v.len()).ok_or_else(|| {
            Error::InvalidArgument(format!("length {} is not a triangular number", v.len()))
        })?;
        let mut m = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                if i == j {
                    m[(i, i)] = v[k];
                } else {
                    let x = v[k] / std::f64::consts::SQRT_2;
                    m[(i, j)] = x;
                    m[(j, i)] = x;
                }
                k += 1;
            }
        }
        Ok(Self { data: m })
    }

    /// Plain (unscaled) upper-triangle stacking.
    pub fn theta(&self) -> DVector<f64> {
        let n = self.dim();
        let mut v = DVector::zeros(tri_len(n));
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                v[k] = self.data[(i, j)];
                k += 1;
            }
        }
        v
    }

    /// Inverse of [`SymMat::theta`].
    pub fn from_theta(v: &DVector<f64>) -> Result<Self> {
        let n = tri_dim(v.len()).ok_or_else(|| {
            Error::InvalidArgument(format!("length {} is not a triangular number", v.len()))
        })?;
        let mut m = DMatrix::zeros(n, n);
        let mut k = 0;
        for i in 0..n {
            for j in i..n {
                m[(i, j)] = v[k];
                m[(j, i)] = v[k];
                k += 1;
            }
        }
        Ok(Self { data: m })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Smallest eigenvalue; negative values beyond roundoff mean the matrix
    /// is not positive semidefinite.
    pub fn min_eigenvalue(&self) -> f64 {
        self.data
            .clone()
            .symmetric_eigen()
            .eigenvalues
            .iter()
            .fold(f64::INFINITY, |a, &b| a.min(b))
    }
}

impl std::ops::Add for &SymMat {
    type Output = SymMat;
    fn add(self, rhs: &SymMat) -> SymMat {
        SymMat {
            data: &self.data + &rhs.data,
        }
    }
}

impl std::ops::Sub for &SymMat {
    type Output = SymMat;
    fn sub(self, rhs: &SymMat) -> SymMat {
        SymMat {
            data: &self.data - &rhs.data,
        }
    }
}

/// `vecs(x x')` computed without forming the outer product.
pub fn xtilde(x: &DVector<f64>) -> DVector<f64> {
    let n = x.len();
    let mut v = DVector::zeros(tri_len(n));
    let mut k = 0;
    for i in 0..n {
        for j in i..n {
            v[k] = if i == j {
                x[i] * x[i]
            } else {
                std::f64::consts::SQRT_2 * x[i] * x[j]
            };
            k += 1;
        }
    }
    v
}

/// The H-representation matrix: columns are `vec(E_ij)` for the symmetric
/// basis matrices `E_ij`, ordered (1,1),(1,2),...,(n,n).
#[derive(Debug, Clone)]
pub struct HRep {
    n: usize,
    h: DMatrix<f64>,
}

impl HRep {
    pub fn new(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidArgument(
                "H-representation requires dimension >= 1".into(),
            ));
        }
        let cols = tri_len(n);
        let mut h = DMatrix::zeros(n * n, cols);
        for i in 0..n {
            for j in i..n {
                let k = tri_index(n, i, j);
                // column-major vec: entry (r, c) of an n x n matrix sits at c*n + r
                h[(j * n + i, k)] = 1.0;
                h[(i * n + j, k)] = 1.0;
            }
        }
        Ok(Self { n, h })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn reduced_dim(&self) -> usize {
        tri_len(self.n)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.h
    }

    /// Diagonal of `H'H`: 1 for diagonal-position columns, 2 otherwise.
    pub fn gram_diagonal(&self) -> DVector<f64> {
        let mut d = DVector::zeros(self.reduced_dim());
        let mut k = 0;
        for i in 0..self.n {
            for j in i..self.n {
                d[k] = if i == j { 1.0 } else { 2.0 };
                k += 1;
            }
        }
        d
    }
}

/// The coefficient pair (A, A1) of drift and state-dependent diffusion.
#[derive(Debug, Clone)]
pub struct LyapPencil {
    a: DMatrix<f64>,
    a1: DMatrix<f64>,
}

impl LyapPencil {
    pub fn new(a: DMatrix<f64>, a1: DMatrix<f64>) -> Result<Self> {
        if a.nrows() != a.ncols() || a1.nrows() != a1.ncols() || a.nrows() != a1.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "pencil matrices must be square of equal size, got {}x{} and {}x{}",
                a.nrows(),
                a.ncols(),
                a1.nrows(),
                a1.ncols()
            )));
        }
        if a.nrows() == 0 {
            return Err(Error::InvalidArgument("pencil dimension must be >= 1".into()));
        }
        Ok(Self { a, a1 })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }

    pub fn a1(&self) -> &DMatrix<f64> {
        &self.a1
    }

    /// Applies the generalized Lyapunov operator `X A + A'X + A1'X A1`.
    pub fn apply(&self, x: &SymMat) -> Result<SymMat> {
        if x.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "operand is {}x{} but pencil dimension is {}",
                x.dim(),
                x.dim(),
                self.dim()
            )));
        }
        let xm = x.as_matrix();
        let out = xm * &self.a + self.a.transpose() * xm + self.a1.transpose() * xm * &self.a1;
        SymMat::new(out)
    }

    /// Reduced matrix of the Lyapunov operator in `theta` coordinates:
    /// `(H'H)^{-1} H' (A (x) I + I (x) A + A1 (x) A1)' H`.
    pub fn hcal_matrix(&self, hrep: &HRep) -> Result<DMatrix<f64>> {
        if hrep.dim() != self.dim() {
            return Err(Error::DimensionMismatch(format!(
                "H-representation dimension {} does not match pencil dimension {}",
                hrep.dim(),
                self.dim()
            )));
        }
        let n = self.dim();
        let eye = DMatrix::<f64>::identity(n, n);
        let big = self.a.kronecker(&eye) + eye.kronecker(&self.a) + self.a1.kronecker(&self.a1);
        let mut reduced = hrep.matrix().transpose() * big.transpose() * hrep.matrix();
        let gram = hrep.gram_diagonal();
        for (k, mut row) in reduced.row_iter_mut().enumerate() {
            row /= gram[k];
        }
        Ok(reduced)
    }

    /// Reduced operator matrix in `vecs` coordinates (the isometric ones),
    /// obtained by conjugating [`LyapPencil::hcal_matrix`] with the
    /// diagonal sqrt(2) scaling. Same spectrum, Frobenius-compatible norms.
    pub fn hcal_matrix_vecs(&self, hrep: &HRep) -> Result<DMatrix<f64>> {
        let mut m = self.hcal_matrix(hrep)?;
        let d = vecs_scaling(self.dim());
        for i in 0..m.nrows() {
            for j in 0..m.ncols() {
                m[(i, j)] *= d[i] / d[j];
            }
        }
        Ok(m)
    }

    /// Spectrum of the generalized Lyapunov operator over symmetric matrices,
    /// computed on the reduced n(n+1)/2-dimensional representation.
    pub fn ms_spectrum(&self) -> Vec<Complex<f64>> {
        let hrep = HRep::new(self.dim()).expect("dimension checked at construction");
        let m = self
            .hcal_matrix(&hrep)
            .expect("dimensions checked at construction");
        m.complex_eigenvalues().iter().copied().collect()
    }

    /// Largest real part of the operator spectrum.
    pub fn spectral_abscissa(&self) -> f64 {
        self.ms_spectrum()
            .iter()
            .fold(f64::NEG_INFINITY, |a, l| a.max(l.re))
    }

    /// Mean-square stability test: all operator eigenvalues in the open
    /// left half-plane.
    pub fn is_ms_stable(&self) -> bool {
        self.spectral_abscissa() < 0.0
    }
}

/// Relative threshold below which the reduced operator is declared singular.
pub const GLE_SINGULARITY_RTOL: f64 = 1e-12;

/// Solves the generalized Lyapunov equation `X A + A'X + A1'X A1 = Y`.
///
/// The solve runs in the reduced upper-triangle coordinates; the scaling
/// between `theta` and `vecs` conventions cancels because both sides are
/// converted consistently.
pub fn solve_gle(pencil: &LyapPencil, y: &SymMat) -> Result<SymMat> {
    if y.dim() != pencil.dim() {
        return Err(Error::DimensionMismatch(format!(
            "right-hand side is {}x{} but pencil dimension is {}",
            y.dim(),
            y.dim(),
            pencil.dim()
        )));
    }
    let hrep = HRep::new(pencil.dim())?;
    let hcal = pencil.hcal_matrix(&hrep)?;

    let svd = hcal.clone().svd(false, false);
    let sigma_max = svd.singular_values.max();
    let sigma_min = svd.singular_values.min();
    if !(sigma_min > GLE_SINGULARITY_RTOL * sigma_max) {
        return Err(Error::SingularOperator { sigma_min });
    }

    let rhs = y.theta();
    let sol = hcal
        .lu()
        .solve(&rhs)
        .ok_or(Error::SingularOperator { sigma_min })?;
    SymMat::from_theta(&sol)
}
