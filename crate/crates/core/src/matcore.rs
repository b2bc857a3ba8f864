//! Dense complex matrix primitives.
//!
//! Everything here works on `nalgebra` dense matrices of `Complex64`. The one
//! convention that matters downstream is vectorization: [`vec_r`] stacks rows,
//! so that for a channel `H` with `Σ = E[vec_r(H) vec_r(H)^H]` the entry
//! `Σ[(i,j),(l,m)]` is `E[H_ij conj(H_lm)]` and `vec_r(A H B^t) = (A ⊗ B) vec_r(H)`.

use std::ops::Deref;

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::rng::GaussianStream;
use crate::{Error, Result};

pub type C64 = Complex64;
pub type ComplexMatrix = DMatrix<C64>;
pub type ComplexVector = DVector<C64>;

/// Relative Hermiticity tolerance in HS norm.
pub const HERM_TOL: f64 = 1e-10;
/// Relative eigensystem reconstruction tolerance.
pub const EIG_TOL: f64 = 1e-9;
/// Relative tolerance on negative eigenvalues of a PSD matrix.
pub const PSD_TOL: f64 = 1e-9;
/// Eigenvalues closer than `EIG_CLUSTER_TOL * (spread + 1)` are merged.
pub const EIG_CLUSTER_TOL: f64 = 1e-7;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);

pub fn real(x: f64) -> C64 {
    C64::new(x, 0.0)
}

pub fn identity(n: usize) -> ComplexMatrix {
    ComplexMatrix::identity(n, n)
}

pub fn is_finite(m: &ComplexMatrix) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// A square matrix equal to its adjoint up to [`HERM_TOL`].
///
/// The stored matrix is the exact Hermitian part `(A + A^H)/2` of the input.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianMatrix(ComplexMatrix);

impl HermitianMatrix {
    pub fn new(m: ComplexMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::DimensionMismatch(format!(
                "Hermitian matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if !is_finite(&m) {
            return Err(Error::NonFinite);
        }
        let adj = m.adjoint();
        let residual = hs_norm(&(&m - &adj));
        if residual > HERM_TOL * hs_norm(&m).max(1.0) {
            return Err(Error::NotHermitian { residual });
        }
        Ok(Self((m + adj) * real(0.5)))
    }

    /// Wraps a matrix that is Hermitian by construction, symmetrizing away
    /// rounding.
    pub(crate) fn from_hermitian_part(m: ComplexMatrix) -> Self {
        let adj = m.adjoint();
        Self((m + adj) * real(0.5))
    }

    pub fn identity(n: usize) -> Self {
        Self(identity(n))
    }

    pub fn zeros(n: usize) -> Self {
        Self(ComplexMatrix::zeros(n, n))
    }

    pub fn from_real_diagonal(d: &[f64]) -> Self {
        let mut m = ComplexMatrix::zeros(d.len(), d.len());
        for (i, x) in d.iter().enumerate() {
            m[(i, i)] = real(*x);
        }
        Self(m)
    }

    /// The rank-one matrix `v v^H` (not normalized).
    pub fn outer(v: &ComplexVector) -> Self {
        Self::from_hermitian_part(v * v.adjoint())
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.0
    }

    pub fn trace_re(&self) -> f64 {
        (0..self.dim()).map(|i| self.0[(i, i)].re).sum()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self(&self.0 * real(s))
    }

    /// Errors with [`Error::Indefinite`] if the smallest eigenvalue is below
    /// `-PSD_TOL * ‖A‖_HS`.
    pub fn check_psd(&self) -> Result<()> {
        let eig = herm_eig(self)?;
        let min = eig.values.first().copied().unwrap_or(0.0);
        let allowed = PSD_TOL * hs_norm(&self.0);
        if min < -allowed {
            return Err(Error::Indefinite {
                min_eigenvalue: min,
                allowed,
            });
        }
        Ok(())
    }
}

impl Deref for HermitianMatrix {
    type Target = ComplexMatrix;

    fn deref(&self) -> &ComplexMatrix {
        &self.0
    }
}

/// Eigenvalues in ascending order with matching orthonormal eigenvector columns.
#[derive(Clone, Debug)]
pub struct EigSystem {
    pub values: Vec<f64>,
    pub vectors: ComplexMatrix,
}

impl EigSystem {
    pub fn reconstruct(&self) -> ComplexMatrix {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for j in 0..n {
            let s = real(self.values[j]);
            scaled.column_mut(j).iter_mut().for_each(|z| *z *= s);
        }
        scaled * self.vectors.adjoint()
    }

    /// Groups of eigenvalue indices that are treated as one eigenvalue.
    ///
    /// Adjacent sorted eigenvalues closer than `EIG_CLUSTER_TOL * (spread + 1)`
    /// share a group.
    pub fn clusters(&self) -> Vec<Vec<usize>> {
        let Some((&lo, &hi)) = self.values.first().zip(self.values.last()) else {
            return Vec::new();
        };
        let tol = EIG_CLUSTER_TOL * (hi - lo + 1.0);
        let mut groups: Vec<Vec<usize>> = vec![vec![0]];
        for k in 1..self.values.len() {
            if self.values[k] - self.values[k - 1] <= tol {
                groups.last_mut().unwrap().push(k);
            } else {
                groups.push(vec![k]);
            }
        }
        groups
    }

    /// Spectral projections onto the clustered eigenspaces, ascending by
    /// eigenvalue. Each entry is `(mean eigenvalue, projection)`.
    pub fn spectral_projections(&self) -> Vec<(f64, HermitianMatrix)> {
        self.clusters()
            .into_iter()
            .map(|group| {
                let mean = group.iter().map(|&k| self.values[k]).sum::<f64>() / group.len() as f64;
                let cols = self.vectors.select_columns(group.iter());
                (mean, HermitianMatrix::from_hermitian_part(&cols * cols.adjoint()))
            })
            .collect()
    }
}

/// Kronecker product with row-major pair flattening:
/// `kron(A,B)[(i·rB + l), (j·cB + m)] = A[i,j]·B[l,m]`.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    a.kronecker(b)
}

/// `tr(A^H B)`.
pub fn hs_inner(a: &ComplexMatrix, b: &ComplexMatrix) -> Result<C64> {
    if a.shape() != b.shape() {
        return Err(Error::DimensionMismatch(format!(
            "hs_inner of {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| x.conj() * y).sum())
}

pub fn hs_norm(a: &ComplexMatrix) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn herm_eig(a: &HermitianMatrix) -> Result<EigSystem> {
    let n = a.dim();
    if n == 0 {
        return Ok(EigSystem {
            values: Vec::new(),
            vectors: ComplexMatrix::zeros(0, 0),
        });
    }
    let eig = SymmetricEigen::try_new(a.matrix().clone(), f64::EPSILON, 100_000)
        .ok_or(Error::NonConvergence("Hermitian eigensolver"))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(order.iter());
    let sys = EigSystem { values, vectors };

    let scale = hs_norm(a.matrix());
    let recon = hs_norm(&(a.matrix() - sys.reconstruct()));
    let ortho = hs_norm(&(sys.vectors.adjoint() * &sys.vectors - identity(n)));
    if !(recon <= EIG_TOL * scale && ortho <= EIG_TOL) {
        return Err(Error::NonConvergence("Hermitian eigensolver"));
    }
    Ok(sys)
}

/// PSD square root; eigenvalues down to `-PSD_TOL·‖A‖_HS` are clamped to zero.
/// Eigenvalues within rounding of zero (`8·n·ε·‖A‖_HS`) are taken as exact
/// zeros, so that `psd_sqrt(P) = P` for projections.
pub fn psd_sqrt(a: &HermitianMatrix) -> Result<HermitianMatrix> {
    let eig = herm_eig(a)?;
    let norm = hs_norm(a.matrix());
    let allowed = PSD_TOL * norm;
    let noise = 8.0 * a.dim() as f64 * f64::EPSILON * norm;
    if let Some(&min) = eig.values.first() {
        if min < -allowed {
            return Err(Error::Indefinite {
                min_eigenvalue: min,
                allowed,
            });
        }
    }
    let rooted = EigSystem {
        values: eig.values.iter().map(|&x| if x <= noise { 0.0 } else { x.sqrt() }).collect(),
        vectors: eig.vectors,
    };
    Ok(HermitianMatrix::from_hermitian_part(rooted.reconstruct()))
}

/// Row-major vectorization.
pub fn vec_r(h: &ComplexMatrix) -> ComplexVector {
    ComplexVector::from_iterator(
        h.nrows() * h.ncols(),
        (0..h.nrows()).flat_map(|i| (0..h.ncols()).map(move |j| h[(i, j)])),
    )
}

pub fn unvec_r(v: &ComplexVector, rows: usize, cols: usize) -> Result<ComplexMatrix> {
    if v.len() != rows * cols {
        return Err(Error::DimensionMismatch(format!(
            "cannot reshape length {} into {}x{}",
            v.len(),
            rows,
            cols
        )));
    }
    Ok(ComplexMatrix::from_row_slice(rows, cols, v.as_slice()))
}

/// The action `(A ⊗ B)(H) = A·H·B^t`.
pub fn tensor_apply(a: &ComplexMatrix, b: &ComplexMatrix, h: &ComplexMatrix) -> Result<ComplexMatrix> {
    let (m, n) = h.shape();
    if a.shape() != (m, m) || b.shape() != (n, n) {
        return Err(Error::DimensionMismatch(format!(
            "tensor_apply needs A {m}x{m} and B {n}x{n}, got {:?} and {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(a * h * b.transpose())
}

pub fn unitarity_residual(u: &ComplexMatrix) -> f64 {
    if !u.is_square() {
        return f64::INFINITY;
    }
    hs_norm(&(u.adjoint() * u - identity(u.nrows())))
}

pub fn check_unitary(u: &ComplexMatrix) -> Result<()> {
    let residual = unitarity_residual(u);
    if residual > EIG_TOL {
        return Err(Error::NotUnitary { residual });
    }
    Ok(())
}

/// `log det` of a Hermitian positive definite matrix via Cholesky.
pub fn log_det_hpd(m: &ComplexMatrix) -> Result<f64> {
    let chol = cholesky_hpd(m)?;
    let l = chol.l_dirty();
    Ok((0..m.nrows()).map(|i| 2.0 * l[(i, i)].re.ln()).sum())
}

/// Inverse of a Hermitian positive definite matrix via Cholesky.
pub fn inverse_hpd(m: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(cholesky_hpd(m)?.inverse())
}

/// Complex square roots never fail, so the factor's diagonal is checked for
/// being real and positive.
fn cholesky_hpd(m: &ComplexMatrix) -> Result<Cholesky<C64, nalgebra::Dyn>> {
    let indefinite = || Error::Indefinite {
        min_eigenvalue: f64::NAN,
        allowed: 0.0,
    };
    let chol = Cholesky::new(m.clone()).ok_or_else(indefinite)?;
    let l = chol.l_dirty();
    let ok = (0..m.nrows()).all(|i| {
        let d = l[(i, i)];
        d.re > 0.0 && d.im.abs() <= 1e-12 * d.re && d.re.is_finite()
    });
    if ok { Ok(chol) } else { Err(indefinite()) }
}

/// Fixed-shape pairwise tree reduction; the result depends only on the item
/// order, never on how the items were produced.
pub fn pairwise_sum<T>(mut items: Vec<T>) -> Option<T>
where
    T: std::ops::Add<Output = T>,
{
    while items.len() > 1 {
        let mut next = Vec::with_capacity(items.len().div_ceil(2));
        let mut it = items.into_iter();
        while let Some(a) = it.next() {
            match it.next() {
                Some(b) => next.push(a + b),
                None => next.push(a),
            }
        }
        items = next;
    }
    items.pop()
}

/// Row-major `{rows, cols, re, im}` form used by every JSON document.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsonMatrix {
    pub rows: usize,
    pub cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl From<&ComplexMatrix> for JsonMatrix {
    fn from(m: &ComplexMatrix) -> Self {
        let v = vec_r(m);
        Self {
            rows: m.nrows(),
            cols: m.ncols(),
            re: v.iter().map(|z| z.re).collect(),
            im: v.iter().map(|z| z.im).collect(),
        }
    }
}

impl From<&HermitianMatrix> for JsonMatrix {
    fn from(m: &HermitianMatrix) -> Self {
        Self::from(m.matrix())
    }
}

impl TryFrom<&JsonMatrix> for ComplexMatrix {
    type Error = Error;

    fn try_from(j: &JsonMatrix) -> Result<Self> {
        let len = j.rows * j.cols;
        if j.re.len() != len || j.im.len() != len {
            return Err(Error::DimensionMismatch(format!(
                "matrix {}x{} needs {} entries, got re {} / im {}",
                j.rows,
                j.cols,
                len,
                j.re.len(),
                j.im.len()
            )));
        }
        let m = ComplexMatrix::from_row_iterator(
            j.rows,
            j.cols,
            j.re.iter().zip(&j.im).map(|(&re, &im)| C64::new(re, im)),
        );
        if !is_finite(&m) {
            return Err(Error::NonFinite);
        }
        Ok(m)
    }
}

impl TryFrom<&JsonMatrix> for HermitianMatrix {
    type Error = Error;

    fn try_from(j: &JsonMatrix) -> Result<Self> {
        HermitianMatrix::new(ComplexMatrix::try_from(j)?)
    }
}

pub fn random_complex(g: &mut GaussianStream, rows: usize, cols: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(rows, cols, |_, _| g.complex_normal())
}

pub fn random_hermitian(g: &mut GaussianStream, n: usize) -> HermitianMatrix {
    HermitianMatrix::from_hermitian_part(random_complex(g, n, n))
}

/// `G G^H` for a Gaussian `G` with `rank` columns.
pub fn random_psd(g: &mut GaussianStream, n: usize, rank: usize) -> HermitianMatrix {
    let f = random_complex(g, n, rank);
    HermitianMatrix::from_hermitian_part(&f * f.adjoint())
}

/// Haar-distributed unitary from the QR factorization of a Gaussian matrix.
pub fn random_unitary(g: &mut GaussianStream, n: usize) -> ComplexMatrix {
    let qr = random_complex(g, n, n).qr();
    let (mut q, r) = qr.unpack();
    for j in 0..n {
        let d = r[(j, j)];
        let phase = if d.norm() > 0.0 { d / d.norm() } else { ONE };
        q.column_mut(j).iter_mut().for_each(|z| *z *= phase);
    }
    q
}
