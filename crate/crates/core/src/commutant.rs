//! The right commutant `C_Σ = {A : (1_M ⊗ A) Σ = Σ (1_M ⊗ A)}` and its
//! minimal resolutions of identity.
//!
//! `C_Σ` is computed as the null space of the linear map
//! `A ↦ (1_M ⊗ A) Σ − Σ (1_M ⊗ A)` through an SVD of its `(MN)² × N²` matrix.
//! Minimal projections come from the spectral projections of a random Hermitian
//! element of the algebra: for a generic element these are exactly the minimal
//! projections of a resolution of identity. Every result is verified, and a bad
//! draw is retried with fresh coefficients.

use nalgebra::SVD;
use serde::{Deserialize, Serialize};

use crate::covariance::KronTerm;
use crate::matcore::{
    check_unitary, herm_eig, hs_inner, hs_norm, identity, kron, real, unvec_r, vec_r, ComplexMatrix,
    ComplexVector, EigSystem, HermitianMatrix, C64,
};
use crate::rng::GaussianStream;
use crate::{Error, Result};

/// Relative singular value cut for the commutation map.
pub const NULL_TOL: f64 = 1e-9;
/// Commutation residual allowed per basis element, relative to `‖Σ‖_HS`.
pub const COMMUTATION_TOL: f64 = 1e-8;
pub const STAR_TOL: f64 = 1e-8;
pub const PROJECTION_TOL: f64 = 1e-8;
pub const MINIMALITY_TOL: f64 = 1e-7;
pub const SYMMETRY_TOL: f64 = 1e-8;
pub const MAX_RESOLUTION_ATTEMPTS: usize = 5;

/// HS-orthonormal basis of a *-subalgebra of `M(N, C)`.
#[derive(Clone, Debug)]
pub struct AlgebraBasis {
    pub n: usize,
    pub elements: Vec<ComplexMatrix>,
    /// Full singular spectrum of the commutation map, descending. Empty for
    /// bases not produced by [`commutant_basis`].
    pub singular_values: Vec<f64>,
}

impl AlgebraBasis {
    /// Orthonormalizes `spanning` (modified Gram-Schmidt in HS geometry),
    /// dropping dependent elements.
    pub fn from_spanning_set(n: usize, spanning: &[ComplexMatrix]) -> Result<Self> {
        let mut elements: Vec<ComplexMatrix> = Vec::new();
        for a in spanning {
            if a.shape() != (n, n) {
                return Err(Error::DimensionMismatch(format!(
                    "algebra element is {:?}, expected {n}x{n}",
                    a.shape()
                )));
            }
            let mut v = a.clone();
            for _ in 0..2 {
                for b in &elements {
                    let c = hs_inner(b, &v)?;
                    v -= b * c;
                }
            }
            let norm = hs_norm(&v);
            if norm > 1e-10 * hs_norm(a).max(1.0) {
                elements.push(v / real(norm));
            }
        }
        Ok(Self {
            n,
            elements,
            singular_values: Vec::new(),
        })
    }

    /// All of `M(N, C)`, spanned by the matrix units.
    pub fn full(n: usize) -> Self {
        let elements = (0..n * n)
            .map(|k| {
                let mut e = ComplexMatrix::zeros(n, n);
                e[(k / n, k % n)] = real(1.0);
                e
            })
            .collect();
        Self {
            n,
            elements,
            singular_values: Vec::new(),
        }
    }

    /// `C · 1_N`.
    pub fn scalars(n: usize) -> Self {
        Self {
            n,
            elements: vec![identity(n) / real((n as f64).sqrt())],
            singular_values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.elements.len()
    }

    /// Orthogonal projection onto the span.
    pub fn project(&self, a: &ComplexMatrix) -> ComplexMatrix {
        self.elements
            .iter()
            .fold(ComplexMatrix::zeros(self.n, self.n), |acc, b| {
                let c: C64 = b.iter().zip(a.iter()).map(|(x, y)| x.conj() * y).sum();
                acc + b * c
            })
    }

    /// `‖A − proj(A)‖_HS`.
    pub fn membership_residual(&self, a: &ComplexMatrix) -> f64 {
        hs_norm(&(a - self.project(a)))
    }

    /// Basis of `{A^t : A ∈ span}`; transposition preserves HS inner products.
    pub fn transpose(&self) -> Self {
        Self {
            n: self.n,
            elements: self.elements.iter().map(|b| b.transpose()).collect(),
            singular_values: self.singular_values.clone(),
        }
    }

    /// Hermitian spanning set `{(B+B^H)/2, (B−B^H)/(2i)}`.
    pub fn hermitian_spanning_set(&self) -> Vec<HermitianMatrix> {
        let half = real(0.5);
        let half_over_i = C64::new(0.0, -0.5);
        self.elements
            .iter()
            .flat_map(|b| {
                let adj = b.adjoint();
                [
                    HermitianMatrix::from_hermitian_part((b + &adj) * half),
                    HermitianMatrix::from_hermitian_part((b - &adj) * half_over_i),
                ]
            })
            .collect()
    }

    /// Random Hermitian element `Σ c_j G_j` with standard normal `c_j`.
    pub fn random_hermitian_element(&self, g: &mut GaussianStream) -> HermitianMatrix {
        let sum = self
            .hermitian_spanning_set()
            .iter()
            .fold(ComplexMatrix::zeros(self.n, self.n), |acc, h| acc + h.matrix() * real(g.normal()));
        HermitianMatrix::from_hermitian_part(sum)
    }
}

/// `(1_M ⊗ A) Σ − Σ (1_M ⊗ A)`.
pub fn commutator(sigma: &ComplexMatrix, m: usize, a: &ComplexMatrix) -> ComplexMatrix {
    let lifted = kron(&identity(m), a);
    &lifted * sigma - sigma * &lifted
}

pub fn commutant_basis(sigma: &HermitianMatrix, m: usize, n: usize) -> Result<AlgebraBasis> {
    let mn = m * n;
    if sigma.dim() != mn {
        return Err(Error::DimensionMismatch(format!(
            "variance is {0}x{0}, expected {mn}x{mn}",
            sigma.dim()
        )));
    }
    // column a·N + b is the image of the matrix unit E_ab
    let mut map = ComplexMatrix::zeros(mn * mn, n * n);
    for k in 0..n * n {
        let mut unit = ComplexMatrix::zeros(n, n);
        unit[(k / n, k % n)] = real(1.0);
        map.set_column(k, &vec_r(&commutator(sigma, m, &unit)));
    }
    let svd = SVD::try_new(map, false, true, f64::EPSILON, 100_000)
        .ok_or(Error::NonConvergence("commutation map SVD"))?;
    let v_t = svd.v_t.as_ref().expect("requested right singular vectors");
    let s_max = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let cut = NULL_TOL * s_max;

    let mut null: Vec<(f64, ComplexMatrix)> = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cut {
            let v = ComplexVector::from_iterator(n * n, v_t.row(k).iter().map(|z| z.conj()));
            null.push((s, unvec_r(&v, n, n)?));
        }
    }
    // right singular vectors are orthonormal; one Gram-Schmidt pass removes
    // rounding drift
    null.sort_by(|a, b| a.0.total_cmp(&b.0));
    let spanning: Vec<ComplexMatrix> = null.into_iter().map(|(_, a)| a).collect();
    let mut basis = AlgebraBasis::from_spanning_set(n, &spanning)?;

    let scale = hs_norm(sigma.matrix());
    for b in &basis.elements {
        let residual = hs_norm(&commutator(sigma.matrix(), m, b));
        if residual > COMMUTATION_TOL * scale.max(f64::MIN_POSITIVE) && residual > 0.0 {
            return Err(Error::NonConvergence("commutant null space"));
        }
    }
    let mut spectrum: Vec<f64> = svd.singular_values.iter().cloned().collect();
    spectrum.sort_by(|a, b| b.total_cmp(a));
    basis.singular_values = spectrum;
    Ok(basis)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StarResiduals {
    pub product_residual: f64,
    pub adjoint_residual: f64,
    pub unit_residual: f64,
}

impl StarResiduals {
    pub fn max(&self) -> f64 {
        self.product_residual
            .max(self.adjoint_residual)
            .max(self.unit_residual)
    }
}

pub fn verify_star_algebra(basis: &AlgebraBasis) -> StarResiduals {
    let mut product_residual: f64 = 0.0;
    let mut adjoint_residual: f64 = 0.0;
    for a in &basis.elements {
        adjoint_residual = adjoint_residual.max(basis.membership_residual(&a.adjoint()));
        for b in &basis.elements {
            product_residual = product_residual.max(basis.membership_residual(&(a * b)));
        }
    }
    StarResiduals {
        product_residual,
        adjoint_residual,
        unit_residual: basis.membership_residual(&identity(basis.n)),
    }
}

/// Mutually orthogonal projections summing to the identity.
#[derive(Clone, Debug)]
pub struct ProjectionResolution {
    pub projections: Vec<HermitianMatrix>,
    pub ranks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionResiduals {
    pub idempotence: f64,
    pub orthogonality: f64,
    pub completeness: f64,
    /// Largest `‖P B P − λ P‖_HS` over projections and basis elements.
    pub minimality: f64,
    /// Largest distance of a projection from the algebra.
    pub membership: f64,
}

impl ProjectionResolution {
    pub fn from_projections(projections: Vec<HermitianMatrix>) -> Self {
        let ranks = projections.iter().map(|p| p.trace_re().round() as usize).collect();
        Self { projections, ranks }
    }

    pub fn len(&self) -> usize {
        self.projections.len()
    }

    pub fn is_empty(&self) -> bool {
        self.projections.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.projections.first().map_or(0, |p| p.dim())
    }

    pub fn residuals(&self, basis: &AlgebraBasis) -> ResolutionResiduals {
        let n = self.dim();
        let mut idempotence: f64 = 0.0;
        let mut orthogonality: f64 = 0.0;
        let mut minimality: f64 = 0.0;
        let mut membership: f64 = 0.0;
        let mut total = ComplexMatrix::zeros(n, n);
        for (i, p) in self.projections.iter().enumerate() {
            let p = p.matrix();
            idempotence = idempotence.max(hs_norm(&(p * p - p)));
            for q in &self.projections[i + 1..] {
                orthogonality = orthogonality.max(hs_norm(&(p * q.matrix())));
            }
            total += p;
            membership = membership.max(basis.membership_residual(p));
            let tr = p.trace().re;
            for b in &basis.elements {
                let pbp = p * b * p;
                let lambda = pbp.trace() / real(tr);
                minimality = minimality.max(hs_norm(&(&pbp - p * lambda)));
            }
        }
        ResolutionResiduals {
            idempotence,
            orthogonality,
            completeness: hs_norm(&(total - identity(n))),
            minimality,
            membership,
        }
    }

    /// True when every invariant of a minimal resolution in `basis` holds.
    pub fn is_minimal_in(&self, basis: &AlgebraBasis) -> bool {
        let r = self.residuals(basis);
        let ranks_ok = self
            .projections
            .iter()
            .zip(&self.ranks)
            .all(|(p, &k)| k > 0 && (p.trace_re() - k as f64).abs() < 1e-6);
        ranks_ok
            && r.idempotence <= PROJECTION_TOL
            && r.orthogonality <= PROJECTION_TOL
            && r.completeness <= PROJECTION_TOL
            && r.membership <= PROJECTION_TOL
            && r.minimality <= MINIMALITY_TOL
    }
}

/// Spectral projections of a seeded random Hermitian element, retried up to
/// [`MAX_RESOLUTION_ATTEMPTS`] times until they form a minimal resolution.
pub fn minimal_resolution(basis: &AlgebraBasis, seed: u64) -> Result<ProjectionResolution> {
    for attempt in 0..MAX_RESOLUTION_ATTEMPTS {
        let mut g = GaussianStream::new(seed, attempt as u64);
        let x = basis.random_hermitian_element(&mut g);
        let eig: EigSystem = herm_eig(&x)?;
        let res = ProjectionResolution::from_projections(
            eig.spectral_projections().into_iter().map(|(_, p)| p).collect(),
        );
        if res.is_minimal_in(basis) {
            return Ok(res);
        }
    }
    Err(Error::GenericityFailure {
        attempts: MAX_RESOLUTION_ATTEMPTS,
    })
}

pub fn rank_profile(res: &ProjectionResolution) -> Vec<usize> {
    let mut ranks = res.ranks.clone();
    ranks.sort_unstable();
    ranks
}

/// `{P_j^t}`: a minimal resolution of the transposed algebra.
pub fn transpose_resolution(res: &ProjectionResolution) -> ProjectionResolution {
    ProjectionResolution {
        projections: res.projections.iter().map(|p| p.transpose()).collect(),
        ranks: res.ranks.clone(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SymmetryCheck {
    pub is_symmetry: bool,
    pub residual: f64,
}

/// Whether `H ↦ H·U` preserves the law `N(0, Σ)`, i.e. `U^t ∈ C_Σ`.
pub fn is_symmetry(sigma: &HermitianMatrix, u: &ComplexMatrix) -> Result<SymmetryCheck> {
    let n = u.nrows();
    if !u.is_square() || n == 0 || !sigma.dim().is_multiple_of(n) {
        return Err(Error::DimensionMismatch(format!(
            "unitary {:?} does not act on variance of size {}",
            u.shape(),
            sigma.dim()
        )));
    }
    check_unitary(u)?;
    let m = sigma.dim() / n;
    let scale = hs_norm(sigma.matrix());
    let raw = hs_norm(&commutator(sigma.matrix(), m, &u.transpose()));
    let residual = if scale > 0.0 { raw / scale } else { 0.0 };
    Ok(SymmetryCheck {
        is_symmetry: residual <= SYMMETRY_TOL,
        residual,
    })
}

/// `exp(iX)` for a random Hermitian `X` in the algebra; such unitaries stay in
/// the algebra since all spectral projections of `X` do.
pub fn random_algebra_unitary(basis: &AlgebraBasis, g: &mut GaussianStream) -> Result<ComplexMatrix> {
    let x = basis.random_hermitian_element(g);
    let eig = herm_eig(&x)?;
    let mut scaled = eig.vectors.clone();
    for (j, &lambda) in eig.values.iter().enumerate() {
        let phase = C64::from_polar(1.0, lambda);
        scaled.column_mut(j).iter_mut().for_each(|z| *z *= phase);
    }
    Ok(scaled * eig.vectors.adjoint())
}

/// Replaces each `T_i` by its pinching `Σ_j P_j T_i P_j`. Fails if the
/// reassembled variance moved, which means `res` is not in `C_Σ`.
pub fn pinch_decomposition(terms: &[KronTerm], res: &ProjectionResolution) -> Result<Vec<KronTerm>> {
    let Some(first) = terms.first() else {
        return Ok(Vec::new());
    };
    let (m, n) = (first.r.dim(), first.t.dim());
    if res.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "resolution acts on dimension {}, transmit side is {n}",
            res.dim()
        )));
    }
    let pinched: Vec<KronTerm> = terms
        .iter()
        .map(|term| {
            let t = res
                .projections
                .iter()
                .fold(ComplexMatrix::zeros(n, n), |acc, p| acc + p.matrix() * term.t.matrix() * p.matrix());
            KronTerm {
                r: term.r.clone(),
                t: HermitianMatrix::from_hermitian_part(t),
            }
        })
        .collect();
    let assemble = |ts: &[KronTerm]| {
        ts.iter()
            .fold(ComplexMatrix::zeros(m * n, m * n), |acc, t| acc + kron(&t.r, &t.t))
    };
    let before = assemble(terms);
    let residual = hs_norm(&(assemble(&pinched) - &before));
    if residual > COMMUTATION_TOL * hs_norm(&before) && residual > 0.0 {
        return Err(Error::ReassemblyResidual { residual });
    }
    Ok(pinched)
}
