//! Shared fixtures for the integration suites.
#![allow(dead_code)]

use covcap::covariance::{CovarianceSpec, KronTerm};
use covcap::matcore::{random_psd, random_unitary, real, ComplexMatrix, ComplexVector, HermitianMatrix, ONE};
use covcap::rng::GaussianStream;

pub fn unit(n: usize, i: usize) -> ComplexVector {
    let mut v = ComplexVector::zeros(n);
    v[i] = ONE;
    v
}

pub fn identity_spec(m: usize, n: usize) -> CovarianceSpec {
    CovarianceSpec::kron_sum(
        m,
        n,
        1.0,
        vec![KronTerm { r: HermitianMatrix::identity(m), t: HermitianMatrix::identity(n) }],
    )
    .unwrap()
}

pub fn twisted_pair_spec() -> CovarianceSpec {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let g = ComplexVector::from_vec(vec![real(s), real(s)]);
    CovarianceSpec::kron_sum(
        2,
        2,
        1.0,
        vec![
            KronTerm { r: HermitianMatrix::outer(&unit(2, 0)), t: HermitianMatrix::outer(&unit(2, 0)) },
            KronTerm { r: HermitianMatrix::outer(&unit(2, 1)), t: HermitianMatrix::outer(&g) },
        ],
    )
    .unwrap()
}

/// Correlated receive side shared by the Kronecker fixtures.
pub fn receive_correlation() -> HermitianMatrix {
    let m = ComplexMatrix::from_row_slice(
        2,
        2,
        &[real(1.0), covcap::matcore::C64::new(0.4, 0.3), covcap::matcore::C64::new(0.4, -0.3), real(0.8)],
    );
    HermitianMatrix::new(m).unwrap()
}

pub fn kronecker_spec(t: &[f64]) -> CovarianceSpec {
    CovarianceSpec::kron_sum(
        2,
        t.len(),
        1.0,
        vec![KronTerm { r: receive_correlation(), t: HermitianMatrix::from_real_diagonal(t) }],
    )
    .unwrap()
}

/// Kronecker model with a non-diagonal complex transmit correlation.
pub fn rotated_kronecker_spec(seed: u64) -> CovarianceSpec {
    let mut g = GaussianStream::new(seed, 0);
    let t = random_psd(&mut g, 3, 3);
    let t = t.scale(3.0 / t.trace_re());
    CovarianceSpec::kron_sum(2, 3, 1.0, vec![KronTerm { r: receive_correlation(), t }]).unwrap()
}

/// Two-term separable model whose commutant is `{diag(a, b, b)}`: the transmit
/// factors share the split `C ⊕ C²` but generate all of `M(2)` on the second
/// summand.
pub fn split_spec() -> CovarianceSpec {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut g = ComplexVector::zeros(3);
    g[1] = real(s);
    g[2] = real(s);
    let r2 = HermitianMatrix::new(ComplexMatrix::from_row_slice(
        2,
        2,
        &[real(0.5), real(-0.2), real(-0.2), real(1.2)],
    ))
    .unwrap();
    CovarianceSpec::kron_sum(
        2,
        3,
        1.0,
        vec![
            KronTerm { r: receive_correlation(), t: HermitianMatrix::from_real_diagonal(&[1.5, 1.0, 0.0]) },
            KronTerm { r: r2, t: HermitianMatrix::outer(&g).scale(2.0) },
        ],
    )
    .unwrap()
}

/// Random transmit matrix `V diag(B_1, …) V^H` with PSD blocks of the given sizes.
pub fn block_transmit(g: &mut GaussianStream, v: &ComplexMatrix, sizes: &[usize]) -> HermitianMatrix {
    let n = v.nrows();
    let mut d = ComplexMatrix::zeros(n, n);
    let mut o = 0;
    for &l in sizes {
        d.view_mut((o, o), (l, l)).copy_from(random_psd(g, l, l).matrix());
        o += l;
    }
    HermitianMatrix::new(v * d * v.adjoint()).unwrap()
}

/// Structured random covariances with `M, N ≤ 3`: dense, Kronecker with
/// repeated transmit eigenvalues, and sums with a shared transmit split.
pub fn random_spec(seed: u64) -> CovarianceSpec {
    let mut g = GaussianStream::new(seed, 0);
    let m = 1 + (g.uniform() * 3.0) as usize;
    let n = 1 + (g.uniform() * 3.0) as usize;
    match seed % 3 {
        0 => {
            let rank = 1 + (g.uniform() * (m * n) as f64) as usize;
            CovarianceSpec::dense(m, n, 1.0, random_psd(&mut g, m * n, rank)).unwrap()
        }
        1 => {
            let v = random_unitary(&mut g, n);
            let d: Vec<f64> = (0..n).map(|_| 1.0 + (g.uniform() * 2.0).floor()).collect();
            let t = HermitianMatrix::new(&v * HermitianMatrix::from_real_diagonal(&d).matrix() * v.adjoint()).unwrap();
            CovarianceSpec::kron_sum(m, n, 1.0, vec![KronTerm { r: random_psd(&mut g, m, m), t }]).unwrap()
        }
        _ => {
            let v = random_unitary(&mut g, n);
            let split = 1 + (g.uniform() * n as f64) as usize;
            let sizes: Vec<usize> = if split >= n { vec![n] } else { vec![split, n - split] };
            let terms = (0..2)
                .map(|_| KronTerm { r: random_psd(&mut g, m, m), t: block_transmit(&mut g, &v, &sizes) })
                .collect();
            CovarianceSpec::kron_sum(m, n, 1.0, terms).unwrap()
        }
    }
}


pub struct Pipeline {
    pub sigma: HermitianMatrix,
    pub basis: covcap::commutant::AlgebraBasis,
    pub structure: covcap::blockopt::BlockStructure,
}

/// Commutant, transposed minimal resolution and block structure of `spec`.
pub fn pipeline(spec: &CovarianceSpec, seed: u64) -> Pipeline {
    use covcap::commutant::{commutant_basis, minimal_resolution, transpose_resolution};
    let sigma = covcap::covariance::assemble(spec).unwrap();
    let basis = commutant_basis(&sigma, spec.m(), spec.n()).unwrap();
    let res = transpose_resolution(&minimal_resolution(&basis, seed).unwrap());
    let structure = covcap::blockopt::build_block_structure(&res).unwrap();
    Pipeline { sigma, basis, structure }
}

/// `count` base samples symmetrized under the structure's sign group.
pub fn symmetrized_samples(
    spec: &CovarianceSpec,
    structure: &covcap::blockopt::BlockStructure,
    count: usize,
    seed: u64,
) -> covcap::covariance::ChannelSampleSet {
    let set = covcap::covariance::sample_channels(spec, count, seed).unwrap();
    covcap::covariance::symmetrize_samples(&set, &structure.sign_generators()).unwrap()
}

/// Random PSD matrix with trace uniform in `(0, p]`.
pub fn random_feasible(g: &mut GaussianStream, n: usize, p: f64) -> HermitianMatrix {
    let rank = 1 + (g.uniform() * n as f64) as usize;
    let q = random_psd(g, n, rank.min(n));
    let t = p * (1.0 - g.uniform());
    q.scale(t / q.trace_re())
}

pub fn fixtures() -> Vec<(&'static str, CovarianceSpec)> {
    vec![
        ("identity", identity_spec(2, 2)),
        ("twisted_pair", twisted_pair_spec()),
        ("kronecker", kronecker_spec(&[0.2, 1.0, 2.5])),
        ("rotated", rotated_kronecker_spec(4)),
        ("split", split_spec()),
    ]
}

/// `∫_0^∞ ln(1 + ρx) e^{-x} dx` by composite Simpson on `[0, 60]`.
pub fn scalar_capacity_quadrature(rho: f64) -> f64 {
    let (a, b, n) = (0.0f64, 60.0f64, 600_000usize);
    let h = (b - a) / n as f64;
    let f = |x: f64| (1.0 + rho * x).ln() * (-x).exp();
    let mut s = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(a + i as f64 * h);
    }
    s * h / 3.0
}
