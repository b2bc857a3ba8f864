//! Block-diagonal optimization of the input covariance.
//!
//! Given a minimal resolution `{P_j}` of the transposed commutant, a unitary
//! `U` whose column groups span the ranges of `P_j` block-diagonalizes some
//! capacity-achieving covariance: `Q = U diag(Q_1, …, Q_c) U^H`. This module
//! builds that structure, evaluates the sample-average capacity
//! `Ĉ = (1/S) Σ_s log det(1 + H_s Q H_s^H / σ²)` and its block gradients on a
//! fixed sample set, maximizes over `{Q_j ≥ 0, Σ tr Q_j ≤ p}` by projected
//! gradient ascent with Armijo backtracking, and certifies the result with
//! the Lagrange conditions `G_k = μ 1 − Ψ_k`, `Ψ_k ≥ 0`, `tr(Ψ_k Q_k) = 0`,
//! `Σ tr Q_k = p`.
//!
//! Per-sample terms are evaluated in parallel and combined with a fixed
//! pairwise tree, so every number here is bit-stable across worker counts.

use std::ops::Add;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::commutant::{
    commutant_basis, minimal_resolution, transpose_resolution, ProjectionResolution,
};
use crate::covariance::ChannelSampleSet;
use crate::matcore::{
    herm_eig, hs_norm, identity, inverse_hpd, kron, log_det_hpd, pairwise_sum, real, unitarity_residual,
    ComplexMatrix, EigSystem, HermitianMatrix, PSD_TOL,
};
use crate::{Error, Result};

const STRUCTURE_TOL: f64 = 1e-9;
const INDICATOR_TOL: f64 = 1e-8;
/// Slack on the power budget for feasibility checks.
pub const TRACE_SLACK: f64 = 1e-9;

/// Column groups of a unitary aligned with a resolution of identity.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockStructure {
    pub u: ComplexMatrix,
    pub sizes: Vec<usize>,
    /// Source projections, one per block.
    pub projections: Vec<HermitianMatrix>,
}

impl BlockStructure {
    /// One block of size `n` with `U = I`.
    pub fn trivial(n: usize) -> Self {
        Self {
            u: identity(n),
            sizes: vec![n],
            projections: vec![HermitianMatrix::identity(n)],
        }
    }

    pub fn n(&self) -> usize {
        self.u.nrows()
    }

    pub fn block_count(&self) -> usize {
        self.sizes.len()
    }

    pub fn offsets(&self) -> Vec<usize> {
        self.sizes
            .iter()
            .scan(0, |acc, &l| {
                let start = *acc;
                *acc += l;
                Some(start)
            })
            .collect()
    }

    /// The `N × l_k` column group `U^k`.
    pub fn block_columns(&self, k: usize) -> ComplexMatrix {
        let start = self.offsets()[k];
        self.u.columns(start, self.sizes[k]).into_owned()
    }

    /// Sign unitaries `U_j = 2(P_1 + … + P_j) − 1` for `j = 1..c−1`. Their
    /// closure under multiplication is the block-sign group fixing the first
    /// block.
    pub fn sign_generators(&self) -> Vec<ComplexMatrix> {
        let n = self.n();
        let mut partial = ComplexMatrix::zeros(n, n);
        let mut gens = Vec::new();
        for p in self.projections.iter().take(self.block_count().saturating_sub(1)) {
            partial += p.matrix();
            gens.push(&partial * real(2.0) - identity(n));
        }
        gens
    }

    /// Largest deviation of `U^H P_j U` from the 0/1 indicator of block `j`.
    pub fn indicator_residual(&self) -> f64 {
        let n = self.n();
        let offsets = self.offsets();
        self.projections
            .iter()
            .enumerate()
            .map(|(j, p)| {
                let mut ind = ComplexMatrix::zeros(n, n);
                for i in offsets[j]..offsets[j] + self.sizes[j] {
                    ind[(i, i)] = real(1.0);
                }
                hs_norm(&(self.u.adjoint() * p.matrix() * &self.u - ind))
            })
            .fold(0.0, f64::max)
    }
}

/// Orthonormal basis of `range(P)` by column-pivoted Gram-Schmidt on the
/// columns of `P`; for coordinate projections this returns canonical vectors
/// in index order.
fn range_basis(p: &ComplexMatrix, rank: usize) -> ComplexMatrix {
    let n = p.nrows();
    let mut cols: Vec<_> = (0..n).map(|j| p.column(j).into_owned()).collect();
    let mut basis = ComplexMatrix::zeros(n, rank);
    for k in 0..rank {
        let (best, _) = cols
            .iter()
            .enumerate()
            .fold((0, -1.0), |(bi, bn), (i, c)| {
                let nrm = c.norm();
                if nrm > bn { (i, nrm) } else { (bi, bn) }
            });
        let q = &cols[best] / real(cols[best].norm());
        for c in cols.iter_mut() {
            let proj = (q.adjoint() * &*c)[(0, 0)];
            *c -= &q * proj;
        }
        basis.set_column(k, &q);
    }
    basis
}

pub fn build_block_structure(res: &ProjectionResolution) -> Result<BlockStructure> {
    let n = res.dim();
    let mut u = ComplexMatrix::zeros(n, n);
    let mut offset = 0;
    for (p, &rank) in res.projections.iter().zip(&res.ranks) {
        if offset + rank > n {
            return Err(Error::InvalidArgument("projection ranks exceed dimension".into()));
        }
        let cols = range_basis(p.matrix(), rank);
        u.columns_mut(offset, rank).copy_from(&cols);
        offset += rank;
    }
    if offset != n {
        return Err(Error::InvalidArgument(format!(
            "projection ranks sum to {offset}, expected {n}"
        )));
    }
    let bs = BlockStructure {
        u,
        sizes: res.ranks.clone(),
        projections: res.projections.clone(),
    };
    if unitarity_residual(&bs.u) > STRUCTURE_TOL || bs.indicator_residual() > INDICATOR_TOL {
        return Err(Error::InvalidArgument(
            "resolution is not a set of orthogonal projections summing to identity".into(),
        ));
    }
    Ok(bs)
}

/// PSD blocks `Q_1, …, Q_c` in the coordinates of a [`BlockStructure`].
#[derive(Clone, Debug, PartialEq)]
pub struct BlockCovariance {
    pub structure: BlockStructure,
    pub blocks: Vec<HermitianMatrix>,
}

impl BlockCovariance {
    pub fn new(structure: BlockStructure, blocks: Vec<HermitianMatrix>) -> Result<Self> {
        if blocks.len() != structure.block_count()
            || blocks.iter().zip(&structure.sizes).any(|(b, &l)| b.dim() != l)
        {
            return Err(Error::DimensionMismatch(format!(
                "blocks {:?} do not match sizes {:?}",
                blocks.iter().map(|b| b.dim()).collect::<Vec<_>>(),
                structure.sizes
            )));
        }
        Ok(Self { structure, blocks })
    }

    /// `(p/N)·1` on every block.
    pub fn uniform(structure: BlockStructure, p: f64) -> Self {
        let n = structure.n() as f64;
        let blocks = structure
            .sizes
            .iter()
            .map(|&l| HermitianMatrix::from_real_diagonal(&vec![p / n; l]))
            .collect();
        Self { structure, blocks }
    }

    /// Diagonal blocks of `U^H Q U`; off-diagonal blocks are dropped.
    pub fn from_full(structure: BlockStructure, q: &HermitianMatrix) -> Self {
        let rotated = structure.u.adjoint() * q.matrix() * &structure.u;
        let blocks = structure
            .offsets()
            .iter()
            .zip(&structure.sizes)
            .map(|(&o, &l)| HermitianMatrix::from_hermitian_part(rotated.view((o, o), (l, l)).into_owned()))
            .collect();
        Self { structure, blocks }
    }

    pub fn total_trace(&self) -> f64 {
        self.blocks.iter().map(|b| b.trace_re()).sum()
    }

    pub fn check_feasible(&self, p: f64) -> Result<()> {
        for b in &self.blocks {
            b.check_psd()?;
        }
        let tr = self.total_trace();
        if tr > p + TRACE_SLACK {
            return Err(Error::InvalidArgument(format!(
                "total trace {tr} exceeds power budget {p}"
            )));
        }
        Ok(())
    }
}

/// `U diag(Q_1, …, Q_c) U^H`.
pub fn assemble_q(bc: &BlockCovariance) -> HermitianMatrix {
    let n = bc.structure.n();
    let mut d = ComplexMatrix::zeros(n, n);
    for ((&o, &l), b) in bc.structure.offsets().iter().zip(&bc.structure.sizes).zip(&bc.blocks) {
        d.view_mut((o, o), (l, l)).copy_from(b.matrix());
    }
    HermitianMatrix::from_hermitian_part(&bc.structure.u * d * bc.structure.u.adjoint())
}

/// Zeroes the off-diagonal blocks of `U^H Q U`.
pub fn pinch_covariance(q: &HermitianMatrix, bs: &BlockStructure) -> HermitianMatrix {
    assemble_q(&BlockCovariance::from_full(bs.clone(), q))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityEstimate {
    /// Sample mean in nats.
    pub mean: f64,
    pub stderr: f64,
    pub count: usize,
}

/// Per-sample block channels `H_s U^k`.
struct BlockedChannels {
    m: usize,
    noise_power: f64,
    channels: Vec<Vec<ComplexMatrix>>,
}

#[derive(Clone)]
struct BlockSum(Vec<ComplexMatrix>);

impl Add for BlockSum {
    type Output = BlockSum;

    fn add(self, rhs: BlockSum) -> BlockSum {
        BlockSum(self.0.into_iter().zip(rhs.0).map(|(a, b)| a + b).collect())
    }
}

impl BlockedChannels {
    fn new(set: &ChannelSampleSet, bs: &BlockStructure, noise_power: f64) -> Result<Self> {
        if set.n != bs.n() {
            return Err(Error::DimensionMismatch(format!(
                "samples have {} transmit antennas, structure has {}",
                set.n,
                bs.n()
            )));
        }
        if noise_power.is_nan() || noise_power <= 0.0 {
            return Err(Error::InvalidArgument("noise power must be positive".into()));
        }
        if set.samples.is_empty() {
            return Err(Error::InvalidArgument("empty sample set".into()));
        }
        let columns: Vec<ComplexMatrix> = (0..bs.block_count()).map(|k| bs.block_columns(k)).collect();
        let channels = set
            .samples
            .par_iter()
            .map(|h| columns.iter().map(|u| h * u).collect())
            .collect();
        Ok(Self {
            m: set.m,
            noise_power,
            channels,
        })
    }

    fn count(&self) -> usize {
        self.channels.len()
    }

    /// `1 + (1/σ²) Σ_l H_l Q_l H_l^H`.
    fn gram(&self, hs: &[ComplexMatrix], blocks: &[HermitianMatrix]) -> ComplexMatrix {
        let scale = real(1.0 / self.noise_power);
        hs.iter().zip(blocks).fold(identity(self.m), |acc, (h, q)| {
            acc + h * q.matrix() * h.adjoint() * scale
        })
    }

    fn log_det_terms(&self, blocks: &[HermitianMatrix]) -> Result<Vec<f64>> {
        self.channels
            .par_iter()
            .map(|hs| log_det_hpd(&self.gram(hs, blocks)).map_err(|_| corrupted()))
            .collect()
    }

    fn value(&self, blocks: &[HermitianMatrix]) -> Result<CapacityEstimate> {
        Ok(summarize(self.log_det_terms(blocks)?))
    }

    fn value_and_gradient(&self, blocks: &[HermitianMatrix]) -> Result<(CapacityEstimate, Vec<HermitianMatrix>)> {
        let terms: Vec<(f64, BlockSum)> = self
            .channels
            .par_iter()
            .map(|hs| {
                let a = self.gram(hs, blocks);
                let ld = log_det_hpd(&a).map_err(|_| corrupted())?;
                let inv = inverse_hpd(&a).map_err(|_| corrupted())?;
                let grads = hs.iter().map(|h| h.adjoint() * &inv * h).collect();
                Ok((ld, BlockSum(grads)))
            })
            .collect::<Result<_>>()?;
        let (lds, grads): (Vec<f64>, Vec<BlockSum>) = terms.into_iter().unzip();
        let scale = real(1.0 / (self.count() as f64 * self.noise_power));
        let total = pairwise_sum(grads).expect("non-empty sample set");
        let gradient = total
            .0
            .into_iter()
            .map(|g| HermitianMatrix::from_hermitian_part(g * scale))
            .collect();
        Ok((summarize(lds), gradient))
    }
}

fn corrupted() -> Error {
    Error::InvalidArgument("1 + HQH^H/σ² is not positive definite; input covariance is not PSD".into())
}

fn summarize(terms: Vec<f64>) -> CapacityEstimate {
    let count = terms.len();
    let s = count as f64;
    let mean = pairwise_sum(terms.clone()).unwrap_or(0.0) / s;
    let stderr = if count > 1 {
        let ss = pairwise_sum(terms.iter().map(|x| (x - mean) * (x - mean)).collect()).unwrap_or(0.0);
        (ss / (s - 1.0)).sqrt() / s.sqrt()
    } else {
        0.0
    };
    CapacityEstimate { mean, stderr, count }
}

/// `(1/S) Σ_s log det(1 + H_s Q H_s^H / σ²)` in nats.
pub fn capacity_estimate(set: &ChannelSampleSet, q: &HermitianMatrix, noise_power: f64) -> Result<CapacityEstimate> {
    if q.dim() != set.n {
        return Err(Error::DimensionMismatch(format!(
            "covariance is {0}x{0}, expected {1}x{1}",
            q.dim(),
            set.n
        )));
    }
    BlockedChannels::new(set, &BlockStructure::trivial(set.n), noise_power)?.value(std::slice::from_ref(q))
}

/// Block gradients `G_k = (1/(Sσ²)) Σ_s H_{s,k}^H M_s^{-1} H_{s,k}`.
pub fn capacity_gradient(set: &ChannelSampleSet, bc: &BlockCovariance, noise_power: f64) -> Result<Vec<HermitianMatrix>> {
    let ch = BlockedChannels::new(set, &bc.structure, noise_power)?;
    Ok(ch.value_and_gradient(&bc.blocks)?.1)
}

/// Euclidean projection of `values` onto `{x ≥ 0, Σ x ≤ budget}`.
pub fn project_capped_simplex(values: &[f64], budget: f64) -> Vec<f64> {
    let clamped: Vec<f64> = values.iter().map(|&x| x.max(0.0)).collect();
    if clamped.iter().sum::<f64>() <= budget {
        return clamped;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumulative = 0.0;
    let mut theta = 0.0;
    for (k, &x) in sorted.iter().enumerate() {
        cumulative += x;
        let candidate = (cumulative - budget) / (k + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        } else {
            break;
        }
    }
    values.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// HS-nearest feasible block tuple: PSD blocks with total trace at most `p`.
pub fn project_blocks(blocks: &[HermitianMatrix], p: f64) -> Result<Vec<HermitianMatrix>> {
    let eigs: Vec<EigSystem> = blocks.iter().map(herm_eig).collect::<Result<_>>()?;
    let all: Vec<f64> = eigs.iter().flat_map(|e| e.values.iter().copied()).collect();
    if all.iter().all(|&x| x >= 0.0) && all.iter().sum::<f64>() <= p {
        return Ok(blocks.to_vec());
    }
    let projected = project_capped_simplex(&all, p);
    let mut offset = 0;
    Ok(eigs
        .into_iter()
        .map(|e| {
            let l = e.values.len();
            let sys = EigSystem {
                values: projected[offset..offset + l].to_vec(),
                vectors: e.vectors,
            };
            offset += l;
            HermitianMatrix::from_hermitian_part(sys.reconstruct())
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub max_iter: usize,
    pub tol_kkt: f64,
    pub initial_step: f64,
    pub backtrack_factor: f64,
    pub sufficient_increase: f64,
    pub max_backtracks: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iter: 2000,
            tol_kkt: 1e-7,
            initial_step: 1.0,
            backtrack_factor: 0.5,
            sufficient_increase: 1e-4,
            max_backtracks: 60,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub mu: f64,
    pub stationarity_residuals: Vec<f64>,
    pub psd_slack_violations: Vec<f64>,
    pub complementarity: Vec<f64>,
    pub trace_gap: f64,
}

impl KktReport {
    fn from_gradient(gradient: &[HermitianMatrix], blocks: &[HermitianMatrix], p: f64) -> Result<Self> {
        let eigs: Vec<EigSystem> = gradient.iter().map(herm_eig).collect::<Result<_>>()?;
        let mu = eigs
            .iter()
            .filter_map(|e| e.values.last().copied())
            .fold(f64::NEG_INFINITY, f64::max);
        let mut stationarity_residuals = Vec::new();
        let mut psd_slack_violations = Vec::new();
        let mut complementarity = Vec::new();
        for (g, q) in gradient.iter().zip(blocks) {
            let l = g.dim();
            let psi = identity(l) * real(mu) - g.matrix();
            stationarity_residuals.push(hs_norm(&(g.matrix() - identity(l) * real(mu) + &psi)));
            let psi_eig = herm_eig(&HermitianMatrix::from_hermitian_part(psi.clone()))?;
            psd_slack_violations.push((-psi_eig.values[0]).max(0.0));
            complementarity.push((psi * q.matrix()).trace().re.abs());
        }
        let total: f64 = blocks.iter().map(|b| b.trace_re()).sum();
        Ok(Self {
            mu,
            stationarity_residuals,
            psd_slack_violations,
            complementarity,
            trace_gap: (total - p).abs(),
        })
    }

    /// Largest of all residuals.
    pub fn max_violation(&self) -> f64 {
        self.stationarity_residuals
            .iter()
            .chain(&self.psd_slack_violations)
            .chain(&self.complementarity)
            .copied()
            .fold(self.trace_gap, f64::max)
    }

    pub fn is_optimal(&self, tol: f64) -> bool {
        self.mu > 0.0 && self.max_violation() <= tol
    }
}

pub fn kkt_verify(set: &ChannelSampleSet, bc: &BlockCovariance, p: f64, noise_power: f64) -> Result<KktReport> {
    let gradient = capacity_gradient(set, bc, noise_power)?;
    KktReport::from_gradient(&gradient, &bc.blocks, p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub covariance: BlockCovariance,
    pub kkt: KktReport,
    pub capacity: CapacityEstimate,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value at every accepted iterate, starting with the initial point.
    pub objective_trace: Vec<f64>,
    pub projected_gradient_norm: f64,
}

impl Solution {
    pub fn q(&self) -> HermitianMatrix {
        assemble_q(&self.covariance)
    }
}

fn blocks_distance(a: &[HermitianMatrix], b: &[HermitianMatrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| hs_norm(&(x.matrix() - y.matrix())).powi(2))
        .sum::<f64>()
        .sqrt()
}

fn blocks_inner_re(a: &[HermitianMatrix], b: &[ComplexMatrix]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y.iter()).map(|(u, v)| (u.conj() * v).re).sum::<f64>())
        .sum()
}

fn step_blocks(q: &[HermitianMatrix], g: &[HermitianMatrix], t: f64) -> Vec<HermitianMatrix> {
    q.iter()
        .zip(g)
        .map(|(a, b)| HermitianMatrix::from_hermitian_part(a.matrix() + b.matrix() * real(t)))
        .collect()
}

/// Projected gradient ascent on the fixed sample average restricted to the
/// block structure, starting from `(p/N)·1`.
pub fn solve_blocks(
    set: &ChannelSampleSet,
    bs: &BlockStructure,
    p: f64,
    noise_power: f64,
    opts: &SolverOptions,
) -> Result<Solution> {
    solve_blocks_from(set, &BlockCovariance::uniform(bs.clone(), p), p, noise_power, opts)
}

/// As [`solve_blocks`], from a caller-supplied starting point (projected onto
/// the feasible set first).
pub fn solve_blocks_from(
    set: &ChannelSampleSet,
    init: &BlockCovariance,
    p: f64,
    noise_power: f64,
    opts: &SolverOptions,
) -> Result<Solution> {
    if !(p > 0.0 && p.is_finite()) {
        return Err(Error::InvalidArgument(format!("power budget must be positive, got {p}")));
    }
    let bs = &init.structure;
    let ch = BlockedChannels::new(set, bs, noise_power)?;
    let mut q = project_blocks(&init.blocks, p)?;
    let (mut value, mut grad) = ch.value_and_gradient(&q)?;
    let mut trace = vec![value.mean];
    let mut iterations = 0;
    let mut converged = false;
    let mut pg_norm;

    loop {
        let kkt = KktReport::from_gradient(&grad, &q, p)?;
        let full_step = project_blocks(&step_blocks(&q, &grad, 1.0), p)?;
        pg_norm = blocks_distance(&full_step, &q);
        if kkt.max_violation() <= opts.tol_kkt && pg_norm <= opts.tol_kkt {
            converged = true;
            break;
        }
        if iterations == opts.max_iter {
            break;
        }

        let mut t = opts.initial_step;
        let mut accepted = None;
        for _ in 0..=opts.max_backtracks {
            let candidate = project_blocks(&step_blocks(&q, &grad, t), p)?;
            let delta: Vec<ComplexMatrix> = candidate
                .iter()
                .zip(&q)
                .map(|(a, b)| a.matrix() - b.matrix())
                .collect();
            let predicted = blocks_inner_re(&grad, &delta);
            let trial = ch.value(&candidate)?;
            if trial.mean >= value.mean + opts.sufficient_increase * predicted {
                accepted = Some(candidate);
                break;
            }
            t *= opts.backtrack_factor;
        }
        let Some(next) = accepted else {
            // no representable ascent step remains
            break;
        };
        q = next;
        (value, grad) = ch.value_and_gradient(&q)?;
        trace.push(value.mean);
        iterations += 1;
    }

    let covariance = BlockCovariance::new(bs.clone(), q)?;
    let kkt = KktReport::from_gradient(&grad, &covariance.blocks, p)?;
    let solution = Solution {
        covariance,
        kkt,
        capacity: value,
        iterations,
        converged,
        objective_trace: trace,
        projected_gradient_norm: pg_norm,
    };
    if converged {
        Ok(solution)
    } else {
        Err(Error::MaxIterExceeded {
            iterations,
            best: Box::new(solution),
        })
    }
}

/// Unrestricted baseline: [`solve_blocks`] with a single block of size `n`.
pub fn solve_full(set: &ChannelSampleSet, n: usize, p: f64, noise_power: f64, opts: &SolverOptions) -> Result<Solution> {
    solve_blocks(set, &BlockStructure::trivial(n), p, noise_power, opts)
}

/// Block structure for `R ⊗ T`: the rank-one minimal resolution of the
/// transposed commutant.
pub fn kronecker_structure(r: &HermitianMatrix, t: &HermitianMatrix, seed: u64) -> Result<BlockStructure> {
    let sigma = HermitianMatrix::from_hermitian_part(kron(r, t));
    let basis = commutant_basis(&sigma, r.dim(), t.dim())?;
    let res = transpose_resolution(&minimal_resolution(&basis, seed)?);
    build_block_structure(&res)
}

/// Power allocation over the eigenbasis of a Kronecker model's rank-one block
/// structure: maximizes the same sample average over diagonal powers only.
/// Returns the powers together with the basis they refer to.
pub fn kronecker_power_reference(
    r: &HermitianMatrix,
    t: &HermitianMatrix,
    p: f64,
    noise_power: f64,
    set: &ChannelSampleSet,
) -> Result<(Vec<f64>, ComplexMatrix)> {
    let bs = kronecker_structure(r, t, 0)?;
    if bs.sizes.iter().any(|&l| l != 1) {
        return Err(Error::InvalidArgument("Kronecker structure is not rank-one".into()));
    }
    let n = t.dim();
    let m = set.m;
    let beams: Vec<Vec<nalgebra::DVector<crate::matcore::C64>>> = set
        .samples
        .iter()
        .map(|h| (0..n).map(|k| h * bs.u.column(k)).collect())
        .collect();
    let s = beams.len() as f64;

    let evaluate = |powers: &[f64], with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let per: Vec<(f64, Vec<f64>)> = beams
            .par_iter()
            .map(|hk| {
                let mut a = identity(m);
                for (h, &pw) in hk.iter().zip(powers) {
                    a += h * h.adjoint() * real(pw / noise_power);
                }
                let ld = log_det_hpd(&a).map_err(|_| corrupted())?;
                let g = if with_grad {
                    let inv = inverse_hpd(&a).map_err(|_| corrupted())?;
                    hk.iter().map(|h| (h.adjoint() * &inv * h)[(0, 0)].re / noise_power).collect()
                } else {
                    Vec::new()
                };
                Ok((ld, g))
            })
            .collect::<Result<_>>()?;
        let value = per.iter().map(|(v, _)| v).sum::<f64>() / s;
        let mut grad = vec![0.0; if with_grad { n } else { 0 }];
        for (_, g) in &per {
            for (acc, x) in grad.iter_mut().zip(g) {
                *acc += x / s;
            }
        }
        Ok((value, grad))
    };

    let mut powers = vec![p / n as f64; n];
    let (mut value, mut grad) = evaluate(&powers, true)?;
    for _ in 0..20_000 {
        let full: Vec<f64> = project_capped_simplex(
            &powers.iter().zip(&grad).map(|(x, g)| x + g).collect::<Vec<_>>(),
            p,
        );
        let pg: f64 = full.iter().zip(&powers).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        if pg <= 1e-12 {
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..60 {
            let cand = project_capped_simplex(
                &powers.iter().zip(&grad).map(|(x, g)| x + t * g).collect::<Vec<_>>(),
                p,
            );
            let predicted: f64 = cand.iter().zip(&powers).zip(&grad).map(|((c, x), g)| (c - x) * g).sum();
            let (v, _) = evaluate(&cand, false)?;
            if v >= value + 1e-4 * predicted {
                // a step that no longer increases the objective means round-off level
                moved = v > value;
                powers = cand;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            break;
        }
        (value, grad) = evaluate(&powers, true)?;
    }
    Ok((powers, bs.u))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Equivalence {
    pub equivalent: bool,
    pub max_deviation: f64,
}

/// Whether `H Q1 H^H = H Q2 H^H` across the sample support, measured as
/// `max_s ‖H_s (Q1 − Q2) H_s^H‖ / max(1, ‖H_s Q1 H_s^H‖)`.
pub fn solution_equivalence(
    set: &ChannelSampleSet,
    q1: &HermitianMatrix,
    q2: &HermitianMatrix,
    tol: f64,
) -> Result<Equivalence> {
    if q1.dim() != set.n || q2.dim() != set.n {
        return Err(Error::DimensionMismatch("covariances do not match sample width".into()));
    }
    let diff = q1.matrix() - q2.matrix();
    let max_deviation = set
        .samples
        .par_iter()
        .map(|h| {
            let num = hs_norm(&(h * &diff * h.adjoint()));
            let den = hs_norm(&(h * q1.matrix() * h.adjoint())).max(1.0);
            num / den
        })
        .reduce(|| 0.0, f64::max);
    Ok(Equivalence {
        equivalent: max_deviation <= tol,
        max_deviation,
    })
}

/// Gaps in `det(λA+(1−λ)B)^{1/M} ≥ λ det(A)^{1/M} + (1−λ) det(B)^{1/M} ≥ det(A)^{λ/M} det(B)^{(1−λ)/M}`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MinkowskiGaps {
    pub mixture: f64,
    pub arithmetic: f64,
    pub geometric: f64,
}

impl MinkowskiGaps {
    pub fn first_gap(&self) -> f64 {
        self.mixture - self.arithmetic
    }

    pub fn second_gap(&self) -> f64 {
        self.arithmetic - self.geometric
    }

    /// Both inequalities hold within relative `tol`.
    pub fn holds(&self, tol: f64) -> bool {
        let scale = self.mixture.abs().max(1.0);
        self.first_gap() >= -tol * scale && self.second_gap() >= -tol * scale
    }

    /// Both inequalities are tight within relative `tol`.
    pub fn is_equality(&self, tol: f64) -> bool {
        let scale = self.mixture.abs().max(1.0);
        self.first_gap().abs() <= tol * scale && self.second_gap().abs() <= tol * scale
    }
}

pub fn minkowski_chain(a: &HermitianMatrix, b: &HermitianMatrix, lambda: f64) -> Result<MinkowskiGaps> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch("Minkowski pair must share a dimension".into()));
    }
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("λ must lie in (0,1), got {lambda}")));
    }
    let m = a.dim() as f64;
    let ld_a = log_det_hpd(a)?;
    let ld_b = log_det_hpd(b)?;
    let mix = a.matrix() * real(lambda) + b.matrix() * real(1.0 - lambda);
    let ld_mix = log_det_hpd(&mix)?;
    Ok(MinkowskiGaps {
        mixture: (ld_mix / m).exp(),
        arithmetic: lambda * (ld_a / m).exp() + (1.0 - lambda) * (ld_b / m).exp(),
        geometric: ((lambda * ld_a + (1.0 - lambda) * ld_b) / m).exp(),
    })
}

/// Checks that a candidate covariance is PSD with trace within budget.
pub fn check_candidate(q: &HermitianMatrix, p: f64) -> Result<()> {
    let eig = herm_eig(q)?;
    let allowed = PSD_TOL * hs_norm(q.matrix());
    if let Some(&min) = eig.values.first() {
        if min < -allowed {
            return Err(Error::Indefinite {
                min_eigenvalue: min,
                allowed,
            });
        }
    }
    let tr = q.trace_re();
    if tr > p + TRACE_SLACK {
        return Err(Error::InvalidArgument(format!("trace {tr} exceeds power budget {p}")));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matcore::{random_complex, random_hermitian, random_psd, C64};
    use crate::rng::GaussianStream;

    fn single(h: ComplexMatrix) -> ChannelSampleSet {
        let (m, n) = h.shape();
        ChannelSampleSet::new(m, n, 0, vec![h]).unwrap()
    }

    fn random_set(m: usize, n: usize, count: usize, seed: u64) -> ChannelSampleSet {
        let mut g = GaussianStream::new(seed, 0);
        let samples = (0..count).map(|_| random_complex(&mut g, m, n)).collect();
        ChannelSampleSet::new(m, n, seed, samples).unwrap()
    }

    fn coord_resolution(sizes: &[usize]) -> ProjectionResolution {
        let n: usize = sizes.iter().sum();
        let mut start = 0;
        let projections = sizes
            .iter()
            .map(|&l| {
                let mut d = vec![0.0; n];
                d[start..start + l].iter_mut().for_each(|x| *x = 1.0);
                start += l;
                HermitianMatrix::from_real_diagonal(&d)
            })
            .collect();
        ProjectionResolution::from_projections(projections)
    }

    #[test]
    fn structure_from_coordinate_resolutions() {
        let bs = build_block_structure(&coord_resolution(&[3])).unwrap();
        assert_eq!(bs.u, identity(3));
        assert_eq!(bs.sizes, vec![3]);
        assert_eq!(bs.block_count(), 1);

        let bs = build_block_structure(&coord_resolution(&[1, 1])).unwrap();
        assert_eq!(bs.u, identity(2));
        assert_eq!(bs.sizes, vec![1, 1]);

        let eig = herm_eig(&HermitianMatrix::from_real_diagonal(&[1.0, 2.0, 2.0])).unwrap();
        let res = ProjectionResolution::from_projections(
            eig.spectral_projections().into_iter().map(|(_, p)| p).collect(),
        );
        let bs = build_block_structure(&res).unwrap();
        assert_eq!(bs.sizes, vec![1, 2]);
        assert!(bs.indicator_residual() < 1e-12);
    }

    #[test]
    fn structure_from_rotated_resolution() {
        let mut g = GaussianStream::new(1, 0);
        let v = crate::matcore::random_unitary(&mut g, 3);
        let p1 = HermitianMatrix::from_hermitian_part(v.columns(0, 1) * v.columns(0, 1).adjoint());
        let p2 = HermitianMatrix::from_hermitian_part(v.columns(1, 2) * v.columns(1, 2).adjoint());
        let bs = build_block_structure(&ProjectionResolution::from_projections(vec![p1, p2])).unwrap();
        assert!(unitarity_residual(&bs.u) < 1e-12);
        assert!(bs.indicator_residual() < 1e-12);
        assert_eq!(bs.sign_generators().len(), 1);
        let u1 = &bs.sign_generators()[0];
        assert!(unitarity_residual(u1) < 1e-12);
        assert!(hs_norm(&(u1 - u1.adjoint())) < 1e-12);
    }

    #[test]
    fn structure_rejects_incomplete_resolution() {
        let res = ProjectionResolution::from_projections(vec![HermitianMatrix::from_real_diagonal(&[1.0, 0.0])]);
        assert!(build_block_structure(&res).is_err());
    }

    #[test]
    fn assemble_q_cases() {
        let bs = build_block_structure(&coord_resolution(&[1, 2])).unwrap();
        let zero = BlockCovariance::new(bs.clone(), vec![HermitianMatrix::zeros(1), HermitianMatrix::zeros(2)]).unwrap();
        assert_eq!(*assemble_q(&zero), ComplexMatrix::zeros(3, 3));

        let mut g = GaussianStream::new(2, 0);
        let u = crate::matcore::random_unitary(&mut g, 3);
        let a = random_psd(&mut g, 3, 3);
        let rot = BlockStructure { u: u.clone(), ..BlockStructure::trivial(3) };
        let q = assemble_q(&BlockCovariance::new(rot, vec![a.clone()]).unwrap());
        assert!(hs_norm(&(q.matrix() - &u * a.matrix() * u.adjoint())) < 1e-12);

        let diag = build_block_structure(&coord_resolution(&[1, 1, 1])).unwrap();
        let bc = BlockCovariance::new(
            diag,
            [0.5, 0.25, 0.25].iter().map(|&x| HermitianMatrix::from_real_diagonal(&[x])).collect(),
        )
        .unwrap();
        assert_eq!(*assemble_q(&bc), *HermitianMatrix::from_real_diagonal(&[0.5, 0.25, 0.25]));
        assert!(BlockCovariance::new(bs, vec![HermitianMatrix::zeros(2)]).is_err());
    }

    #[test]
    fn capacity_fixed_cases() {
        let set = random_set(2, 2, 10, 3);
        let c = capacity_estimate(&set, &HermitianMatrix::zeros(2), 1.0).unwrap();
        assert_eq!((c.mean, c.stderr, c.count), (0.0, 0.0, 10));

        let c = capacity_estimate(&single(identity(2)), &HermitianMatrix::identity(2), 1.0).unwrap();
        assert!((c.mean - 2.0 * 2f64.ln()).abs() < 1e-14);
        assert_eq!(c.stderr, 0.0);

        let bad = HermitianMatrix::from_real_diagonal(&[-5.0, 0.0]);
        assert!(capacity_estimate(&single(identity(2)), &bad, 1.0).is_err());
        assert!(capacity_estimate(&set, &HermitianMatrix::identity(3), 1.0).is_err());
    }

    #[test]
    fn gradient_at_zero_is_gram() {
        let mut g = GaussianStream::new(4, 0);
        let h = random_complex(&mut g, 2, 3);
        let bs = build_block_structure(&coord_resolution(&[1, 2])).unwrap();
        let bc = BlockCovariance::new(bs.clone(), vec![HermitianMatrix::zeros(1), HermitianMatrix::zeros(2)]).unwrap();
        let grads = capacity_gradient(&single(h.clone()), &bc, 2.0).unwrap();
        for (k, gk) in grads.iter().enumerate() {
            let hk = &h * bs.block_columns(k);
            let want = hk.adjoint() * &hk / real(2.0);
            assert!(hs_norm(&(gk.matrix() - want)) < 1e-14);
        }
    }

    /// Separate implementation: LU inverse, no block machinery.
    fn full_matrix_gradient(set: &ChannelSampleSet, q: &ComplexMatrix, sigma2: f64) -> ComplexMatrix {
        let mut acc = ComplexMatrix::zeros(set.n, set.n);
        for h in &set.samples {
            let a = identity(set.m) + h * q * h.adjoint() / real(sigma2);
            let inv = a.try_inverse().unwrap();
            acc += h.adjoint() * inv * h;
        }
        acc / real(set.count() as f64 * sigma2)
    }

    #[test]
    fn gradient_matches_full_matrix_oracle() {
        let set = random_set(3, 2, 40, 5);
        let mut g = GaussianStream::new(5, 1);
        let q = random_psd(&mut g, 2, 2);
        let bc = BlockCovariance::new(BlockStructure::trivial(2), vec![q.clone()]).unwrap();
        let grad = capacity_gradient(&set, &bc, 0.7).unwrap();
        let want = full_matrix_gradient(&set, &q, 0.7);
        assert!(hs_norm(&(grad[0].matrix() - want)) < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let set = random_set(2, 3, 30, 6);
        let bs = build_block_structure(&coord_resolution(&[2, 1])).unwrap();
        let mut g = GaussianStream::new(6, 1);
        let bc = BlockCovariance::new(bs.clone(), vec![random_psd(&mut g, 2, 2), random_psd(&mut g, 1, 1)]).unwrap();
        let grads = capacity_gradient(&set, &bc, 1.0).unwrap();
        let dir = vec![random_hermitian(&mut g, 2), random_hermitian(&mut g, 1)];
        let h = 1e-5;
        let shifted = |t: f64| {
            let blocks: Vec<_> = bc
                .blocks
                .iter()
                .zip(&dir)
                .map(|(b, d)| HermitianMatrix::from_hermitian_part(b.matrix() + d.matrix() * real(t)))
                .collect();
            let q = assemble_q(&BlockCovariance::new(bs.clone(), blocks).unwrap());
            capacity_estimate(&set, &q, 1.0).unwrap().mean
        };
        let fd = (shifted(h) - shifted(-h)) / (2.0 * h);
        let analytic: f64 = grads
            .iter()
            .zip(&dir)
            .map(|(gk, d)| crate::matcore::hs_inner(gk, d).unwrap().re)
            .sum();
        assert!((fd - analytic).abs() <= 1e-5 * analytic.abs().max(1e-3), "fd {fd} vs {analytic}");
    }

    /// Enumerates every support set and keeps the nearest KKT-feasible point.
    fn capped_simplex_oracle(x: &[f64], budget: f64) -> Vec<f64> {
        let n = x.len();
        let mut best: Option<(f64, Vec<f64>)> = None;
        for mask in 0u32..(1 << n) {
            let support: Vec<usize> = (0..n).filter(|i| mask & (1 << i) != 0).collect();
            // inactive budget: y = x on support
            let mut candidates = vec![0.0];
            if !support.is_empty() {
                let s: f64 = support.iter().map(|&i| x[i]).sum();
                candidates.push((s - budget) / support.len() as f64);
            }
            for theta in candidates {
                let mut y = vec![0.0; n];
                for &i in &support {
                    y[i] = x[i] - theta;
                }
                let feasible = y.iter().all(|&v| v >= -1e-12) && y.iter().sum::<f64>() <= budget + 1e-12;
                if !feasible || theta < 0.0 {
                    continue;
                }
                let d: f64 = x.iter().zip(&y).map(|(a, b)| (a - b).powi(2)).sum();
                if best.as_ref().is_none_or(|(bd, _)| d < *bd - 1e-15) {
                    best = Some((d, y));
                }
            }
        }
        best.unwrap().1
    }

    #[test]
    fn capped_simplex_examples() {
        let y = project_capped_simplex(&[3.0, 1.0, 0.5], 2.0);
        assert_eq!(capped_simplex_oracle(&[3.0, 1.0, 0.5], 2.0), vec![2.0, 0.0, 0.0]);
        assert!(y.iter().zip([2.0, 0.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-15));
        assert_eq!(project_capped_simplex(&[-1.0, 1.0], 2.0), vec![0.0, 1.0]);
        assert_eq!(project_capped_simplex(&[0.3, 0.2], 1.0), vec![0.3, 0.2]);
    }

    #[test]
    fn capped_simplex_agrees_with_oracle() {
        let mut g = GaussianStream::new(7, 0);
        for _ in 0..500 {
            let n = 1 + (g.uniform() * 5.0) as usize;
            let x: Vec<f64> = (0..n).map(|_| 2.0 * g.normal()).collect();
            let budget = 0.1 + 3.0 * g.uniform();
            let got = project_capped_simplex(&x, budget);
            let want = capped_simplex_oracle(&x, budget);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{x:?} {budget}: {got:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn project_blocks_cases() {
        let feasible = vec![HermitianMatrix::from_real_diagonal(&[0.2]), HermitianMatrix::from_real_diagonal(&[0.3, 0.1])];
        assert_eq!(project_blocks(&feasible, 1.0).unwrap(), feasible);

        let ones: Vec<_> = [3.0, 1.0, 0.5].iter().map(|&x| HermitianMatrix::from_real_diagonal(&[x])).collect();
        let out = project_blocks(&ones, 2.0).unwrap();
        let vals: Vec<f64> = out.iter().map(|b| b[(0, 0)].re).collect();
        assert!(vals.iter().zip([2.0, 0.0, 0.0]).all(|(a, b)| (a - b).abs() < 1e-14));

        let out = project_blocks(&[HermitianMatrix::from_real_diagonal(&[-1.0, 1.0])], 2.0).unwrap();
        assert!(hs_norm(&(out[0].matrix() - HermitianMatrix::from_real_diagonal(&[0.0, 1.0]).matrix())) < 1e-14);
    }

    #[test]
    fn kkt_scalar_optimum() {
        let set = single(ComplexMatrix::from_element(1, 1, C64::new(0.8, -0.3)));
        let bc = BlockCovariance::new(BlockStructure::trivial(1), vec![HermitianMatrix::from_real_diagonal(&[2.0])]).unwrap();
        let report = kkt_verify(&set, &bc, 2.0, 1.0).unwrap();
        let g = capacity_gradient(&set, &bc, 1.0).unwrap()[0][(0, 0)].re;
        assert!((report.mu - g).abs() < 1e-15);
        assert!(report.complementarity[0] < 1e-15);
        assert_eq!(report.trace_gap, 0.0);
        assert!(report.is_optimal(1e-12));
        assert!(report.is_optimal(f64::INFINITY));
    }

    #[test]
    fn pinch_cases() {
        let bs = build_block_structure(&coord_resolution(&[1, 1])).unwrap();
        let ones = HermitianMatrix::new(ComplexMatrix::from_element(2, 2, real(1.0))).unwrap();
        assert_eq!(*pinch_covariance(&ones, &bs), identity(2));
        let d = HermitianMatrix::from_real_diagonal(&[0.3, 0.7]);
        assert_eq!(pinch_covariance(&d, &bs), d);
    }

    #[test]
    fn pinch_equals_sign_averaging_sequence() {
        let mut g = GaussianStream::new(8, 0);
        let v = crate::matcore::random_unitary(&mut g, 4);
        let sizes = [1usize, 2, 1];
        let mut start = 0;
        let projections: Vec<HermitianMatrix> = sizes
            .iter()
            .map(|&l| {
                let cols = v.columns(start, l);
                start += l;
                HermitianMatrix::from_hermitian_part(cols * cols.adjoint())
            })
            .collect();
        let bs = build_block_structure(&ProjectionResolution::from_projections(projections.clone())).unwrap();
        let q = random_psd(&mut g, 4, 4);

        let mut avg = q.matrix().clone();
        let mut partial = ComplexMatrix::zeros(4, 4);
        for p in &projections {
            partial += p.matrix();
            let uj = &partial * real(2.0) - identity(4);
            avg = (&avg + &uj * &avg * &uj) * real(0.5);
        }
        let pinched = pinch_covariance(&q, &bs);
        assert!(hs_norm(&(pinched.matrix() - avg)) < 1e-12);
        assert!((pinched.trace_re() - q.trace_re()).abs() < 1e-12);
    }

    #[test]
    fn scalar_solve_uses_full_power() {
        let set = random_set(1, 1, 50, 9);
        let sol = solve_full(&set, 1, 3.0, 1.0, &SolverOptions::default()).unwrap();
        assert!(sol.converged);
        assert!((sol.q()[(0, 0)].re - 3.0).abs() < 1e-12);
    }

    #[test]
    fn solver_reports_iteration_budget() {
        let set = random_set(2, 3, 50, 10);
        let opts = SolverOptions { max_iter: 1, tol_kkt: 1e-14, ..Default::default() };
        match solve_full(&set, 3, 1.0, 1.0, &opts) {
            Err(Error::MaxIterExceeded { iterations, best }) => {
                assert_eq!(iterations, 1);
                assert!(!best.converged);
                assert_eq!(best.objective_trace.len(), 2);
            }
            other => panic!("expected MaxIterExceeded, got {other:?}"),
        }
        assert!(solve_full(&set, 3, 0.0, 1.0, &SolverOptions::default()).is_err());
    }

    #[test]
    fn equivalence_cases() {
        let set = random_set(2, 2, 20, 11);
        let a = HermitianMatrix::identity(2);
        let same = solution_equivalence(&set, &a, &a, 1e-12).unwrap();
        assert!(same.equivalent);
        assert_eq!(same.max_deviation, 0.0);
        let b = HermitianMatrix::from_real_diagonal(&[2.0, 0.0]);
        let diff = solution_equivalence(&set, &a, &b, 1e-5).unwrap();
        assert!(!diff.equivalent);
        assert!(diff.max_deviation > 0.1);
    }

    #[test]
    fn minkowski_basic() {
        let a = HermitianMatrix::from_real_diagonal(&[1.0, 4.0]);
        let b = HermitianMatrix::from_real_diagonal(&[3.0, 1.0]);
        let gaps = minkowski_chain(&a, &b, 0.4).unwrap();
        assert!(gaps.holds(1e-12));
        assert!(!gaps.is_equality(1e-12));
        let eq = minkowski_chain(&a, &a, 0.3).unwrap();
        assert!(eq.is_equality(1e-12));
        // proportional pair: first inequality tight only
        let prop = minkowski_chain(&a, &a.scale(3.0), 0.5).unwrap();
        assert!(prop.first_gap().abs() < 1e-12);
        assert!(prop.second_gap() > 1e-3);
        assert!(minkowski_chain(&a, &b, 1.0).is_err());
    }

    #[test]
    fn candidate_checks() {
        assert!(check_candidate(&HermitianMatrix::identity(2), 2.0).is_ok());
        assert!(check_candidate(&HermitianMatrix::identity(2), 1.0).is_err());
        assert!(check_candidate(&HermitianMatrix::from_real_diagonal(&[1.0, -0.5]), 2.0).is_err());
    }
}
