//! Channel variance matrices and Gaussian channel sampling.
//!
//! A [`CovarianceSpec`] describes `Σ = E[vec_r(H) vec_r(H)^H]` either as a sum of
//! Kronecker products `Σ_i R_i ⊗ T_i` of PSD factors, or as a dense `MN×MN`
//! PSD matrix. Sampling follows the form: the Kronecker-sum path draws
//! `H = Σ_i R_i^{1/2} W_i (T_i^{1/2})^t` and the dense path draws
//! `vec_r(H) = Σ^{1/2} z`. Both target the same law; they are different random
//! variables for the same seed.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::matcore::{
    self, check_unitary, hs_norm, identity, kron, psd_sqrt, unvec_r, vec_r, ComplexMatrix,
    ComplexVector, HermitianMatrix, JsonMatrix,
};
use crate::rng::GaussianStream;
use crate::{Error, Result};

/// Default cap on the size of a symmetrization group.
pub const DEFAULT_CLOSURE_BOUND: usize = 64;
const CLOSURE_DEDUP_TOL: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct KronTerm {
    pub r: HermitianMatrix,
    pub t: HermitianMatrix,
}

#[derive(Clone, Debug)]
pub enum CovarianceForm {
    KronSum(Vec<KronTerm>),
    Dense(HermitianMatrix),
}

#[derive(Clone, Debug)]
pub struct CovarianceSpec {
    m: usize,
    n: usize,
    noise_power: f64,
    form: CovarianceForm,
}

impl CovarianceSpec {
    pub fn kron_sum(m: usize, n: usize, noise_power: f64, terms: Vec<KronTerm>) -> Result<Self> {
        Self::new(m, n, noise_power, CovarianceForm::KronSum(terms))
    }

    pub fn dense(m: usize, n: usize, noise_power: f64, sigma: HermitianMatrix) -> Result<Self> {
        Self::new(m, n, noise_power, CovarianceForm::Dense(sigma))
    }

    pub fn new(m: usize, n: usize, noise_power: f64, form: CovarianceForm) -> Result<Self> {
        if m == 0 || n == 0 {
            return Err(Error::InvalidArgument("M and N must be positive".into()));
        }
        if !(noise_power > 0.0 && noise_power.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise power must be positive, got {noise_power}"
            )));
        }
        match &form {
            CovarianceForm::KronSum(terms) => {
                if terms.is_empty() {
                    return Err(Error::InvalidArgument(
                        "Kronecker sum needs at least one term".into(),
                    ));
                }
                for (i, term) in terms.iter().enumerate() {
                    if term.r.dim() != m || term.t.dim() != n {
                        return Err(Error::DimensionMismatch(format!(
                            "term {i}: R is {0}x{0}, T is {1}x{1}, expected {m}x{m} and {n}x{n}",
                            term.r.dim(),
                            term.t.dim()
                        )));
                    }
                    term.r.check_psd()?;
                    term.t.check_psd()?;
                }
            }
            CovarianceForm::Dense(sigma) => {
                if sigma.dim() != m * n {
                    return Err(Error::DimensionMismatch(format!(
                        "dense variance is {0}x{0}, expected {1}x{1}",
                        sigma.dim(),
                        m * n
                    )));
                }
                sigma.check_psd()?;
            }
        }
        Ok(Self {
            m,
            n,
            noise_power,
            form,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn noise_power(&self) -> f64 {
        self.noise_power
    }

    pub fn form(&self) -> &CovarianceForm {
        &self.form
    }

    pub fn terms(&self) -> Option<&[KronTerm]> {
        match &self.form {
            CovarianceForm::KronSum(t) => Some(t),
            CovarianceForm::Dense(_) => None,
        }
    }
}

/// `Σ = Σ_i R_i ⊗ T_i`, or the dense matrix itself.
pub fn assemble(spec: &CovarianceSpec) -> Result<HermitianMatrix> {
    match &spec.form {
        CovarianceForm::KronSum(terms) => {
            let mn = spec.m * spec.n;
            let sum = terms
                .iter()
                .fold(ComplexMatrix::zeros(mn, mn), |acc, t| acc + kron(&t.r, &t.t));
            let sigma = HermitianMatrix::new(sum)?;
            sigma.check_psd()?;
            Ok(sigma)
        }
        CovarianceForm::Dense(sigma) => {
            sigma.check_psd()?;
            Ok(sigma.clone())
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SeparabilityStatus {
    CertifiedSeparable,
    Inconclusive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityVerdict {
    pub status: SeparabilityStatus,
    /// `‖Σ − 1_M ⊗ 1_N‖_HS` on the unnormalized input.
    pub hs_distance: f64,
}

/// Sufficient separability test: distance at most one from the identity, or an
/// explicit PSD Kronecker-sum decomposition in the input. Never reports
/// entanglement.
pub fn separability_certificate(sigma: &HermitianMatrix, spec: &CovarianceSpec) -> SeparabilityVerdict {
    let hs_distance = hs_norm(&(sigma.matrix() - identity(sigma.dim())));
    let explicit = matches!(spec.form, CovarianceForm::KronSum(_));
    let status = if hs_distance <= 1.0 || explicit {
        SeparabilityStatus::CertifiedSeparable
    } else {
        SeparabilityStatus::Inconclusive
    };
    SeparabilityVerdict {
        status,
        hs_distance,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelSampleSet {
    pub m: usize,
    pub n: usize,
    pub seed: u64,
    pub samples: Vec<ComplexMatrix>,
    /// Group the samples were closed under; empty if never symmetrized.
    pub symmetrized_by: Vec<ComplexMatrix>,
}

impl ChannelSampleSet {
    pub fn new(m: usize, n: usize, seed: u64, samples: Vec<ComplexMatrix>) -> Result<Self> {
        if let Some(bad) = samples.iter().find(|h| h.shape() != (m, n)) {
            return Err(Error::DimensionMismatch(format!(
                "sample is {:?}, expected {m}x{n}",
                bad.shape()
            )));
        }
        Ok(Self {
            m,
            n,
            seed,
            samples,
            symmetrized_by: Vec::new(),
        })
    }

    pub fn count(&self) -> usize {
        self.samples.len()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SampleSetJson {
    pub seed: u64,
    pub count: usize,
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub samples: Vec<JsonMatrix>,
    #[serde(default)]
    pub symmetrized_by: Vec<JsonMatrix>,
}

impl From<&ChannelSampleSet> for SampleSetJson {
    fn from(s: &ChannelSampleSet) -> Self {
        Self {
            seed: s.seed,
            count: s.count(),
            m: s.m,
            n: s.n,
            samples: s.samples.iter().map(JsonMatrix::from).collect(),
            symmetrized_by: s.symmetrized_by.iter().map(JsonMatrix::from).collect(),
        }
    }
}

impl TryFrom<&SampleSetJson> for ChannelSampleSet {
    type Error = Error;

    fn try_from(j: &SampleSetJson) -> Result<Self> {
        if j.count != j.samples.len() {
            return Err(Error::InvalidArgument(format!(
                "count {} does not match {} samples",
                j.count,
                j.samples.len()
            )));
        }
        let samples = j
            .samples
            .iter()
            .map(ComplexMatrix::try_from)
            .collect::<Result<Vec<_>>>()?;
        let mut set = ChannelSampleSet::new(j.m, j.n, j.seed, samples)?;
        set.symmetrized_by = j
            .symmetrized_by
            .iter()
            .map(ComplexMatrix::try_from)
            .collect::<Result<Vec<_>>>()?;
        Ok(set)
    }
}

/// Draws `count` channel matrices. Sample `s` uses RNG stream `s`, so the set is
/// reproducible bit for bit and independent of the worker count.
pub fn sample_channels(spec: &CovarianceSpec, count: usize, seed: u64) -> Result<ChannelSampleSet> {
    if count == 0 {
        return Err(Error::InvalidArgument("sample count must be at least 1".into()));
    }
    let (m, n) = (spec.m, spec.n);
    let samples: Vec<ComplexMatrix> = match &spec.form {
        CovarianceForm::KronSum(terms) => {
            let factors = terms
                .iter()
                .map(|t| Ok((psd_sqrt(&t.r)?.into_matrix(), psd_sqrt(&t.t)?.transpose().into_matrix())))
                .collect::<Result<Vec<_>>>()?;
            (0..count)
                .into_par_iter()
                .map(|s| {
                    let mut g = GaussianStream::new(seed, s as u64);
                    factors.iter().fold(ComplexMatrix::zeros(m, n), |acc, (r_half, t_half_t)| {
                        let w = ComplexMatrix::from_row_iterator(m, n, (0..m * n).map(|_| g.complex_normal()));
                        acc + r_half * w * t_half_t
                    })
                })
                .collect()
        }
        CovarianceForm::Dense(sigma) => {
            let root = psd_sqrt(sigma)?.into_matrix();
            (0..count)
                .into_par_iter()
                .map(|s| {
                    let mut g = GaussianStream::new(seed, s as u64);
                    let z = ComplexVector::from_iterator(m * n, (0..m * n).map(|_| g.complex_normal()));
                    unvec_r(&(&root * z), m, n)
                })
                .collect::<Result<Vec<_>>>()?
        }
    };
    ChannelSampleSet::new(m, n, seed, samples)
}

/// Multiplicative closure of `generators` (identity included), deduplicated at
/// HS distance `1e-9`.
pub fn group_closure(generators: &[ComplexMatrix], n: usize, bound: usize) -> Result<Vec<ComplexMatrix>> {
    let mut group = vec![identity(n)];
    let mut frontier = 0;
    while frontier < group.len() {
        let current = group[frontier].clone();
        frontier += 1;
        for g in generators {
            let candidate = &current * g;
            if !group.iter().any(|x| hs_norm(&(x - &candidate)) <= CLOSURE_DEDUP_TOL) {
                if group.len() == bound {
                    return Err(Error::ClosureTooLarge { bound });
                }
                group.push(candidate);
            }
        }
    }
    Ok(group)
}

pub fn symmetrize_samples(set: &ChannelSampleSet, unitaries: &[ComplexMatrix]) -> Result<ChannelSampleSet> {
    symmetrize_samples_bounded(set, unitaries, DEFAULT_CLOSURE_BOUND)
}

/// Replaces each sample `H` by the images `H·D` for every `D` in the closure of
/// `unitaries`, in closure order with the identity first.
pub fn symmetrize_samples_bounded(
    set: &ChannelSampleSet,
    unitaries: &[ComplexMatrix],
    bound: usize,
) -> Result<ChannelSampleSet> {
    for u in unitaries {
        if u.shape() != (set.n, set.n) {
            return Err(Error::DimensionMismatch(format!(
                "symmetry is {:?}, expected {}x{}",
                u.shape(),
                set.n,
                set.n
            )));
        }
        check_unitary(u)?;
    }
    let group = group_closure(unitaries, set.n, bound)?;
    let samples = set
        .samples
        .iter()
        .flat_map(|h| group.iter().map(move |d| h * d))
        .collect();
    Ok(ChannelSampleSet {
        m: set.m,
        n: set.n,
        seed: set.seed,
        samples,
        symmetrized_by: group,
    })
}

/// `(1/S) Σ_s vec_r(H_s) vec_r(H_s)^H`.
pub fn empirical_covariance(set: &ChannelSampleSet) -> Result<HermitianMatrix> {
    if set.samples.is_empty() {
        return Err(Error::InvalidArgument("empty sample set".into()));
    }
    let mn = set.m * set.n;
    let outer: Vec<ComplexMatrix> = set
        .samples
        .par_iter()
        .map(|h| {
            let v = vec_r(h);
            &v * v.adjoint()
        })
        .collect();
    let sum = matcore::pairwise_sum(outer).unwrap_or_else(|| ComplexMatrix::zeros(mn, mn));
    Ok(HermitianMatrix::from_hermitian_part(sum / matcore::real(set.count() as f64)))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KronTermJson {
    #[serde(rename = "R")]
    pub r: JsonMatrix,
    #[serde(rename = "T")]
    pub t: JsonMatrix,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CovarianceSpecJson {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub noise_power: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kron_sum: Option<Vec<KronTermJson>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dense: Option<JsonMatrix>,
}

impl TryFrom<&CovarianceSpecJson> for CovarianceSpec {
    type Error = Error;

    fn try_from(j: &CovarianceSpecJson) -> Result<Self> {
        let form = match (&j.kron_sum, &j.dense) {
            (Some(terms), None) => CovarianceForm::KronSum(
                terms
                    .iter()
                    .map(|t| {
                        Ok(KronTerm {
                            r: HermitianMatrix::try_from(&t.r)?,
                            t: HermitianMatrix::try_from(&t.t)?,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            ),
            (None, Some(d)) => CovarianceForm::Dense(HermitianMatrix::try_from(d)?),
            _ => {
                return Err(Error::InvalidArgument(
                    "spec needs exactly one of \"kron_sum\" or \"dense\"".into(),
                ))
            }
        };
        CovarianceSpec::new(j.m, j.n, j.noise_power, form)
    }
}

impl From<&CovarianceSpec> for CovarianceSpecJson {
    fn from(s: &CovarianceSpec) -> Self {
        let (kron_sum, dense) = match &s.form {
            CovarianceForm::KronSum(terms) => (
                Some(
                    terms
                        .iter()
                        .map(|t| KronTermJson {
                            r: JsonMatrix::from(&t.r),
                            t: JsonMatrix::from(&t.t),
                        })
                        .collect(),
                ),
                None,
            ),
            CovarianceForm::Dense(d) => (None, Some(JsonMatrix::from(d))),
        };
        Self {
            m: s.m,
            n: s.n,
            noise_power: s.noise_power,
            kron_sum,
            dense,
        }
    }
}
