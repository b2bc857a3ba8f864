//! Batch front end: `covcap analyze|solve|verify|sample --config <file>`.
//!
//! A run is described by one JSON [`RunConfig`]; every command returns a
//! [`RunReport`] that echoes the config and tool version. All randomness
//! derives from the config seed, so reports reproduce bit for bit apart from
//! `wall_time_s`.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::blockopt::{
    build_block_structure, capacity_estimate, check_candidate, kkt_verify, solution_equivalence, solve_blocks,
    BlockCovariance, BlockStructure, CapacityEstimate, Equivalence, KktReport, Solution, SolverOptions,
};
use crate::commutant::{
    commutant_basis, minimal_resolution, rank_profile, transpose_resolution, verify_star_algebra, AlgebraBasis,
    ProjectionResolution, StarResiduals,
};
use crate::covariance::{
    assemble, sample_channels, separability_certificate, symmetrize_samples, ChannelSampleSet, CovarianceSpec,
    CovarianceSpecJson, SampleSetJson, SeparabilityVerdict,
};
use crate::matcore::{HermitianMatrix, JsonMatrix};
use crate::{Error, Result};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID_INPUT: i32 = 2;
pub const EXIT_NON_CONVERGENCE: i32 = 3;

/// Default KKT tolerance for `verify`.
pub const DEFAULT_VERIFY_TOL: f64 = 1e-6;
/// HS tolerance for the `--compare` equivalence check.
pub const EQUIVALENCE_TOL: f64 = 1e-5;
const MIN_SOLVE_SAMPLES: usize = 100;

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct RunConfigJson {
    spec: CovarianceSpecJson,
    power: f64,
    samples: usize,
    seed: u64,
    #[serde(default = "default_true")]
    symmetrize: bool,
    #[serde(default)]
    solver: SolverOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    output_path: Option<PathBuf>,
}

/// Validated run configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RunConfigJson", into = "RunConfigJson")]
pub struct RunConfig {
    pub spec: CovarianceSpec,
    pub power: f64,
    pub samples: usize,
    pub seed: u64,
    pub symmetrize: bool,
    pub solver: SolverOptions,
    pub output_path: Option<PathBuf>,
}

impl TryFrom<RunConfigJson> for RunConfig {
    type Error = Error;

    fn try_from(j: RunConfigJson) -> Result<Self> {
        if !(j.power > 0.0 && j.power.is_finite()) {
            return Err(Error::InvalidArgument(format!("power must be positive, got {}", j.power)));
        }
        let s = &j.solver;
        if s.max_iter == 0
            || s.tol_kkt.is_nan()
            || s.tol_kkt <= 0.0
            || s.initial_step.is_nan()
            || s.initial_step <= 0.0
            || !(0.0..1.0).contains(&s.backtrack_factor)
            || s.backtrack_factor == 0.0
            || !(0.0..1.0).contains(&s.sufficient_increase)
            || s.sufficient_increase == 0.0
        {
            return Err(Error::InvalidArgument(format!("invalid solver options {s:?}")));
        }
        Ok(Self {
            spec: CovarianceSpec::try_from(&j.spec)?,
            power: j.power,
            samples: j.samples,
            seed: j.seed,
            symmetrize: j.symmetrize,
            solver: j.solver,
            output_path: j.output_path,
        })
    }
}

impl From<RunConfig> for RunConfigJson {
    fn from(c: RunConfig) -> Self {
        Self {
            spec: CovarianceSpecJson::from(&c.spec),
            power: c.power,
            samples: c.samples,
            seed: c.seed,
            symmetrize: c.symmetrize,
            solver: c.solver,
            output_path: c.output_path,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalyzeReport {
    pub commutant_dim: usize,
    pub singular_values: Vec<f64>,
    pub rank_profile: Vec<usize>,
    pub projections: Vec<JsonMatrix>,
    pub star_residuals: StarResiduals,
    pub separability: SeparabilityVerdict,
    /// Block sizes of the transmit structure, in block order.
    pub block_sizes: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    pub sizes: Vec<usize>,
    #[serde(rename = "U")]
    pub u: JsonMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub structure: StructureReport,
    pub blocks: Vec<JsonMatrix>,
    #[serde(rename = "Q")]
    pub q: JsonMatrix,
    pub capacity: CapacityEstimate,
    pub kkt: KktReport,
    pub iterations: usize,
    pub converged: bool,
    pub projected_gradient_norm: f64,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub kkt: KktReport,
    pub tol: f64,
    pub optimal: bool,
    pub capacity: CapacityEstimate,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub equivalence: Option<Equivalence>,
    pub sample_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub path: PathBuf,
    pub count: usize,
    pub symmetrized: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunReport {
    pub command: String,
    pub version: String,
    pub wall_time_s: f64,
    pub config: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analyze: Option<AnalyzeReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solve: Option<SolveReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verify: Option<VerifyReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample: Option<SampleReport>,
}

impl RunReport {
    fn new(command: &str, config: &RunConfig, started: Instant) -> Self {
        Self {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            wall_time_s: started.elapsed().as_secs_f64(),
            config: config.clone(),
            analyze: None,
            solve: None,
            verify: None,
            sample: None,
        }
    }

    /// Exit code implied by the payload.
    pub fn exit_code(&self) -> i32 {
        match &self.solve {
            Some(s) if !s.converged => EXIT_NON_CONVERGENCE,
            _ => EXIT_OK,
        }
    }
}

/// Everything derived from the covariance before sampling.
struct Algebra {
    sigma: HermitianMatrix,
    basis: AlgebraBasis,
    resolution: ProjectionResolution,
    structure: BlockStructure,
}

fn analyze_algebra(config: &RunConfig) -> Result<Algebra> {
    let spec = &config.spec;
    let sigma = assemble(spec)?;
    let basis = commutant_basis(&sigma, spec.m(), spec.n())?;
    let resolution = minimal_resolution(&basis, config.seed)?;
    let structure = build_block_structure(&transpose_resolution(&resolution))?;
    Ok(Algebra {
        sigma,
        basis,
        resolution,
        structure,
    })
}

fn sample_set(config: &RunConfig, structure: &BlockStructure) -> Result<ChannelSampleSet> {
    let spec = &config.spec;
    if config.samples == 0 {
        return ChannelSampleSet::new(spec.m(), spec.n(), config.seed, Vec::new());
    }
    let set = sample_channels(spec, config.samples, config.seed)?;
    if config.symmetrize {
        symmetrize_samples(&set, &structure.sign_generators())
    } else {
        Ok(set)
    }
}

fn solve_report(sol: &Solution, set: &ChannelSampleSet) -> SolveReport {
    SolveReport {
        structure: StructureReport {
            sizes: sol.covariance.structure.sizes.clone(),
            u: JsonMatrix::from(&sol.covariance.structure.u),
        },
        blocks: sol.covariance.blocks.iter().map(JsonMatrix::from).collect(),
        q: JsonMatrix::from(&sol.q()),
        capacity: sol.capacity,
        kkt: sol.kkt.clone(),
        iterations: sol.iterations,
        converged: sol.converged,
        projected_gradient_norm: sol.projected_gradient_norm,
        sample_count: set.count(),
    }
}

fn run_solver(config: &RunConfig, set: &ChannelSampleSet, structure: &BlockStructure) -> Result<Solution> {
    if set.count() == 0 {
        return Err(Error::InvalidArgument("solve needs at least one sample".into()));
    }
    let noise = config.spec.noise_power();
    match solve_blocks(set, structure, config.power, noise, &config.solver) {
        Ok(sol) => Ok(sol),
        Err(Error::MaxIterExceeded { best, .. }) => Ok(*best),
        Err(e) => Err(e),
    }
}

pub fn cmd_analyze(config: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    let alg = analyze_algebra(config)?;
    let payload = AnalyzeReport {
        commutant_dim: alg.basis.dim(),
        singular_values: alg.basis.singular_values.clone(),
        rank_profile: rank_profile(&alg.resolution),
        projections: alg.resolution.projections.iter().map(JsonMatrix::from).collect(),
        star_residuals: verify_star_algebra(&alg.basis),
        separability: separability_certificate(&alg.sigma, &config.spec),
        block_sizes: alg.structure.sizes.clone(),
    };
    let mut report = RunReport::new("analyze", config, started);
    report.analyze = Some(payload);
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Non-convergence is reported in the payload (`converged: false`, best
/// iterate) rather than as an error; see [`RunReport::exit_code`].
pub fn cmd_solve(config: &RunConfig) -> Result<RunReport> {
    let started = Instant::now();
    if config.samples < MIN_SOLVE_SAMPLES {
        eprintln!(
            "warning: {} samples is below the recommended minimum of {MIN_SOLVE_SAMPLES}",
            config.samples
        );
    }
    let alg = analyze_algebra(config)?;
    let set = sample_set(config, &alg.structure)?;
    let sol = run_solver(config, &set, &alg.structure)?;
    let mut report = RunReport::new("solve", config, started);
    report.solve = Some(solve_report(&sol, &set));
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Reads a candidate covariance: either a bare matrix or a solve report, in
/// which case its `Q` is used.
pub fn load_candidate(path: &Path) -> Result<HermitianMatrix> {
    let value: serde_json::Value = serde_json::from_str(&fs::read_to_string(path)?)?;
    let matrix = match value.get("solve").and_then(|s| s.get("Q")) {
        Some(q) => q.clone(),
        None => value,
    };
    let json: JsonMatrix = serde_json::from_value(matrix)?;
    HermitianMatrix::try_from(&json)
}

/// Checks `candidate` against the Lagrange conditions of the full problem on
/// the same sample set `solve` would use. With `compare`, also solves afresh
/// and reports [`solution_equivalence`].
pub fn cmd_verify(config: &RunConfig, candidate: &HermitianMatrix, tol: f64, compare: bool) -> Result<RunReport> {
    let started = Instant::now();
    let n = config.spec.n();
    if candidate.dim() != n {
        return Err(Error::DimensionMismatch(format!(
            "candidate is {0}x{0}, expected {n}x{n}",
            candidate.dim()
        )));
    }
    check_candidate(candidate, config.power)?;
    let alg = analyze_algebra(config)?;
    let set = sample_set(config, &alg.structure)?;
    if set.count() == 0 {
        return Err(Error::InvalidArgument("verify needs at least one sample".into()));
    }
    let noise = config.spec.noise_power();
    let full = BlockCovariance::new(BlockStructure::trivial(n), vec![candidate.clone()])?;
    let kkt = kkt_verify(&set, &full, config.power, noise)?;
    let equivalence = if compare {
        let fresh = run_solver(config, &set, &alg.structure)?;
        Some(solution_equivalence(&set, candidate, &fresh.q(), EQUIVALENCE_TOL)?)
    } else {
        None
    };
    let payload = VerifyReport {
        optimal: kkt.is_optimal(tol),
        kkt,
        tol,
        capacity: capacity_estimate(&set, candidate, noise)?,
        equivalence,
        sample_count: set.count(),
    };
    let mut report = RunReport::new("verify", config, started);
    report.verify = Some(payload);
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

/// Writes the sample set `solve` would use (symmetrized if configured) to
/// `path`. A zero count writes an empty set.
pub fn cmd_sample(config: &RunConfig, path: &Path) -> Result<RunReport> {
    let started = Instant::now();
    let set = if config.samples == 0 || !config.symmetrize {
        sample_set(config, &BlockStructure::trivial(config.spec.n()))?
    } else {
        sample_set(config, &analyze_algebra(config)?.structure)?
    };
    write_json(path, &SampleSetJson::from(&set))?;
    let mut report = RunReport::new("sample", config, started);
    report.sample = Some(SampleReport {
        path: path.to_path_buf(),
        count: set.count(),
        symmetrized: !set.symmetrized_by.is_empty(),
    });
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

pub fn load_sample_set(path: &Path) -> Result<ChannelSampleSet> {
    let json: SampleSetJson = serde_json::from_str(&fs::read_to_string(path)?)?;
    ChannelSampleSet::try_from(&json)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "covcap", version, about = "Block-structured input covariance for correlated MIMO channels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Commutant, minimal resolution and separability of the covariance.
    Analyze(CommonArgs),
    /// Optimal block covariance on a fixed sample set.
    Solve(CommonArgs),
    /// KKT check of a candidate covariance.
    Verify(VerifyArgs),
    /// Emit the channel sample set.
    Sample(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Output file; defaults to the config's `output_path`, then stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Bare matrix JSON or a solve report.
    #[arg(long)]
    pub candidate: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VERIFY_TOL)]
    pub tol: f64,
    /// Also solve afresh and test equivalence with the candidate.
    #[arg(long)]
    pub compare: bool,
}

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::MaxIterExceeded { .. } | Error::NonConvergence(_) | Error::GenericityFailure { .. } => {
            EXIT_NON_CONVERGENCE
        }
        _ => EXIT_INVALID_INPUT,
    }
}

fn execute(cli: &Cli) -> Result<i32> {
    let common = match &cli.command {
        Command::Analyze(c) | Command::Solve(c) | Command::Sample(c) => c,
        Command::Verify(v) => &v.common,
    };
    let config = RunConfig::load(&common.config)?;
    let out = common.out.clone().or_else(|| config.output_path.clone());
    let report = match &cli.command {
        Command::Analyze(_) => cmd_analyze(&config)?,
        Command::Solve(_) => cmd_solve(&config)?,
        Command::Verify(v) => {
            if v.tol.is_nan() || v.tol < 0.0 {
                return Err(Error::InvalidArgument(format!("tolerance must be non-negative, got {}", v.tol)));
            }
            cmd_verify(&config, &load_candidate(&v.candidate)?, v.tol, v.compare)?
        }
        Command::Sample(_) => {
            let path = out
                .as_deref()
                .ok_or_else(|| Error::InvalidArgument("sample needs --out or output_path".into()))?;
            let report = cmd_sample(&config, path)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            return Ok(report.exit_code());
        }
    };
    match &out {
        Some(path) => write_json(path, &report)?,
        None => println!("{}", serde_json::to_string_pretty(&report)?),
    }
    if let Some(s) = &report.solve {
        if !s.converged {
            eprintln!(
                "error: solver did not converge in {} iterations (KKT violation {:.3e})",
                s.iterations,
                s.kkt.max_violation()
            );
        }
    }
    Ok(report.exit_code())
}

fn configure_threads() -> Result<()> {
    let Ok(value) = std::env::var("COVCAP_THREADS") else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidArgument(format!("COVCAP_THREADS must be a positive integer, got {value:?}")))?;
    if threads == 0 {
        return Err(Error::InvalidArgument("COVCAP_THREADS must be positive".into()));
    }
    // A pool that already exists (e.g. built by an earlier call) is kept.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID_INPUT } else { EXIT_OK };
        }
    };
    match configure_threads().and_then(|()| execute(&cli)) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
