//! Symmetry structure of correlated MIMO channels and block-diagonal
//! ergodic capacity optimization.
//!
//! The pipeline runs bottom-up through the modules:
//!
//! - [`matcore`]: dense complex matrix primitives (Kronecker products,
//!   Hilbert-Schmidt geometry, Hermitian eigensystems, row-major vectorization).
//! - [`covariance`]: channel variance assembly, the Hilbert-Schmidt
//!   separability certificate, and Gaussian channel sampling.
//! - [`commutant`]: the right commutant of a variance matrix as a *-algebra and
//!   its minimal resolutions of identity.
//! - [`blockopt`]: block structure of optimal input covariances, sample-average
//!   capacity and gradient, projected gradient solver and KKT certification.
//! - [`cli`]: config-driven batch commands behind the `covcap` binary.

pub mod blockopt;
pub mod cli;
pub mod commutant;
pub mod covariance;
mod error;
pub mod matcore;
pub mod rng;

pub use error::{Error, Result};
