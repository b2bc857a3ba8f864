use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("matrix is not Hermitian (residual {residual:.3e})")]
    NotHermitian { residual: f64 },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("matrix is indefinite (min eigenvalue {min_eigenvalue:.3e}, allowed {allowed:.3e})")]
    Indefinite { min_eigenvalue: f64, allowed: f64 },

    #[error("matrix is not unitary (residual {residual:.3e})")]
    NotUnitary { residual: f64 },

    #[error("{0} did not converge")]
    NonConvergence(&'static str),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("group closure exceeded {bound} elements")]
    ClosureTooLarge { bound: usize },

    #[error("no minimal resolution found after {attempts} attempts")]
    GenericityFailure { attempts: usize },

    #[error("decomposition reassembly residual {residual:.3e} exceeds tolerance")]
    ReassemblyResidual { residual: f64 },

    #[error("solver stopped after {iterations} iterations without meeting tolerance")]
    MaxIterExceeded {
        iterations: usize,
        best: Box<crate::blockopt::Solution>,
    },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}
