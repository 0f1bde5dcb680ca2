//! Error type shared by every module of the crate.

use thiserror::Error;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not square: {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },

    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },

    #[error("matrix contains non-finite entries")]
    NonFinite,

    #[error("operator is not Hermitian: max |M - M^H| = {deviation:.3e} exceeds {tolerance:.3e}")]
    NotHermitian { deviation: f64, tolerance: f64 },

    #[error("trace deviates from one by {deviation:.3e} (tolerance {tolerance:.3e})")]
    TraceNotOne { deviation: f64, tolerance: f64 },

    #[error("state is not positive semidefinite: min eigenvalue {min_eigenvalue:.3e} below -{tolerance:.3e}")]
    NotPositive { min_eigenvalue: f64, tolerance: f64 },

    #[error("eigensolver did not converge for a {dim}x{dim} matrix (max |entry| = {scale:.3e})")]
    EigenFailure { dim: usize, scale: f64 },

    #[error("spectral decomposition violates {property}: residual {residual:.3e}")]
    SpectralInvariant { property: &'static str, residual: f64 },

    #[error("no shared eigenbasis: operator {index} has off-diagonal residual {residual:.3e}")]
    SharedBasisFailure { index: usize, residual: f64 },

    #[error("nested-commutator series did not converge within {max_terms} terms")]
    SeriesDivergence { max_terms: usize },

    #[error("noise kernel is not defined at t = {t}")]
    KernelDomain { t: f64 },

    #[error("invalid noise kernel: {reason}")]
    InvalidKernel { reason: String },

    #[error("invalid time grid: {reason}")]
    InvalidGrid { reason: String },

    #[error("correlation matrix is invalid: {reason}")]
    InvalidCorrelation { reason: String },

    #[error("negative decay parameter: {name} = {value}")]
    NegativeParameter { name: &'static str, value: f64 },

    #[error("invalid parameter: {reason}")]
    InvalidParameter { reason: String },

    #[error("analytic Markov propagator requires constant kernels (channel {channel} is time-dependent)")]
    NonConstantKernel { channel: usize },

    #[error("state invariant violated at step {step} (t = {t:.6e}): {source}")]
    StepInvariant {
        step: usize,
        t: f64,
        #[source]
        source: Box<Error>,
    },

    #[error("trajectory {trajectory} aborted at step {step}: {reason}")]
    TrajectoryAborted {
        trajectory: u64,
        step: usize,
        reason: String,
    },

    #[error("Fock truncation is inadequate: retained weight {retained:.12} < {required:.12}")]
    TruncationInadequate { retained: f64, required: f64 },

    #[error("index {index} out of range (max {max})")]
    IndexOutOfRange { index: usize, max: usize },

    #[error("fit requires at least {required} points, got {got}")]
    NotEnoughPoints { required: usize, got: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Process exit code classification used by the CLI: config/usage errors,
    /// numerical failures, and I/O errors are distinguished.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Io { .. } => 4,
            _ => 3,
        }
    }
}
