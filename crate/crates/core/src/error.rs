use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("legendre solve did not converge for xi={xi} at (x={x}, t={t}) after {iterations} iterations (residual {residual:e})")]
    LegendreNonConvergence {
        x: f64,
        t: f64,
        xi: f64,
        iterations: usize,
        residual: f64,
    },

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("initial data has nonzero mean {mean:e} (tolerance {tolerance:e})")]
    NonZeroMean { mean: f64, tolerance: f64 },

    #[error("initial data exceeds the bound r={bound}: |u0| reached {observed}")]
    InitialDataTooLarge { bound: f64, observed: f64 },

    #[error("parity mismatch: expected {expected}, found {found}")]
    ParityMismatch {
        expected: &'static str,
        found: &'static str,
    },

    #[error("CFL violated at step {step}, column {column}: |lambda*H_p| = {value}")]
    Cfl { step: usize, column: i64, value: f64 },

    #[error("time {t} outside the stored history [{start}, {end}]")]
    OutsideHistory { t: f64, start: f64, end: f64 },

    #[error("walk cone depth {depth} exceeds the supported maximum {max}")]
    DepthTooLarge { depth: usize, max: usize },

    #[error("velocity field does not cover the cone: {0}")]
    MissingLevels(String),

    #[error("periodic iteration did not reach tolerance {tolerance:e} within {periods} periods (last residual {residual:e})")]
    PeriodicNonConvergence {
        periods: usize,
        residual: f64,
        tolerance: f64,
    },

    #[error("effective Hamiltonian methods disagree: |A-B| = {gap:e} exceeds {limit:e}")]
    MethodDisagreement { gap: f64, limit: f64 },

    #[error("periodic v discrepancy is not spatially constant: spread {spread:e} exceeds {tolerance:e}")]
    NonConstantDiscrepancy { spread: f64, tolerance: f64 },

    #[error("model '{0}' depends on x or t; this operation requires an x,t-independent flux")]
    NotSpaceTimeIndependent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("stability check failed at step {step}: {message}")]
    StabilityViolation { step: usize, message: String },

    #[error("corrupt field dump: {0}")]
    CorruptDump(String),

    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
