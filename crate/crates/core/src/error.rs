use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("activation kind `{0}` has no concrete nonlinearity and cannot be evaluated")]
    UnsupportedActivation(&'static str),

    #[error("invalid network: {0}")]
    InvalidNetwork(String),

    #[error("shape mismatch in layer {layer}: {detail}")]
    ShapeMismatch { layer: usize, detail: String },

    #[error("non-finite entry in {location}")]
    NonFinite { location: String },

    #[error("failed to parse network file: {0}")]
    Parse(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("power iteration did not converge after {iters} iterations (best estimate {estimate})")]
    PowerIteration { iters: usize, estimate: f64 },

    #[error("multiplier {index} is negative ({value})")]
    NegativeMultiplier { index: usize, value: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("clique [{start}, {end}) does not fit in a {n}x{n} matrix")]
    CliqueRange { start: usize, end: usize, n: usize },

    #[error("graph has {n} vertices, above the enumeration guard of {limit}")]
    SizeGuard { n: usize, limit: usize },

    #[error("symmetric eigendecomposition failed on a {n}x{n} block (max |entry| {max_abs:e})")]
    Eigen { n: usize, max_abs: f64 },

    #[error("reduced linear system is not positive definite")]
    LinearSolve,

    #[error("ADMM did not converge within {iters} iterations")]
    NoConvergence { iters: usize },
}
