use thiserror::Error;

/// Errors raised by the library.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("parameter out of domain: {0}")]
    ParameterDomain(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid landmark configuration: {0}")]
    InvalidConfig(String),
    #[error("factorization failed: {0}")]
    Factorization(String),
    #[error("geodesic breakdown at t = {time} (non-finite state, or landmarks {i} and {j} met)")]
    GeodesicBreakdown { time: f64, i: usize, j: usize },
    #[error("state became non-finite at t = {time}")]
    Diverged { time: f64 },
    #[error("time grid too coarse: stiffness {stiffness} exceeds {limit}")]
    Unresolved { stiffness: f64, limit: f64 },
    #[error("point {index} at {position:?} lies outside the noise domain")]
    DomainCoverage { index: usize, position: Vec<f64> },
    #[error("unsupported operation: {0}")]
    Unsupported(String),
    #[error("kernel is not smooth enough: {0}")]
    InsufficientSmoothness(String),
    #[error("invalid time: {0}")]
    InvalidTime(String),
    #[error("newick parse error at byte {offset}: {message}")]
    Newick { offset: usize, message: String },
    #[error("invalid tree: {0}")]
    InvalidTree(String),
    #[error("singular message fusion at node {0}")]
    SingularFusion(usize),
    #[error("format error: {0}")]
    Format(String),
    #[error("i/o error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
