use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("map {index} is not surjective (rank {rank} < {target})")]
    NotSurjective { index: usize, rank: usize, target: usize },
    #[error("invalid exponent: {0}")]
    InvalidExponent(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("precondition violated: {0}")]
    Precondition(String),
    #[error("point outside domain: {0}")]
    OutsideDomain(String),
    #[error("iteration failed to converge: {0}")]
    NonConvergence(String),
    #[error("singular frame: {0}")]
    SingularFrame(String),
    #[error("oscillation not resolved: {0}")]
    UnresolvedOscillation(String),
    #[error("support violation: {0}")]
    SupportViolation(String),
    #[error("budget exceeded: {0}")]
    Budget(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
