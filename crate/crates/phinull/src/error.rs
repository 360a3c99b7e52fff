use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("mesh tag mismatch: expected {expected}, got {got}")]
    TagMismatch { expected: String, got: String },
    #[error("domain error: {0}")]
    Domain(String),
    #[error("scale limit exceeded: {param} gives exponent {exponent:.1} (limit {limit:.1})")]
    ScaleLimit {
        param: String,
        exponent: f64,
        limit: f64,
    },
    #[error("infeasible region: {0}")]
    Infeasible(String),
    #[error("linear solve failed: {0}")]
    Solve(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(String),
    #[error("tree bookkeeping: {0}")]
    Tree(String),
    #[error("fixed-point divergence: {0}")]
    Divergence(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("resource cap exceeded: {0}")]
    ResourceCap(String),
    #[error("io error: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}
