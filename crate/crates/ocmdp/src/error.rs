use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Dimension or length disagreement between two values that must match.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// The observe/act alternation of the environment protocol was violated.
    #[error("protocol violation: {0}")]
    Protocol(String),

    /// A value broke an operation's contract (negative cost, bad index, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    /// A model failed validation (rows not stochastic, gamma out of range, ...).
    #[error("invalid model: {0}")]
    Model(String),

    /// Configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),

    /// Non-finite or overflowing arithmetic.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A problem instance exceeds the enumerable-size guard.
    #[error("size guard exceeded: {0}")]
    Guard(String),

    /// An iterative solver ran out of iterations.
    #[error("no convergence after {iters} iterations (last residual {residual:e})")]
    NoConvergence { iters: usize, residual: f64 },

    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
