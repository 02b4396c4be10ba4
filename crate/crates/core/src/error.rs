use thiserror::Error;

/// Errors produced by the library.
///
/// The variants mirror the process exit codes used by the CLI:
/// `InvalidInput`/`Config`/`Io` map to exit code 1, `Numerical` to 2,
/// and `Degenerate`/`Infeasible` to 3.
#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument violates a precondition.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// A run configuration is inconsistent or produces no usable data.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numerical operation failed beyond recoverable tolerances.
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// The barrier constraint is active but the input direction vanishes.
    #[error("degenerate barrier constraint: {0}")]
    Degenerate(String),

    /// The input set intersected with the barrier half-space is empty.
    #[error("infeasible safety program: {0}")]
    Infeasible(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn input(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
