use thiserror::Error;

/// Crate-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    /// Tensor/operand dimensions do not line up.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A value or argument is outside its valid range.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Malformed file contents (PGM, IDX, manifest, checkpoint, config).
    #[error("format error: {0}")]
    Format(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A NaN/Inf showed up where only finite values are allowed.
    #[error("non-finite value: {0}")]
    NonFinite(String),

    /// Training aborted on a NaN loss; the last good state is preserved.
    #[error("numerical abort at step {step}: {reason}")]
    NumericAbort { step: u64, reason: String },
}

impl Error {
    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) => 1,
            Error::Shape(_) | Error::Format(_) | Error::Io(_) => 2,
            Error::NonFinite(_) | Error::NumericAbort { .. } => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
