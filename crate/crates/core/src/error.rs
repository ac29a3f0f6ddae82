use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("matrix of size {size} is not positive definite")]
    NotPositiveDefinite { size: usize },

    #[error("token id {id} out of range for alphabet of size {size}")]
    InvalidToken { id: usize, size: usize },

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(char),

    #[error("invalid sequence: {0}")]
    InvalidSequence(String),

    #[error("logits contain NaN")]
    NanLogits,

    #[error("fidelity {k} out of range 1..={max}")]
    FidelityOutOfRange { k: usize, max: usize },

    #[error("numerical failure at fidelity {fidelity}: {detail}")]
    Numerical { fidelity: usize, detail: String },

    /// Numerical failure not yet attributed to a fidelity.
    #[error("numerical failure: {0}")]
    Unstable(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("oracle query failed: {0}")]
    Oracle(String),

    #[error("config error at `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has version {found}, this build reads version {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("budget exhausted: {0}")]
    Budget(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }

    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical { .. } | Error::Unstable(_) | Error::NotPositiveDefinite { .. }
        )
    }

    /// Attributes an unattributed numerical failure to fidelity `k`.
    pub fn at_fidelity(self, k: usize) -> Self {
        match self {
            Error::Unstable(detail) => Error::Numerical { fidelity: k, detail },
            Error::NotPositiveDefinite { size } => Error::Numerical {
                fidelity: k,
                detail: format!("{size}x{size} matrix not positive definite"),
            },
            e => e,
        }
    }
}
