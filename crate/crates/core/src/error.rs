use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a shape or range precondition.
    #[error("contract violation: {0}")]
    ContractViolation(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    /// Stored or deserialized data does not satisfy its invariants.
    #[error("corrupt data: {0}")]
    DataCorruption(String),

    #[error("numeric overflow: {0}")]
    NumericOverflow(String),

    /// Every non-DC spectral component vanished, so no dominant frequency exists.
    #[error("degenerate signal: all non-DC spectral components are zero")]
    DegenerateSignal,

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(line: usize, msg: impl Into<String>) -> Self {
        Error::Parse {
            line,
            msg: msg.into(),
        }
    }
}
