use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {msg}")]
    Malformed {
        path: String,
        line: usize,
        msg: String,
    },
    #[error("duplicate code `{0}`")]
    DuplicateCode(String),
    #[error("duplicate definition `{0}`")]
    DuplicateDefinition(String),
    #[error("groups at level {level} do not partition the leaves: {msg}")]
    NotAPartition { level: usize, msg: String },
    #[error("group `{label}` at level {level} has inconsistent or missing parent")]
    OrphanGroup { level: usize, label: String },
    #[error("unknown code `{0}`")]
    UnknownCode(String),
    #[error("unknown definition `{0}`")]
    UnknownDefinition(String),
    #[error("unknown group (level {level}, index {index})")]
    UnknownGroup { level: usize, index: usize },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("sequence of length {len} exceeds max_seq_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("numeric underflow: {0}")]
    Underflow(String),
    #[error("training diverged at epoch {epoch}: {msg}")]
    Divergence { epoch: usize, msg: String },
    #[error("unsupported graph operation: {0}")]
    Unsupported(String),
    #[error("checkpoint format: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit status for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Divergence { .. } => 3,
            Error::Io { .. } => 4,
            _ => 2,
        }
    }
}
