use thiserror::Error;

/// Errors raised anywhere in the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("target id {id} out of range for vocabulary of {vocab}")]
    TargetOutOfRange { id: usize, vocab: usize },
    #[error("backward requires a scalar loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    LengthOverflow { len: usize, max: usize },
    #[error("token {0} is outside the vocabulary")]
    UnknownToken(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("plugin family mismatch: expected {expected}, found {found}")]
    FamilyMismatch { expected: String, found: String },
    #[error("aspect `{0}` appears more than once")]
    DuplicateAspect(String),
    #[error("unknown aspect `{0}`")]
    UnknownAspect(String),
    #[error("unknown value `{value}` for aspect `{aspect}`")]
    UnknownValue { aspect: String, value: String },
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("degenerate decomposition: {0}")]
    Degenerate(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingArtifact(_) => 3,
            Error::Io(e) if e.kind() == std::io::ErrorKind::NotFound => 3,
            Error::NonFinite(_) | Error::Divergence(_) | Error::Degenerate(_) => 4,
            Error::Verification(_) => 5,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
