use std::path::PathBuf;

/// Failures while reading or validating a checkpoint file.
#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),
    #[error("hash mismatch: expected {expected}, found {found}")]
    HashMismatch { expected: String, found: String },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("token id {id} at position {position} is outside the vocabulary (size {vocab_size})")]
    TokenOutOfRange {
        position: usize,
        id: usize,
        vocab_size: usize,
    },
    #[error("empty sequence: {0}")]
    EmptySequence(&'static str),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite loss {loss} at step {step}")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("missing negative for prompt index {0}")]
    MissingNegative(usize),
    #[error("invalid vocabulary: {0}")]
    Vocabulary(String),
    #[error("duplicate user id {0:?}")]
    DuplicateUser(String),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("stale input {path}: recorded hash {recorded}, current hash {current}")]
    StaleInput {
        path: String,
        recorded: String,
        current: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error("io error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 2 config, 3 stage failure, 4 checkpoint integrity.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Checkpoint(_) | Error::StaleInput { .. } => 4,
            Error::Stage { source, .. } => match source.exit_code() {
                4 => 4,
                2 => 2,
                _ => 3,
            },
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
