use std::path::PathBuf;

/// Errors raised anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate embedding: {0}")]
    DegenerateEmbedding(String),
    #[error("embedder unavailable: {0}")]
    EmbedderUnavailable(String),
    #[error("insufficient data: need at least {needed} samples, got {got}")]
    InsufficientData { needed: usize, got: usize },
    #[error("unknown backbone `{0}`")]
    UnknownBackbone(String),
    #[error("backbone `{0}` is already registered")]
    DuplicateBackbone(String),
    #[error("failed to load weights from {path}: {reason}")]
    WeightLoad { path: PathBuf, reason: String },
    #[error("insufficient branch inputs: need {needed}, got {got}")]
    InsufficientInputs { needed: usize, got: usize },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("config error: {0}")]
    Config(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("image codec failure: {0}")]
    Codec(String),
    #[error("evaluation requires both classes; only label {0} present")]
    SingleClass(u8),
    #[error("non-finite loss at {stage} step {step}: {detail}")]
    NonFiniteLoss {
        stage: &'static str,
        step: usize,
        detail: String,
    },
    #[error("frozen parameter group `{0}` changed during stage II")]
    FrozenParameterViolation(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing quantizer: {0}")]
    MissingQuantizer(PathBuf),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            return Error::MissingFile(path);
        }
        Error::Io { path, source }
    }

    /// Process exit code: 1 for usage/config problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidArgument(_) => 1,
            _ => 2,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
