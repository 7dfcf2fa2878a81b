use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("clip too short: {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },

    #[error("sample rate mismatch: got {got} Hz, expected {expected} Hz")]
    RateMismatch { got: u32, expected: u32 },

    #[error("invalid audio: {0}")]
    InvalidAudio(String),

    #[error("unsupported wav format: {0}")]
    WavFormat(String),

    #[error("shape mismatch in {tensor}: expected {expected:?}, got {got:?}")]
    Shape {
        tensor: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("bad weight file: {0}")]
    Format(String),

    #[error("unsupported weight file version {0}")]
    Version(u32),

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("row has {got} entries, expected {expected}")]
    RowLength { got: usize, expected: usize },

    #[error("session closed")]
    SessionClosed,

    #[error("non-finite loss at {layer}")]
    NonFinite { layer: String },

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("enrollment failed: {0}")]
    EnrollmentFailed(String),

    #[error("overlapping truth segments in clip {clip}: [{a_start},{a_end}] and [{b_start},{b_end}]")]
    OverlappingSegments {
        clip: usize,
        a_start: usize,
        a_end: usize,
        b_start: usize,
        b_end: usize,
    },

    #[error("empty evaluation set")]
    EmptyEvaluation,

    #[error("zero audio duration")]
    ZeroDuration,

    #[error("unknown class {0:?}")]
    UnknownClass(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Wav(#[from] hound::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
