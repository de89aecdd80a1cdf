use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: String, actual: String },

    #[error("spectrogram is in the {actual} domain, operation requires {expected}")]
    Domain {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown speaker id `{id}` (available: {})", available.join(", "))]
    UnknownSpeaker { id: String, available: Vec<String> },

    #[error("duplicate speaker id `{0}`")]
    DuplicateSpeaker(String),

    #[error("embedding dimension mismatch for `{id}`: expected {expected}, got {actual}")]
    EmbeddingDim {
        id: String,
        expected: usize,
        actual: usize,
    },

    #[error("sample rate mismatch: expected {expected} Hz, got {actual} Hz")]
    SampleRate { expected: u32, actual: u32 },

    #[error("non-finite loss at step {step} (t = {t}, batch = [{}])", batch.join(", "))]
    NonFiniteLoss {
        step: u64,
        t: f64,
        batch: Vec<String>,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(expected: impl ToString, actual: impl ToString) -> Self {
        Error::Shape {
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    /// True for errors caused by missing or malformed input data rather than
    /// configuration or numerical failure.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Wav { .. }
                | Error::Parse { .. }
                | Error::UnknownSpeaker { .. }
                | Error::DuplicateSpeaker(_)
                | Error::EmbeddingDim { .. }
                | Error::SampleRate { .. }
                | Error::Empty(_)
        )
    }
}
