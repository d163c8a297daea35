use thiserror::Error;

/// Errors produced anywhere in the toolkit.
///
/// File-format failures are split into distinct variants so callers can tell
/// a wrong file type from a newer format revision or a cut-off download.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },

    #[error("unsupported format version {found} (this build reads version {expected})")]
    VersionMismatch { expected: u32, found: u32 },

    #[error("truncated payload: {0}")]
    Truncated(String),

    #[error("malformed file: {0}")]
    Malformed(String),

    #[error("provenance mismatch: {what} expected {expected}, found {found}")]
    HashMismatch {
        what: &'static str,
        expected: String,
        found: String,
    },

    #[error("vocabulary mismatch: {left} vs {right}")]
    VocabMismatch { left: u32, right: u32 },

    #[error("token id {id} at position {position} is outside a vocabulary of {vocab_size}")]
    TokenOutOfRange {
        id: u32,
        position: usize,
        vocab_size: u32,
    },

    #[error("stream of {len} tokens is shorter than one packing window of {needed}")]
    StreamTooShort { len: usize, needed: usize },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite value encountered in {location}")]
    NonFinite { location: String },

    #[error("training diverged at step {step} (last good checkpoint at step {last_good_step})")]
    Diverged { step: usize, last_good_step: usize },

    #[error("config error: {0}")]
    Config(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
