//! Crate-wide error types.

use std::path::PathBuf;
use std::time::Duration;
use thiserror::Error;

/// Result alias used throughout the crate.
pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {got}")]
    ShapeMismatch {
        context: String,
        expected: String,
        got: String,
    },

    #[error("layer {layer} ({kind}) expects input dim {expected}, got {got}")]
    LayerDim {
        layer: usize,
        kind: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{op} requires a softmax output layer")]
    UnsupportedHead { op: &'static str },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("{what} index {index} out of range ({range})")]
    IndexRange {
        what: &'static str,
        index: usize,
        range: String,
    },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("label {value} out of range for {what} ({count} classes)")]
    LabelRange {
        what: &'static str,
        value: usize,
        count: usize,
    },

    #[error("CT2 class {class} has {count} sample(s); stratified split needs at least 2")]
    Stratify { class: usize, count: usize },

    #[error("pair sampling failed: {0}")]
    PairSampling(String),

    #[error("PCA dimension k={requested} exceeds limit {max} (min of sample count and feature dim)")]
    PcaDim { requested: usize, max: usize },

    #[error("features are rank-deficient: requested k={requested}, usable k is {usable}")]
    RankDeficient { requested: usize, usable: usize },

    #[error("likelihood kernel is degenerate at sigma = 0")]
    DegenerateKernel,

    #[error("CT2 class {0} has no members in the reference set")]
    UndefinedClass(usize),

    #[error("{path}: row {row}: {message}")]
    CsvParse {
        path: PathBuf,
        row: usize,
        message: String,
    },

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{file}: bad magic bytes (not a PSV container)")]
    BadMagic { file: PathBuf },

    #[error("{file}: unsupported container version {got}")]
    UnsupportedVersion { file: PathBuf, got: char },

    #[error("{file}: corrupt container: {detail}")]
    Corrupt { file: PathBuf, detail: String },

    #[error("{file}: missing required section {tag}")]
    MissingSection { file: PathBuf, tag: &'static str },

    #[error(transparent)]
    Frame(#[from] FrameError),

    #[error("server error frame code {code}: {message}")]
    ErrorFrame { code: u8, message: String },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("connect to {addr}: {source}")]
    Connect {
        addr: String,
        #[source]
        source: std::io::Error,
    },

    #[error("request timed out after {0:?}")]
    Timeout(Duration),

    #[error("pipeline stage '{stage}' failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    /// Wraps an I/O error with a human-readable context string.
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// Tags an error with the pipeline stage it occurred in.
    pub fn in_stage(stage: &'static str) -> impl FnOnce(Error) -> Error {
        move |source| Error::Stage {
            stage,
            source: Box::new(source),
        }
    }
}

/// Wire-frame decode errors; each malformation is distinct.
#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FrameError {
    #[error("truncated frame: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },

    #[error("bad frame magic")]
    BadMagic,

    #[error("unsupported protocol version {0}")]
    Version(u8),

    #[error("empty feature vector")]
    EmptyFeature,

    #[error("declared payload ({declared} bytes) does not match frame length ({actual})")]
    LengthMismatch { declared: usize, actual: usize },

    #[error("frame length {0} exceeds maximum")]
    Oversized(u32),

    #[error("unknown response status {0}")]
    UnknownStatus(u8),

    #[error("malformed utf-8 in error message")]
    BadMessage,
}
