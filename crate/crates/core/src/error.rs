//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("{0} must not be empty")]
    EmptyInput(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("singular mapping fit: augmented 3D points have rank {rank}, need 4")]
    SingularMappingFit { rank: usize },

    #[error("invalid mapping matrix: {0}")]
    InvalidMapping(&'static str),

    #[error("singular gram matrix in shape regression: {0}")]
    SingularGram(String),

    #[error("shape regression with no ridge needs N > 2l, got N = {n} <= 2l = {two_l}")]
    TooFewSamples { n: usize, two_l: usize },

    #[error("degenerate bounding box: w = {w}, h = {h}")]
    DegenerateBbox { w: f64, h: f64 },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(&'static str),

    #[error("invalid shape prior: {0}")]
    InvalidPrior(String),

    #[error("cascade stage {stage}: {source}")]
    Stage { stage: usize, source: Box<Error> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("{path}: expected {expected} entries, found {found}")]
    CountMismatch {
        path: String,
        expected: usize,
        found: usize,
    },

    #[error("corrupt or unsupported file {path}: {msg}")]
    Corrupt { path: String, msg: String },

    #[error("model format version {found} not supported (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },

    #[error("score matrix label mismatch: {0}")]
    LabelMismatch(String),

    #[error("{0}")]
    InvalidInput(String),
}

impl Error {
    /// Wraps an error with the cascade stage (1-based) it occurred in.
    pub(crate) fn at_stage(self, stage: usize) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
