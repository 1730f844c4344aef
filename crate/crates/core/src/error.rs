use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Broad failure class, used by the CLI to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Usage,
    Data,
    Numeric,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: malformed record: {reason}")]
    MalformedRecord {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("duplicate document id {0:?}")]
    DuplicateId(String),

    #[error("empty corpus: no token reaches the minimum frequency {min_freq}")]
    EmptyCorpus { min_freq: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("no document has the {required} tokens the sampler needs")]
    NoEligibleDocuments { required: usize },

    #[error("document {doc_id:?} rejected: {n} tokens, at least {required} required")]
    DocumentRejected {
        doc_id: String,
        n: usize,
        required: usize,
    },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence of length {len} exceeds the {max} supported positions")]
    SequenceTooLong { len: usize, max: usize },

    #[error("position {position} out of range for sequence of length {len}")]
    PositionOutOfRange { position: usize, len: usize },

    #[error("row {row} has no unpadded positions")]
    AllPadRow { row: usize },

    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("cosine similarity undefined for a zero-norm vector")]
    ZeroNorm,

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("MLM loss needs at least one masked position")]
    NoMaskedPositions,

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),

    #[error("correlation undefined for constant input")]
    ConstantInput,

    #[error("no reports left to aggregate")]
    EmptyAggregation,

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("checkpoint vocab fingerprint {found} does not match vocabulary {expected}")]
    FingerprintMismatch { expected: String, found: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            Error::InvalidConfig(_) | Error::InvalidArgument(_) => ErrorClass::Usage,
            Error::ZeroNorm
            | Error::InvalidTemperature(_)
            | Error::NonFinite(_)
            | Error::NonFiniteGradient(_)
            | Error::ConstantInput => ErrorClass::Numeric,
            _ => ErrorClass::Data,
        }
    }
}
