use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("taxonomy is empty")]
    EmptyTaxonomy,
    #[error("duplicate label id `{0}`")]
    DuplicateLabel(String),
    #[error("label `{id}` references unknown parent `{parent}`")]
    DanglingParent { id: String, parent: String },
    #[error("cycle detected in parent chain through `{0}`")]
    Cycle(String),
    #[error("unknown label id `{0}`")]
    UnknownLabel(String),
    #[error("label set is not ancestor-closed: parent `{parent}` of `{id}` is missing")]
    NotAncestorClosed { id: String, parent: String },
    #[error("label `{0}` has an empty name")]
    EmptyLabelName(String),
    #[error("bucket edges must be strictly increasing")]
    BucketEdges,

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },
    #[error("malformed taxonomy file: {0}")]
    MalformedTaxonomy(String),

    #[error("max_len {max_len} cannot hold the {required}-token prompt frame")]
    MaxLenTooSmall { max_len: usize, required: usize },
    #[error("sequence length {len} exceeds encoder max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("backward requested through a detached forward pass")]
    DetachedBackward,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("zero-norm vector in similarity")]
    ZeroNorm,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}: {message}")]
    Diverged { epoch: usize, message: String },

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    CheckpointVersion { found: String, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
