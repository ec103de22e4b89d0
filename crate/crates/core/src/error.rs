use std::path::PathBuf;

use crate::rerank::ParseError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    MalformedLine { line: usize, message: String },

    #[error("line {line}: rating out of range: {rating}")]
    RatingOutOfRange { line: usize, rating: f64 },

    #[error("line {line}: negative timestamp {timestamp}")]
    NegativeTimestamp { line: usize, timestamp: i64 },

    #[error("no interaction records in input")]
    EmptyLog,

    #[error("bad magic in embedding file")]
    BadMagic,

    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated embedding file: expected {expected} payload bytes, found {found}")]
    Truncated { expected: u64, found: u64 },

    #[error("embedding payload length {found} inconsistent with header ({rows} x {dim})")]
    DimensionMismatch { rows: u64, dim: u32, found: u64 },

    #[error("non-finite value in embedding matrix at row {row}")]
    NonFinite { row: usize },

    #[error("unknown {kind} id {id:?}")]
    UnknownId { kind: &'static str, id: String },

    #[error("item {0:?} missing from catalog")]
    MissingCatalogEntry(String),

    #[error("{what} index {index} out of range (len {len})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("edge already observed: user {user}, item {item}")]
    EdgeAlreadyObserved { user: usize, item: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("degenerate embedding: node {node} has zero norm")]
    DegenerateEmbedding { node: usize },

    #[error("could not sample a batch: {0}")]
    Sampling(String),

    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },

    #[error("non-bijective permutation: {0}")]
    InvalidPermutation(String),

    #[error("theorem inapplicable: expected rank gap must be positive, got {0}")]
    TheoremInapplicable(f64),

    #[error("invalid prompt request: {0}")]
    InvalidRequest(String),

    #[error(transparent)]
    Parse(#[from] ParseError),

    #[error(transparent)]
    Rerank(#[from] crate::rerank::RerankError),

    #[error("json: {0}")]
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
