use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // datamodel
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("{file}:{line}: malformed record: {reason}")]
    MalformedRecord {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("dangling reference: {0}")]
    DanglingReference(String),
    #[error("invalid dataset: {0}")]
    InvalidDataset(String),
    #[error("image pool is empty but {0} text(s) need alignment")]
    EmptyImagePool(usize),
    #[error("too few claims ({0}) for the requested split")]
    TooFewClaims(usize),

    // encoder / model
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("text is empty after tokenization")]
    EmptyText,

    // retriever
    #[error("dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("contrastive batch needs at least 2 pairs, got {0}")]
    BatchTooSmall(usize),
    #[error("evidence corpus is empty")]
    EmptyCorpus,
    #[error("retrieval index is empty")]
    EmptyIndex,

    // verifier / explainer
    #[error("no evidence supplied")]
    NoEvidence,
    #[error("unknown label: {0}")]
    UnknownLabel(String),
    #[error("claim needs {needed} positions but the budget is {budget}")]
    OverLengthAfterTruncation { needed: usize, budget: usize },
    #[error("gold sequence is empty")]
    EmptyGold,
    #[error("sequence is empty")]
    EmptySequence,

    // trainer
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error("explanation loss requested but the dataset has no explanations")]
    MissingExplanations,
    #[error("version mismatch: expected {expected}, found {found}")]
    VersionMismatch { expected: u32, found: u32 },
    #[error("corrupt file: {0}")]
    CorruptFile(String),

    // evalkit
    #[error("length mismatch: {0} predictions vs {1} gold labels")]
    LengthMismatch(usize, usize),
    #[error("reference is empty after tokenization")]
    EmptyReference,

    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
