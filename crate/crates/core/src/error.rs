use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("empty softmax")]
    EmptySoftmax,
    #[error("degenerate norm")]
    DegenerateNorm,
    #[error("zero-norm cosine")]
    ZeroNormCosine,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("empty sequence")]
    EmptySequence,

    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
    #[error("bad magic {0:?}, expected \"EMBW\"")]
    BadMagic([u8; 4]),
    #[error("unsupported weights version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file")]
    Truncated,
    #[error("{0} trailing bytes after last tensor")]
    TrailingBytes(usize),
    #[error("checksum mismatch: header {expected:#010x}, payload {actual:#010x}")]
    ChecksumMismatch { expected: u64, actual: u64 },
    #[error("unknown tensor name {0:?}")]
    UnknownTensor(String),
    #[error("missing tensor {0:?}")]
    MissingTensor(String),
    #[error("duplicate tensor {0:?}")]
    DuplicateTensor(String),
    #[error("shape mismatch for {name}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("malformed tensor header: {0}")]
    MalformedTensor(String),

    #[error("{path}: line {line}: {msg}")]
    TaskRecord { path: PathBuf, line: usize, msg: String },
    #[error("token id {id} out of range for vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("position {position} out of range ({len})")]
    PositionOutOfRange { position: usize, len: usize },
    #[error("layer selector {0} out of range")]
    LayerOutOfRange(String),
    #[error("head {head} out of range ({n_heads} heads)")]
    HeadOutOfRange { head: usize, n_heads: usize },
    #[error("no relative kernel: model uses learned absolute positions")]
    NoRelativeKernel,
    #[error("missing encoder memory for encoder-decoder decoding")]
    MissingMemory,
    #[error("{0}")]
    Unsupported(String),

    #[error("invalid scheme: {0}")]
    InvalidScheme(String),
    #[error("scheme does not fit instance: {0}")]
    SchemeMismatch(String),
    #[error("empty choice {0}")]
    EmptyChoice(usize),
    #[error("no instances")]
    NoInstances,

    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
