//! Crate-wide error type.
//!
//! Variants are grouped by the failure class they map to at the CLI
//! boundary: config (exit 2), data (exit 3), numerical (exit 4).

use crate::corpus::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    // ---- tensor / autodiff ----
    #[error("{op}: shape mismatch: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {msg}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        msg: String,
    },
    #[error("{op}: non-finite input value")]
    NonFiniteInput { op: &'static str },
    #[error("non-finite gradient produced by {op}")]
    NonFiniteGrad { op: &'static str },
    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward already ran on this tape; rebuild the graph before calling it again")]
    BackwardConsumed,
    #[error("backward on an empty tape")]
    EmptyTape,
    #[error("parameter {name} has no gradient")]
    MissingGrad { name: String },

    // ---- vocab / model ----
    #[error("symbol {symbol:?} is not in the vocabulary")]
    UnknownSymbol { symbol: String },
    #[error("token id {id} out of range (vocab size {vocab})")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_seq {max_seq}")]
    SequenceTooLong { len: usize, max_seq: usize },
    #[error("prompt must contain exactly one {token}, found {count}")]
    EmbedTokenCount { token: &'static str, count: usize },
    #[error("response contains no <gen_emb> token")]
    MissingGenEmb,
    #[error("empty sample text")]
    EmptySample,
    #[error("invalid model config: {0}")]
    ModelConfig(String),

    // ---- corpus ----
    #[error("inconsistent task spec: {0}")]
    TaskSpec(String),
    #[error("response format error: {0}")]
    BadFormat(#[from] FormatError),
    #[error("rl subset needs {requested} pairs but only {available} are available")]
    SubsetExhausted { requested: usize, available: usize },
    #[error("task {task} has only {available} pairs, quota is {quota}")]
    SubsetTaskShort {
        task: String,
        available: usize,
        quota: usize,
    },

    // ---- objectives / rl ----
    #[error("{op}: row {row} is not unit length (norm {norm})")]
    NotUnitNorm {
        op: &'static str,
        row: usize,
        norm: f64,
    },
    #[error("group size must be at least 2, got {0}")]
    GroupTooSmall(usize),
    #[error("{0}")]
    InvalidArgument(String),
    #[error("non-finite {what} during {ctx}")]
    NonFiniteValue { what: &'static str, ctx: String },

    // ---- eval ----
    #[error("instance {id} has no positive candidate; ndcg is undefined")]
    NoPositives { id: String },
    #[error("pass@k requires k <= n, got k={k}, n={n}")]
    PassAtKRange { k: usize, n: usize },
    #[error("instance {id} is missing {mode} scores")]
    MissingMode { id: String, mode: &'static str },

    // ---- io / formats ----
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("checkpoint {path}: {msg}")]
    Checkpoint { path: String, msg: String },
    #[error("config error: {0}")]
    Config(String),
}

impl Error {
    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code class for the CLI: 2 config, 3 data, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        use Error::*;
        match self {
            Config(_) | ModelConfig(_) | TaskSpec(_) | InvalidArgument(_) | PassAtKRange { .. }
            | GroupTooSmall(_) => 2,
            Io { .. } | Json { .. } | Checkpoint { .. } | UnknownSymbol { .. }
            | BadFormat(_) | SubsetExhausted { .. } | SubsetTaskShort { .. }
            | NoPositives { .. } | MissingMode { .. } | EmptySample => 3,
            _ => 4,
        }
    }
}
