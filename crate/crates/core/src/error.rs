use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { shape: (usize, usize), len: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("alpha {0} outside (1, 2]")]
    AlphaOutOfRange(f64),

    #[error("{0}: empty input")]
    Empty(&'static str),

    #[error("invalid dialogue `{id}`: {reason}")]
    InvalidDialogue { id: String, reason: String },

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("dialogue `{0}` has no counterpart in the gold corpus")]
    UnmatchedDialogue(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("tagset mismatch: checkpoint has {checkpoint:?}, corpus has {corpus:?}")]
    TagsetMismatch {
        checkpoint: Vec<String>,
        corpus: Vec<String>,
    },

    #[error("training diverged at epoch {epoch} step {step}: loss {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short stable identifier used in machine-readable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } | Error::BadShape { .. } => "shape",
            Error::NonScalarLoss(_) | Error::TapeConsumed | Error::MissingGrad(_) => "autograd",
            Error::Domain(_) | Error::AlphaOutOfRange(_) | Error::Empty(_) => "domain",
            Error::InvalidDialogue { .. } => "invalid_dialogue",
            Error::Parse { .. } => "parse",
            Error::UnmatchedDialogue(_) => "unmatched_dialogue",
            Error::Config(_) => "config",
            Error::Checkpoint(_) => "checkpoint",
            Error::TagsetMismatch { .. } => "tagset_mismatch",
            Error::Diverged { .. } => "diverged",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}
