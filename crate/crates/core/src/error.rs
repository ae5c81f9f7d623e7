use thiserror::Error;

/// Errors produced anywhere in the protocol stack.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid rank {rank}: must lie in 1..={max}")]
    InvalidRank { rank: usize, max: usize },

    #[error("empty input")]
    EmptyInput,

    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },

    #[error("local training diverged for client {client} layer {layer} at step {step}")]
    Divergence {
        client: usize,
        layer: usize,
        step: usize,
    },

    #[error("empty client cohort")]
    EmptyCohort,

    #[error("dimension {0} does not fit the 32-bit wire field")]
    Overflow(usize),

    #[error("not a sparse delta payload: {0}")]
    Format(String),

    #[error("payload truncated: needed {needed} more bytes")]
    TruncatedPayload { needed: usize },

    #[error("corrupt payload: {0}")]
    CorruptPayload(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
