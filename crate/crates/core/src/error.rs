use std::fmt;

/// Errors produced anywhere in the laboratory.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite values in {0}")]
    NonFinite(String),

    #[error("divergence: {0}")]
    Divergence(Divergence),

    #[error("gradient oracle failure at element {index}: {detail}")]
    Oracle { index: usize, detail: String },

    #[error("checkpoint mismatch:\n{0}")]
    Checkpoint(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Where a forward or training computation first produced a non-finite value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Divergence {
    Layer(usize),
    Logits,
    Loss,
    Gradient(String),
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Divergence::Layer(l) => write!(f, "non-finite activations after layer {l}"),
            Divergence::Logits => write!(f, "non-finite output logits"),
            Divergence::Loss => write!(f, "non-finite loss"),
            Divergence::Gradient(name) => write!(f, "non-finite gradient for {name}"),
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
