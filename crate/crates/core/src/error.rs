use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("corrupt header: {0}")]
    CorruptHeader(String),

    #[error("shape mismatch for tensor `{tensor}`: {detail}")]
    ShapeMismatch { tensor: String, detail: String },

    #[error("truncated blob: expected {expected} bytes, found {found}")]
    TruncatedBlob { expected: usize, found: usize },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },

    #[error("directive out of range: {0}")]
    DirectiveOutOfRange(String),

    #[error("training diverged at step {step}: loss is {loss}")]
    Diverged { step: usize, loss: f32 },

    #[error("unknown language `{0}`")]
    UnknownLanguage(String),

    #[error("language `{0}` has no observed tokens")]
    ZeroTokenLanguage(String),

    #[error("stats provenance mismatch: {0}")]
    ProvenanceMismatch(String),

    #[error("conflicting set directives on layer {layer}, neuron {neuron}")]
    PlanConflict { layer: usize, neuron: usize },

    #[error("invalid plant: {0}")]
    InvalidPlant(String),

    #[error("{0}")]
    Invalid(String),

    #[error("document `{doc}`: {source}")]
    Document {
        doc: String,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Whether the error stems from bad user input rather than a failure while running.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io(_) | Error::Diverged { .. } | Error::Csv(_) => false,
            Error::Document { source, .. } => source.is_validation(),
            _ => true,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
