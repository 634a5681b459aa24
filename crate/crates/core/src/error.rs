use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: reduction over an empty axis")]
    EmptyAxis { op: &'static str },

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("token id {id} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },

    #[error("sequence of {len} tokens exceeds the context window of {window}")]
    ContextOverflow { len: usize, window: usize },

    #[error("attention layout of {rows} rows exceeds the layout cap of {cap}")]
    LayoutCap { rows: usize, cap: usize },

    #[error("invalid configuration: {field}: {reason}")]
    Config { field: String, reason: String },

    #[error("infeasible segmentation: {0}")]
    Segmentation(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFinite { step: usize, detail: String },

    #[error("bad {what} header: {reason} (header: {dump})")]
    Header {
        what: &'static str,
        reason: String,
        dump: String,
    },

    #[error("missing summary blocks for passage ids {0:?}")]
    MissingBlocks(Vec<String>),

    #[error("passage {passage} does not fit: {len} tokens exceed the window of {window}")]
    PassageOverflow {
        passage: String,
        len: usize,
        window: usize,
    },

    #[error(
        "no demonstration fits the token budget of {budget}: example {example} needs {needed}"
    )]
    DemoTooLong {
        example: usize,
        needed: usize,
        budget: usize,
    },

    #[error("{0}")]
    Invalid(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } | Error::EmptyAxis { .. } | Error::NonScalarLoss(_) => "shape",
            Error::TokenOutOfRange { .. } => "token_out_of_range",
            Error::ContextOverflow { .. } | Error::LayoutCap { .. } => "context_overflow",
            Error::Config { .. } => "config",
            Error::Segmentation(_) => "segmentation",
            Error::NonFinite { .. } => "non_finite",
            Error::Header { .. } => "header",
            Error::MissingBlocks(_) => "missing_blocks",
            Error::PassageOverflow { .. } => "passage_overflow",
            Error::DemoTooLong { .. } => "demo_too_long",
            Error::Invalid(_) => "invalid",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
