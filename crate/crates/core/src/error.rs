use thiserror::Error;

#[derive(Debug, Error)]
pub enum StptError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },

    #[error("loss must be a single-element tensor, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this tape")]
    BackwardConsumed,

    #[error("parameter `{0}` has no accumulated gradient")]
    MissingGrad(String),

    #[error("duplicate parameter name `{0}`")]
    DuplicateParam(String),

    #[error("unknown parameter name `{0}`")]
    UnknownParam(String),

    #[error("softmax row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: String },

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("training diverged at step {step}: {what}")]
    Diverged { step: usize, what: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("corrupt file {path}: {details}")]
    CorruptFile { path: String, details: String },
}

pub type Result<T> = std::result::Result<T, StptError>;
