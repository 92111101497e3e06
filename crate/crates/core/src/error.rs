use thiserror::Error;

pub type Result<T> = std::result::Result<T, AbmtError>;

#[derive(Debug, Error)]
pub enum AbmtError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("invalid parameter: {0}")]
    Parameter(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("degenerate clustering: {0}")]
    DegenerateClustering(String),
    #[error("evaluation error: {0}")]
    Evaluation(String),
    #[error("batch error: {0}")]
    Batch(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("training failed: {0}")]
    Training(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn dim_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AbmtError::Dimension(msg.into()))
}

pub(crate) fn contract_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(AbmtError::Contract(msg.into()))
}
