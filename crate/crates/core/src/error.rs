use scenegat_autograd::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid scene: {0}")]
    InvalidScene(String),
    #[error("degenerate lane polyline: {0}")]
    DegenerateLane(String),
    #[error("invalid field parameters: {0}")]
    FieldParams(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset line {line}: {message}")]
    DatasetLine { line: usize, message: String },
    #[error("{0}")]
    Data(String),
    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFiniteLoss { epoch: usize, step: usize, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
