use thiserror::Error;

use crate::checkpoint::CheckpointError;
use crate::negsample::SwapError;
use crate::tensor::TensorError;
use crate::textgraph::TextGraphError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Text(#[from] TextGraphError),
    #[error(transparent)]
    Swap(#[from] SwapError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
