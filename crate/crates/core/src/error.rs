use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("contract violated: {0}")]
    Contract(String),
    #[error("scene generation failed for seed {seed}: {msg}")]
    Generation { seed: u64, msg: String },
    #[error("format error in {}: byte {offset}: {msg}", file.display())]
    Format {
        file: PathBuf,
        offset: usize,
        msg: String,
    },
    #[error("cannot satisfy quota for {task}: {msg}")]
    Resource { task: String, msg: String },
    #[error("training diverged at step {step}: {msg}")]
    Training { step: usize, msg: String },
    #[error(transparent)]
    Tensor(#[from] dslab_tensor::TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
