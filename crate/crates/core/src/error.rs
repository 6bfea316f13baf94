use hgs_autodiff::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("camera: {0}")]
    Camera(String),
    #[error("input: {0}")]
    Input(String),
    #[error("config: {0}")]
    Config(String),
    #[error("render: {0}")]
    Render(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

/// Lets pipeline code run inside closures that speak the tensor error type,
/// such as the finite-difference harness.
impl From<CoreError> for TensorError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Tensor(t) => t,
            other => TensorError::invalid("pipeline", other.to_string()),
        }
    }
}
