use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
    #[error("{path}: not a valid checkpoint: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("checkpoint was saved for a different network:\n  {}", .0.join("\n  "))]
    ConfigMismatch(Vec<String>),
    #[error("non-finite loss {loss} at epoch {epoch}, step {step}")]
    NonFiniteLoss { loss: f64, epoch: u64, step: u64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("unknown stage `{name}`; available: {}", .available.join(", "))]
    UnknownStage { name: String, available: Vec<String> },
    #[error("parameter `{name}`: gradient shape {grad:?} does not match {param:?}")]
    GradShape {
        name: String,
        param: Vec<usize>,
        grad: Vec<usize>,
    },
    #[error(transparent)]
    Core(#[from] clfseg_core::Error),
    #[error(transparent)]
    Data(#[from] clfseg_data::DataError),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> HarnessError + '_ {
    move |source| HarnessError::Io {
        path: path.to_path_buf(),
        source,
    }
}
