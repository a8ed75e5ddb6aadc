use thiserror::Error;
use volseg_grad::GradError;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("volume file {path}: {detail}")]
    VolumeFormat { path: String, detail: String },
    #[error("training diverged at epoch {epoch}, iteration {iteration}: loss {loss}")]
    Divergence { epoch: usize, iteration: usize, loss: f64 },
    #[error("no region of interest found: {0}")]
    NoRoi(String),
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = CoreError> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> CoreError {
    CoreError::Invalid(msg.into())
}
