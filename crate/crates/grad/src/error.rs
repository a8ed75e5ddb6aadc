use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("{op}: computed output extent is not positive ({detail})")]
    Extent { op: &'static str, detail: String },

    #[error("invalid argument to {op}: {detail}")]
    Argument { op: &'static str, detail: String },

    #[error("graph contains a cycle through node(s): {0}")]
    Cycle(String),

    #[error("graph error: {0}")]
    Graph(String),

    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = GradError> = std::result::Result<T, E>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> GradError {
    GradError::Shape {
        op,
        detail: detail.into(),
    }
}

pub(crate) fn arg_err(op: &'static str, detail: impl Into<String>) -> GradError {
    GradError::Argument {
        op,
        detail: detail.into(),
    }
}
