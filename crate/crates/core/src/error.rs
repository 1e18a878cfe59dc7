use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("sequence of length {len} exceeds max_positions {max}")]
    Capacity { len: usize, max: usize },
    #[error("layer {layer} out of range for a {n_layers}-layer model")]
    LayerOutOfRange { layer: usize, n_layers: usize },
    #[error("invalid config `{field}`: {reason}")]
    Config { field: String, reason: String },
    #[error("placeholder error: {0}")]
    Placeholder(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("window error: {0}")]
    Window(String),
    #[error("degenerate window: all step weights are zero")]
    DegenerateWindow,
    #[error("invalid environment input: {0}")]
    Env(String),
    #[error("empty {0}")]
    Empty(&'static str),
    #[error("corrupt file: {0}")]
    Corrupt(String),
    #[error("checkpoint does not match model config: field `{field}` is {found} in file, expected {expected}")]
    CheckpointMismatch {
        field: String,
        found: String,
        expected: String,
    },
    #[error("training diverged at step {step}: loss is not finite")]
    Diverged { step: u64 },
    #[error("analysis error: {0}")]
    Analysis(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Whether the error stems from user input rather than a runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config { .. }
                | Error::Placeholder(_)
                | Error::Dimension(_)
                | Error::Window(_)
                | Error::Env(_)
                | Error::Empty(_)
                | Error::CheckpointMismatch { .. }
                | Error::LayerOutOfRange { .. }
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
