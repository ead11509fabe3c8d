use thiserror::Error;

/// Errors raised by the probe library.
#[derive(Debug, Error)]
pub enum ProbeError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("input error: {0}")]
    Input(String),

    #[error("non-finite value produced at residual position {layer_pos}")]
    Numeric { layer_pos: usize },

    #[error("archive entry `{entry}`: {reason}")]
    Parse { entry: String, reason: String },

    #[error("load error: {0}")]
    Load(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("analysis error: {0}")]
    Analysis(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ProbeError>;
