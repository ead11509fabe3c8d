use residual_probe::ProbeError;
use thiserror::Error;

/// Process exit codes.
pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_LOAD: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("load error: {0}")]
    Load(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Probe(#[from] ProbeError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Load(_) | CliError::Io { .. } | CliError::Csv(_) => EXIT_LOAD,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::Probe(e) => match e {
                ProbeError::Numeric { .. } => EXIT_NUMERIC,
                ProbeError::Load(_) | ProbeError::Parse { .. } | ProbeError::Io(_) | ProbeError::Json(_) => EXIT_LOAD,
                ProbeError::Config(_) | ProbeError::Input(_) | ProbeError::Shape(_) | ProbeError::Analysis(_) => {
                    EXIT_CONFIG
                }
            },
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
