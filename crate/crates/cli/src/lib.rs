//! Library side of the `residual-probe` command-line tool.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::{cmd_analyze, cmd_gen_seq, cmd_probe, AnalyzeOptions, LayerSel, Manifest, Mode};
pub use config::{ConfigMap, ExperimentConfig, ModelSpec};
pub use error::{CliError, CliResult, EXIT_CONFIG, EXIT_LOAD, EXIT_NUMERIC, EXIT_OK};
