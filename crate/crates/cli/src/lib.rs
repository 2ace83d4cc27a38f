//! Command implementations behind the `ncl` binary: dataset generation,
//! training runs with CSV/JSON outputs, checkpoint evaluation and plot-data
//! export.
//!
//! Exit codes are a stable contract: 0 success, 2 config or parse error,
//! 3 training divergence, 4 artifact mismatch or corrupt checkpoint, 1 any
//! other I/O failure.

pub mod commands;
pub mod config;
pub mod metrics;

use ncl_core::Error as CoreError;
use thiserror::Error;

pub use commands::{cmd_eval, cmd_gen, cmd_plotdata, cmd_train, RunSummary, TrainStatus};
pub use config::{OutputConfig, RunConfigFile};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_ARTIFACT: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid config at {field}: {message}")]
    Config { field: String, message: String },

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config { .. } | CliError::Malformed(_) => EXIT_CONFIG,
            CliError::Io { .. } => EXIT_IO,
            CliError::Core(e) => match e {
                CoreError::InvalidConfig { .. }
                | CoreError::InvalidInput(_)
                | CoreError::Parse { .. } => EXIT_CONFIG,
                CoreError::Divergence { .. } => EXIT_DIVERGED,
                CoreError::Version { .. }
                | CoreError::Mismatch(_)
                | CoreError::CorruptCheckpoint { .. } => EXIT_ARTIFACT,
                CoreError::Io(_) => EXIT_IO,
            },
        }
    }

    pub(crate) fn io(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> Self {
        let context = context.into();
        move |source| CliError::Io { context, source }
    }
}
