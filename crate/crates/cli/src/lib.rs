//! File-based pipeline around `dynemu-core`: every command reads a run
//! configuration, writes deterministic outputs, and stamps them with the tool
//! version, a hash of the configuration inputs, and the seeds used.

pub mod commands;
pub mod config;
pub mod files;

use dynemu_core::EmuError;
use thiserror::Error;

pub const TOOL_VERSION: &str = concat!("dynemu ", env!("CARGO_PKG_VERSION"));

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Emu(#[from] EmuError),
}

impl CliError {
    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.into(),
            source,
        }
    }

    /// 2 config, 3 numerical, 4 I/O, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io { .. } => 4,
            CliError::Emu(e) if e.is_numerical() => 3,
            CliError::Emu(e) => match e.root() {
                EmuError::Io(_) | EmuError::Format(_) => 4,
                EmuError::InvalidInput(_) | EmuError::DimensionMismatch(_) | EmuError::MismatchedGrids | EmuError::Json(_) => 2,
                _ => 1,
            },
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
