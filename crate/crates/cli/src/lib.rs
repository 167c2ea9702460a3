//! Command-line front end for `conststyle-core`: dataset generation,
//! training, evaluation and the experiment sweeps, with CSTN tensor dumps
//! and CSV reports.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod tensor;

use std::ffi::OsString;
use std::io;
use std::path::Path;

use clap::Parser;

pub use commands::Cli;

/// Exit status for a failed run.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad input: flags, config, missing or malformed artifacts.
    #[error("{0}")]
    User(String),
    /// Something that should not happen with valid input.
    #[error("internal error: {0}")]
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::User(_) => 1,
            CliError::Internal(_) => 2,
        }
    }

    pub fn io(path: &Path, e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::NotFound => CliError::User(format!("missing artifact: {}", path.display())),
            io::ErrorKind::PermissionDenied | io::ErrorKind::AlreadyExists | io::ErrorKind::InvalidInput => {
                CliError::User(format!("{}: {e}", path.display()))
            }
            _ => CliError::Internal(format!("{}: {e}", path.display())),
        }
    }

    pub fn csv(path: &Path, e: csv::Error) -> Self {
        if e.is_io_error() {
            if let csv::ErrorKind::Io(io) = e.into_kind() {
                return Self::io(path, io);
            }
            return CliError::Internal(format!("{}: csv io error", path.display()));
        }
        CliError::User(format!("{}: {e}", path.display()))
    }
}

impl From<conststyle_core::Error> for CliError {
    fn from(e: conststyle_core::Error) -> Self {
        use conststyle_core::Error as E;
        match e {
            E::Config(_) | E::Parameter(_) | E::Shape(_) | E::Empty(_) | E::InsufficientData { .. } | E::State(_) => {
                CliError::User(e.to_string())
            }
            E::NotSymmetric { .. } | E::NotPsd { .. } | E::NonFinite(_) | E::NoConvergence(..) => {
                CliError::Internal(e.to_string())
            }
        }
    }
}

impl From<config::ConfigError> for CliError {
    fn from(e: config::ConfigError) -> Self {
        CliError::User(e.to_string())
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code: 0 success, 1 user error, 2 internal error.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match commands::execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
