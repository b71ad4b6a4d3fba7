//! The `dmlm` command line: experiment recipes over the core library.
//!
//! Every command reads and validates the token-space manifest first, takes
//! its randomness from `--seed` (falling back to `DMLM_SEED`), and writes its
//! outputs under `--out`. Failures print one line on stderr of the form
//! `error[<kind>]: <message>` and exit with 2 (usage), 3 (missing file),
//! 4 (manifest mismatch) or 1 (anything else).

mod args;
mod commands;
pub mod report;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::Parser;
use thiserror::Error;

pub use args::Cli;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{}: file not found", .0.display())]
    MissingFile(PathBuf),
    #[error(transparent)]
    Core(#[from] dmlm_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingFile(_) => 3,
            CliError::Core(e) => match e {
                dmlm_core::Error::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound => 3,
                dmlm_core::Error::ManifestMismatch(_) | dmlm_core::Error::IncompatibleCheckpoint(_) => 4,
                _ => 1,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            2 => "usage",
            3 => "missing_file",
            4 => "manifest_mismatch",
            _ => "failure",
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I) -> CliResult<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(argv).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            CliError::Usage(String::new())
        }
        _ => CliError::Usage(e.to_string()),
    })?;
    commands::dispatch(cli)
}

/// Runs and converts the outcome into a process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<T> = argv.into_iter().collect();
    // help and version go to stdout with status 0
    if let Err(e) = Cli::try_parse_from(argv.clone()) {
        if matches!(
            e.kind(),
            clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion
        ) {
            print!("{e}");
            return 0;
        }
    }
    match run(argv) {
        Ok(()) => 0,
        Err(e) => {
            let message = e.to_string();
            let line: String = message
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .collect::<Vec<_>>()
                .join(" ");
            eprintln!("error[{}]: {line}", e.kind());
            e.exit_code()
        }
    }
}
