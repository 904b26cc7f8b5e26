//! `vibe`: command-line front end over feature files and JSON configs.
//!
//! Exit status is 0 on success, 2 when arguments or configuration fail
//! validation, and 1 when a run fails.

mod commands;
mod config;

use std::process::ExitCode;

use clap::Parser;
use vibe_core::VibeError;

use crate::commands::Command;

#[derive(Debug, Parser)]
#[command(name = "vibe", version, about = "Latent blending over dense feature grids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Error carrying its exit status.
#[derive(Debug)]
pub enum CliError {
    /// Bad arguments, configuration or input contents; exit status 2.
    Usage(String),
    /// Failure while running; exit status 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn usage(msg: impl Into<String>) -> Self {
        CliError::Usage(msg.into())
    }

    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "{m}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl From<VibeError> for CliError {
    fn from(e: VibeError) -> Self {
        match e {
            VibeError::Invalid { .. } | VibeError::DimensionMismatch { .. } => CliError::Usage(e.to_string()),
            // Display already carries the source chain.
            other => CliError::Runtime(anyhow::anyhow!(other.to_string())),
        }
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

/// Reads `VIBE_THREADS`; unset means no cap.
fn thread_limit() -> Result<Option<usize>, CliError> {
    match std::env::var("VIBE_THREADS") {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(CliError::usage(format!("VIBE_THREADS: {e}"))),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(Some(n)),
            _ => Err(CliError::usage(format!("VIBE_THREADS: expected a positive integer, got {v:?}"))),
        },
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = thread_limit().and_then(|limit| {
        if let Some(n) = limit {
            vibe_core::linalg::set_thread_limit(n);
        }
        commands::run(cli.command)
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
