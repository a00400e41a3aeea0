//! Command-line front end and HTTP service for the artifact-reduction pipeline.

pub mod commands;
pub mod server;

use clap::Parser;
use osar_core::Error;

#[derive(Debug, Parser)]
#[command(
    name = "osar",
    version,
    about = "Single-image additive artifact reduction"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: commands::Command,
}

/// Process exit status for a failed command.
pub mod exit {
    pub const FAILURE: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const NO_ARTIFACTS: i32 = 3;
    pub const IO: i32 = 4;
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::NoArtifactPatches => exit::NO_ARTIFACTS,
        Error::Io { .. } | Error::Format(_) | Error::Json(_) => exit::IO,
        Error::Config(_) | Error::Size(_) => exit::USAGE,
        _ => exit::FAILURE,
    }
}
