//! Library side of the `dream-lab` binary: config parsing, cached stages
//! and subcommand handlers.

pub mod commands;
pub mod config;
pub mod stages;

use std::fmt;

pub use commands::{execute, run, Cli};

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), " (", env!("DREAMLAB_GIT_DESCRIBE"), ")");

/// Marks an error as a validation failure (exit code 1).
#[derive(Debug, Clone, Copy)]
pub struct Invalid;

impl fmt::Display for Invalid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("invalid input")
    }
}

pub fn invalid(e: impl Into<anyhow::Error>) -> anyhow::Error {
    e.into().context(Invalid)
}

/// 1 for validation errors, 2 for everything else.
pub fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<Invalid>().is_some() {
        1
    } else {
        2
    }
}
