//! Files, configuration and the command-line pipeline around `swp-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{CliError, Result};
