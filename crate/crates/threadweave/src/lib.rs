//! File formats, configuration and subcommands around `threadweave-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;

pub use error::{Error, Result};
