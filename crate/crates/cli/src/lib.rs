//! Command-line pipeline around the `mafnet` library: phantom datasets,
//! training, synthesis, evaluation tables and figures.

pub mod cli;
pub mod commands;
pub mod config;
pub mod error;

pub use cli::{run, Cli};
pub use error::{CliError, Result};
