//! Checkpoint format, experiment configuration and the `ders` pipeline driver.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod pipeline;

pub use error::{CliError, CliResult};
