//! Configuration, commands and image output for the `infogan-dp` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod grid;

pub use commands::run;
pub use config::{CodeRef, Command, DataSource, RunConfig, TransportKind};
pub use error::CliError;
pub use grid::Grid;
