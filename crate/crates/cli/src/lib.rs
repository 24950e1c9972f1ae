//! Command-line entry points and the tutor HTTP service.

pub mod commands;
pub mod error;
pub mod server;

pub use commands::{run, Cli};
pub use error::CliError;
