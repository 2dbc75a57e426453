//! Library side of the `tenslora` command: configuration documents,
//! checkpoint persistence and the parameter table.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod table;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
