//! Command-line front end and file formats for `lirt-core`.

pub mod commands;
pub mod config;
pub mod csv_io;
pub mod error;
pub mod exec;

pub use lirt_core as core;

pub use commands::{run, Command, Manifest};
pub use config::{Overrides, RunConfig};
pub use csv_io::{load_long_csv, write_long_csv, ColumnMapping};
pub use error::{CliError, CliResult};
pub use exec::RayonExecutor;
