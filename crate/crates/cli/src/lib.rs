//! Command-line front end: TOML run configs in, CSV and JSON out.

pub mod commands;
pub mod config;

pub use commands::{exit_code, run, Command, Summary};
pub use config::RunConfig;
