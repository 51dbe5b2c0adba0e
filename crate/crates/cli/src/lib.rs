//! Command-line front end: config parsing, artifact output, and subcommands.

pub mod artifacts;
pub mod config;
pub mod run;
