//! Library surface of the command-line driver: configuration schema and the
//! subcommand implementations, exposed so integration tests can call the
//! report builders directly.

pub mod commands;
pub mod config;
