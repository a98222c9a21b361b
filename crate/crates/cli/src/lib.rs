//! Command-line front end of the architecture search pipeline.

pub mod commands;
pub mod config;

pub use config::RunConfig;
