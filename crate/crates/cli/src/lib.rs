//! IO, configuration and execution support for the `smsa` runner.

pub mod config;
pub mod error;
pub mod exec;
pub mod features;
pub mod format;
pub mod ingest;
pub mod runner;
