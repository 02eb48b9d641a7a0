//! Configuration and verb implementations behind the `mocca` binary.

pub mod commands;
pub mod config;

pub use config::RunConfig;
