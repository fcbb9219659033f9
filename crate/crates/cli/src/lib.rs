//! Configuration and dataset-level stages behind the `aumn` executable.

pub mod config;
pub mod pipeline;

pub use config::RunConfig;
