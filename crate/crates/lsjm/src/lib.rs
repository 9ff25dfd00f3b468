//! File formats, run configuration, thread-pool execution and the commands
//! behind the `lsjm` binary. The statistics live in [`lsjm_core`].

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod exec;
pub mod report;

pub use config::RunConfig;
pub use error::{Error, Result};
