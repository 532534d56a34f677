//! Files, configuration and command line around `dmole-core`.
//!
//! A run directory holds the resolved config, a manifest, a log, the stream
//! history as JSON, a bit-exact checkpoint and rendered reports. See
//! [`rundir`] for the layout.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod datagen;
pub mod error;
pub mod report;
pub mod run;
pub mod rundir;
pub mod sweep;

pub use config::RunConfig;
pub use error::{CliError, Result};
