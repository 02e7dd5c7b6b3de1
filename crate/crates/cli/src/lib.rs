//! Command-line front end for the layer-mapping search: configuration,
//! run directories, caches and reports.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod report;

pub use commands::{cmd_distill, cmd_enumerate, cmd_report, cmd_search, cmd_verify, DistillArgs, SearchArgs, SearchOutcome};
pub use config::{ConfigError, RunConfig};
