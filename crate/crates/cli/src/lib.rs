//! Command-line pipeline around the `difrec` library: configuration,
//! checkpoints, dataset files and the stage commands.

pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod data;
pub mod error;

pub use commands::{run, Command, Metrics};
pub use config::RunConfig;
pub use error::CliError;

/// `metric=<name> value=<float>` lines.
pub fn format_metrics(metrics: &Metrics) -> String {
    metrics.iter().map(|(k, v)| format!("metric={} value={}\n", k, v)).collect()
}
