//! Batch front-end: ingest CSV panels, run the pipeline stages and write
//! CSV/JSON outputs with a replayable manifest.

pub mod config;
pub mod error;
pub mod ingest;
pub mod output;
pub mod pipeline;

use std::path::Path;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use output::Manifest;

/// Runs `command` and writes its outputs and manifest into `out_dir`.
/// Nothing is left behind when a stage fails.
pub fn run(command: &str, cfg: &RunConfig, out_dir: &Path, workers: Option<usize>) -> Result<Manifest> {
    if !pipeline::COMMANDS.contains(&command) {
        return Err(CliError::Config(format!("unknown subcommand '{command}'")));
    }
    let mut out = output::Outputs::new(out_dir)?;
    pipeline::run_command(command, cfg, &mut out)?;
    out.commit(command, cfg, workers)
}
