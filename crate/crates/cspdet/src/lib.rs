//! Command-line front end for the `cspdet-core` instance segmenter: config
//! files, COCO and image I/O, checkpoints, metric logs and the subcommands.

pub mod ckpt;
pub mod coco;
pub mod commands;
pub mod config;
pub mod dataset;
pub mod error;
pub mod imageio;
pub mod metrics_log;
pub mod overlay;
pub mod report;

pub use config::RunConfig;
pub use error::{CliError, CliResult};

/// Caps the global rayon pool at `CSPDET_THREADS` when set. Call once,
/// before any parallel work.
pub fn init_threads() -> CliResult<Option<usize>> {
    let Ok(v) = std::env::var("CSPDET_THREADS") else { return Ok(None) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| CliError::Config(format!("CSPDET_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::Other(e.to_string()))?;
    Ok(Some(n))
}
