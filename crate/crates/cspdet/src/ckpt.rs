//! Checkpoint files inside a run directory, named `ckpt-<step>.bin`.

use std::path::{Path, PathBuf};

use cspdet_core::checkpoint::Checkpoint;

use crate::error::{CliError, CliResult};

pub fn file_name(step: u64) -> String {
    format!("ckpt-{step:08}.bin")
}

/// Written to a temporary name first so a crash never leaves a torn file
/// under the final name.
pub fn save(path: &Path, c: &Checkpoint) -> CliResult<()> {
    let tmp = path.with_extension("bin.tmp");
    std::fs::write(&tmp, c.to_bytes()).map_err(|e| CliError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load(path: &Path) -> CliResult<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

/// The checkpoint with the highest step in `dir`.
pub fn latest(dir: &Path) -> CliResult<Option<(u64, PathBuf)>> {
    let rd = match std::fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(CliError::io(dir, e)),
    };
    let mut best: Option<(u64, PathBuf)> = None;
    for entry in rd {
        let entry = entry.map_err(|e| CliError::io(dir, e))?;
        let name = entry.file_name();
        let Some(step) = name.to_str().and_then(|n| n.strip_prefix("ckpt-")).and_then(|n| n.strip_suffix(".bin")).and_then(|n| n.parse().ok())
        else {
            continue;
        };
        if best.as_ref().is_none_or(|b| step > b.0) {
            best = Some((step, entry.path()));
        }
    }
    Ok(best)
}
