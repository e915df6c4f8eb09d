//! Atomic file output.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{HarnessError, Result};

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| HarnessError::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| HarnessError::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| HarnessError::io(path, e))?;
    tmp.persist(path).map_err(|e| HarnessError::io(path, e.error))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| HarnessError::io(path, e))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| HarnessError::io(path, e))
}
