//! Atomic output helpers: write into a sibling temp location, then rename.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

fn parent_of(dest: &Path) -> Result<&Path> {
    let parent = dest
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    Ok(parent)
}

/// Build a directory with `fill` and move it to `dest`, replacing any
/// previous directory there.
pub fn write_dir_atomically(dest: &Path, fill: impl FnOnce(&Path) -> Result<()>) -> Result<()> {
    let parent = parent_of(dest)?;
    let tmp = tempfile::Builder::new()
        .prefix(".partial-")
        .tempdir_in(parent)
        .map_err(|e| Error::io(parent, e))?;
    fill(tmp.path())?;
    if dest.exists() {
        fs::remove_dir_all(dest).map_err(|e| Error::io(dest, e))?;
    }
    let staged = tmp.keep();
    fs::rename(&staged, dest).map_err(|e| Error::io(dest, e))
}

pub fn write_file_atomically(dest: &Path, bytes: &[u8]) -> Result<()> {
    use std::io::Write;
    let parent = parent_of(dest)?;
    let mut tmp = tempfile::NamedTempFile::new_in(parent).map_err(|e| Error::io(parent, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(dest, e))?;
    tmp.persist(dest).map_err(|e| Error::io(dest, e.error))?;
    Ok(())
}
