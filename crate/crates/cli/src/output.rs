//! Output files are never overwritten without `--force`, and a failed
//! command leaves nothing half-written behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use crate::Exit;

/// Fails with a configuration error if `path` exists and `force` is off.
pub fn guard(path: &Path, force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Exit::config(format!("{} exists; pass --force to overwrite", path.display())).into());
    }
    Ok(())
}

/// Writes through a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(e).with_context(|| format!("writing {}", tmp.display()));
    }
    fs::rename(&tmp, path).with_context(|| format!("renaming into {}", path.display()))
}

/// Tracks files created by a command so they can be removed if it fails.
#[derive(Default)]
pub struct Created {
    files: Vec<PathBuf>,
    dir: Option<PathBuf>,
    done: bool,
}

impl Created {
    /// Creates `dir` if needed, remembering whether it is ours to remove.
    pub fn in_dir(dir: &Path) -> Result<Self> {
        let fresh = !dir.exists();
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Created { files: Vec::new(), dir: fresh.then(|| dir.to_path_buf()), done: false })
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        write_atomic(path, bytes)?;
        self.files.push(path.to_path_buf());
        Ok(())
    }

    pub fn commit(mut self) {
        self.done = true;
    }
}

impl Drop for Created {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if let Some(dir) = &self.dir {
            let _ = fs::remove_dir_all(dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uncommitted_files_are_removed() {
        let root = tempfile::tempdir().unwrap();
        let dir = root.path().join("out");
        {
            let mut c = Created::in_dir(&dir).unwrap();
            c.write(&dir.join("a"), b"x").unwrap();
        }
        assert!(!dir.exists());
        {
            let mut c = Created::in_dir(&dir).unwrap();
            c.write(&dir.join("a"), b"x").unwrap();
            c.commit();
        }
        assert_eq!(fs::read(dir.join("a")).unwrap(), b"x");
    }

    #[test]
    fn existing_output_needs_force() {
        let root = tempfile::tempdir().unwrap();
        let path = root.path().join("f");
        guard(&path, false).unwrap();
        write_atomic(&path, b"1").unwrap();
        assert!(guard(&path, false).is_err());
        guard(&path, true).unwrap();
    }
}
