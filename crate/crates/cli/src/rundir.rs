use std::fs::OpenOptions;
use std::path::{Path, PathBuf};

use crate::CliError;

pub const LOCK_FILE: &str = ".lock";

/// Exclusive ownership of an output directory for the life of the value.
#[derive(Debug)]
pub struct RunLock {
    lock: PathBuf,
}

impl RunLock {
    /// Creates `dir` if needed. A directory that already holds anything is
    /// refused unless `force`; a live lock file is refused regardless.
    pub fn acquire(dir: &Path, force: bool) -> Result<Self, CliError> {
        let lock = dir.join(LOCK_FILE);
        if lock.exists() {
            return Err(CliError::data(format!(
                "{} is locked by another process (remove {} if that process is gone)",
                dir.display(),
                lock.display()
            )));
        }
        if dir.exists() {
            let nonempty = std::fs::read_dir(dir)
                .map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?
                .next()
                .is_some();
            if nonempty && !force {
                return Err(CliError::data(format!(
                    "{} already exists and is not empty; pass --force to overwrite",
                    dir.display()
                )));
            }
        }
        std::fs::create_dir_all(dir).map_err(|e| CliError::data(format!("{}: {e}", dir.display())))?;
        OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&lock)
            .map_err(|e| CliError::data(format!("{}: {e}", lock.display())))?;
        Ok(Self { lock })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.lock);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn refuses_nonempty_and_locked_dirs() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("run");
        let held = RunLock::acquire(&dir, false).unwrap();
        assert!(RunLock::acquire(&dir, true).is_err());
        drop(held);
        assert!(!dir.join(LOCK_FILE).exists());
        std::fs::write(dir.join("x"), "1").unwrap();
        assert!(RunLock::acquire(&dir, false).is_err());
        assert!(RunLock::acquire(&dir, true).is_ok());
    }
}
