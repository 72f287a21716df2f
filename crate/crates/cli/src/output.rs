//! Output directory bookkeeping. Everything a run writes is tracked so a
//! failed run can remove what it left behind.

use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{CliError, CliResult};

#[derive(Debug)]
pub struct Outputs {
    dir: PathBuf,
    created_dir: bool,
    written: Vec<PathBuf>,
}

impl Outputs {
    pub fn create(dir: &Path) -> CliResult<Self> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(|e| {
            CliError::Config(format!(
                "output directory {} is not writable: {e}",
                dir.display()
            ))
        })?;
        Ok(Self {
            dir: dir.to_path_buf(),
            created_dir,
            written: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult<PathBuf> {
        let path = self.path(name);
        fs::write(&path, contents)?;
        if !self.written.contains(&path) {
            self.written.push(path.clone());
        }
        Ok(path)
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> CliResult<PathBuf> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
        text.push('\n');
        self.write(name, text)
    }

    /// Registers a file written by someone else on this run's behalf.
    pub fn track(&mut self, path: PathBuf) {
        if !self.written.contains(&path) {
            self.written.push(path);
        }
    }

    /// Removes every file written so far, and the directory if this run
    /// created it.
    pub fn discard(self) {
        for path in &self.written {
            let _ = fs::remove_file(path);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn discard_removes_only_own_files() {
        let root = tempfile::tempdir().unwrap();
        fs::write(root.path().join("keep.txt"), "x").unwrap();
        let mut out = Outputs::create(root.path()).unwrap();
        out.write("a.txt", "1").unwrap();
        out.discard();
        assert!(root.path().join("keep.txt").exists());
        assert!(!root.path().join("a.txt").exists());

        let fresh = root.path().join("new");
        let mut out = Outputs::create(&fresh).unwrap();
        out.write_json("b.json", &[1, 2]).unwrap();
        out.discard();
        assert!(!fresh.exists());
    }
}
