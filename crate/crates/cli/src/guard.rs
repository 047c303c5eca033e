//! Removes a command's partial outputs unless it finishes.

use std::fs;
use std::path::{Path, PathBuf};

pub struct OutputGuard {
    dir: PathBuf,
    created_dir: bool,
    artifacts: Vec<PathBuf>,
    keep_on_failure: Vec<PathBuf>,
    done: bool,
}

impl OutputGuard {
    /// Takes charge of `dir`. If the directory does not exist yet, all of it
    /// goes on failure; otherwise only the registered artifacts do.
    pub fn new(dir: &Path) -> Self {
        Self {
            dir: dir.to_path_buf(),
            created_dir: !dir.exists(),
            artifacts: Vec::new(),
            keep_on_failure: Vec::new(),
            done: false,
        }
    }

    pub fn artifact(&mut self, path: PathBuf) -> PathBuf {
        self.artifacts.push(path.clone());
        path
    }

    /// Diagnostics that should survive a failed run.
    pub fn keep(&mut self, path: PathBuf) {
        self.keep_on_failure.push(path);
    }

    pub fn finish(mut self) {
        self.done = true;
    }

    fn remove(path: &Path) {
        let _ = if path.is_dir() {
            fs::remove_dir_all(path)
        } else {
            fs::remove_file(path)
        };
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.done {
            return;
        }
        let kept = |p: &Path| self.keep_on_failure.iter().any(|k| k == p && k.exists());
        if self.created_dir {
            if let Ok(entries) = fs::read_dir(&self.dir) {
                for e in entries.flatten() {
                    if !kept(&e.path()) {
                        Self::remove(&e.path());
                    }
                }
            }
            let _ = fs::remove_dir(&self.dir);
        } else {
            for a in &self.artifacts {
                if !kept(a) {
                    Self::remove(a);
                }
            }
        }
    }
}
