//! Staged output writing and run manifests.
//!
//! Commands compute everything in memory, then hand the encoded files to
//! [`Staged::commit`], which refuses to clobber without `--force`, never
//! writes over an input, and removes whatever it wrote if a later file fails.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::Value;
use tempfile::NamedTempFile;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default)]
pub struct Staged {
    files: Vec<(String, Vec<u8>)>,
}

impl Staged {
    pub fn add(&mut self, name: impl Into<String>, bytes: Vec<u8>) {
        self.files.push((name.into(), bytes));
    }

    pub fn add_json<T: Serialize>(&mut self, name: impl Into<String>, value: &T) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)
            .map_err(|e| CliError::io(format!("cannot serialize output: {e}")))?;
        bytes.push(b'\n');
        self.add(name, bytes);
        Ok(())
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.files.iter().map(|(n, _)| n.as_str())
    }

    pub fn commit(self, dir: &Path, inputs: &[PathBuf], force: bool) -> CliResult<Vec<PathBuf>> {
        if dir.exists() && !dir.is_dir() {
            return Err(CliError::usage(format!(
                "{} exists and is not a directory",
                dir.display()
            )));
        }
        let protected: Vec<PathBuf> = inputs
            .iter()
            .filter_map(|p| fs::canonicalize(p).ok())
            .collect();
        let mut targets = Vec::with_capacity(self.files.len());
        for (name, _) in &self.files {
            let path = dir.join(name);
            if path.exists() {
                let canon = fs::canonicalize(&path).unwrap_or_else(|_| path.clone());
                if protected.contains(&canon) {
                    return Err(CliError::usage(format!(
                        "refusing to overwrite input {}",
                        path.display()
                    )));
                }
                if !force {
                    return Err(CliError::usage(format!(
                        "{} already exists; pass --force to overwrite",
                        path.display()
                    )));
                }
            }
            targets.push(path);
        }
        fs::create_dir_all(dir)
            .map_err(|e| CliError::io(format!("cannot create {}: {e}", dir.display())))?;

        let mut written: Vec<PathBuf> = Vec::new();
        for ((_, bytes), target) in self.files.iter().zip(&targets) {
            if let Err(e) = write_atomic(dir, target, bytes) {
                for p in &written {
                    let _ = fs::remove_file(p);
                }
                return Err(CliError::io(format!(
                    "cannot write {}: {e}",
                    target.display()
                )));
            }
            written.push(target.clone());
        }
        Ok(written)
    }
}

fn write_atomic(dir: &Path, target: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(target).map_err(|e| e.error)?;
    Ok(())
}

#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub tool_version: &'static str,
    /// Every setting the command ran with; valid input for `--config`.
    pub config: Value,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub seed: Option<u64>,
    pub threads: usize,
    pub duration_secs: f64,
}

pub const MANIFEST_NAME: &str = "manifest.json";
