//! Run manifests: every command that writes artifacts also writes a
//! `manifest.txt` recording what produced them — the command, the
//! effective configuration, and an FNV-64 hash per artifact — enough to
//! replay the run and verify nothing drifted.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use zhyper::{Error, Result};

/// FNV-1a over raw bytes; the same cheap fingerprint the model
/// checkpoints use for their integrity lines.
pub fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub struct RunManifest {
    pub command: String,
    /// (key, value) settings the run actually used, flags already folded in.
    pub settings: Vec<(String, String)>,
    /// Paths (relative to the manifest) of everything the run wrote.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str) -> RunManifest {
        RunManifest {
            command: command.to_string(),
            settings: Vec::new(),
            artifacts: Vec::new(),
        }
    }

    pub fn setting(&mut self, key: &str, value: impl std::fmt::Display) {
        self.settings.push((key.to_string(), value.to_string()));
    }

    pub fn artifact(&mut self, path: impl Into<PathBuf>) {
        self.artifacts.push(path.into());
    }

    /// Hash every artifact (a file, or every file under a directory)
    /// and write `manifest.txt` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.write_named(dir, "manifest.txt")
    }

    /// As [`RunManifest::write`] but under a different file name, for
    /// commands that write into a directory some other run owns.
    pub fn write_named(&self, dir: &Path, file_name: &str) -> Result<()> {
        let mut out = String::new();
        writeln!(out, "command {}", self.command).unwrap();
        for (k, v) in &self.settings {
            writeln!(out, "setting {k} {v}").unwrap();
        }
        for rel in &self.artifacts {
            for file in files_under(&dir.join(rel))? {
                let bytes = std::fs::read(&file)
                    .map_err(|e| Error::load(&file, e.to_string()))?;
                let name = file
                    .strip_prefix(dir)
                    .unwrap_or(&file)
                    .to_string_lossy()
                    .replace('\\', "/");
                writeln!(out, "artifact {name} fnv64 {:016x}", fnv64(&bytes)).unwrap();
            }
        }
        let path = dir.join(file_name);
        std::fs::write(&path, out).map_err(|e| Error::load(&path, e.to_string()))
    }
}

/// The file itself, or all regular files under a directory, sorted.
fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    if path.is_file() {
        return Ok(vec![path.to_path_buf()]);
    }
    if !path.is_dir() {
        return Err(Error::load(path, "declared artifact does not exist".to_string()));
    }
    let mut files = Vec::new();
    let mut stack = vec![path.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries =
            std::fs::read_dir(&dir).map_err(|e| Error::load(&dir, e.to_string()))?;
        for entry in entries {
            let entry = entry.map_err(|e| Error::load(&dir, e.to_string()))?;
            let p = entry.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                files.push(p);
            }
        }
    }
    files.sort();
    Ok(files)
}
