//! Artifact directory layout, config-hash headers and the run lock.
//!
//! ```text
//! <out>/graph/graph.jsonl
//! <out>/cots/teacher.jsonl, student.jsonl, augmented.jsonl (+ *_lambda0 for ablation)
//! <out>/checkpoints/student.ckpt, model_seed<S>.ckpt
//! <out>/cache/cache.bin
//! <out>/reports/*.csv, *.txt
//! ```
//!
//! Every file starts with one header line `#fraudcot kind=<kind> config=<hash>`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::CliError;

pub const DIRS: [&str; 5] = ["graph", "cots", "checkpoints", "cache", "reports"];

pub struct Artifact {
    pub path: PathBuf,
    pub kind: &'static str,
    /// Stage that writes this artifact.
    pub producer: &'static str,
    pub hash: String,
}

impl Artifact {
    pub fn new(root: &Path, rel: &str, kind: &'static str, producer: &'static str, hash: String) -> Self {
        Self {
            path: root.join(rel),
            kind,
            producer,
            hash,
        }
    }

    fn header(&self) -> String {
        format!("#fraudcot kind={} config={}\n", self.kind, self.hash)
    }

    /// Writes header and payload to a temporary file, then renames it into place.
    pub fn write(&self, payload: &[u8]) -> Result<(), CliError> {
        let tmp = self.path.with_extension("tmp");
        let ctx = format!("writing {}", self.path.display());
        let mut f = fs::File::create(&tmp).map_err(CliError::io(ctx.clone()))?;
        f.write_all(self.header().as_bytes()).map_err(CliError::io(ctx.clone()))?;
        f.write_all(payload).map_err(CliError::io(ctx.clone()))?;
        f.sync_all().map_err(CliError::io(ctx.clone()))?;
        fs::rename(&tmp, &self.path).map_err(CliError::io(ctx))
    }

    /// Payload after a header matching this artifact's kind and hash.
    pub fn read(&self) -> Result<Vec<u8>, CliError> {
        if !self.path.exists() {
            return Err(CliError::Missing {
                path: self.path.clone(),
                producer: self.producer,
            });
        }
        let bytes = fs::read(&self.path).map_err(CliError::io(format!("reading {}", self.path.display())))?;
        let split = bytes.iter().position(|&b| b == b'\n').map_or(bytes.len(), |i| i + 1);
        if bytes[..split] != *self.header().as_bytes() {
            return Err(CliError::Stale {
                path: self.path.clone(),
                producer: self.producer,
            });
        }
        Ok(bytes[split..].to_vec())
    }

    /// True when the artifact exists with a matching header.
    pub fn is_current(&self) -> bool {
        self.read().is_ok()
    }
}

pub fn ensure_layout(root: &Path) -> Result<(), CliError> {
    for d in DIRS {
        let p = root.join(d);
        fs::create_dir_all(&p).map_err(CliError::io(format!("creating {}", p.display())))?;
    }
    Ok(())
}

/// Exclusive lock on an output directory, released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(root: &Path) -> Result<Self, CliError> {
        let path = root.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Locked { dir: root.into() }),
            Err(e) => Err(CliError::io(format!("creating {}", path.display()))(e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}
