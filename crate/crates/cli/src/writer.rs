//! Every command writes through one `OutputWriter`. Files land in a staging
//! directory; `commit` moves the whole directory to `<out>/<name>`, and a
//! failed command moves it to `<out>/quarantine/<name>` instead.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

#[derive(Debug)]
pub struct OutputWriter {
    root: PathBuf,
    name: String,
    staging: PathBuf,
    written: Vec<PathBuf>,
}

impl OutputWriter {
    pub fn new(root: &Path, name: &str) -> Result<Self> {
        let staging = root.join(format!(".staging-{name}"));
        if staging.exists() {
            fs::remove_dir_all(&staging).with_context(|| format!("clearing {}", staging.display()))?;
        }
        fs::create_dir_all(&staging).with_context(|| format!("output directory {} is not writable", root.display()))?;
        Ok(Self {
            root: root.to_path_buf(),
            name: name.to_string(),
            staging,
            written: Vec::new(),
        })
    }

    /// Staging path for `rel`, for writers that need a real path (manifest
    /// export). Parent directories are created.
    pub fn path(&mut self, rel: &str) -> Result<PathBuf> {
        let p = self.staging.join(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        self.written.push(PathBuf::from(rel));
        Ok(p)
    }

    pub fn write(&mut self, rel: &str, bytes: &[u8]) -> Result<()> {
        let p = self.path(rel)?;
        fs::write(&p, bytes).with_context(|| format!("writing {}", p.display()))
    }

    pub fn write_json<T: serde::Serialize>(&mut self, rel: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(rel, text.as_bytes())
    }

    pub fn final_dir(&self) -> PathBuf {
        self.root.join(&self.name)
    }

    pub fn quarantine_dir(&self) -> PathBuf {
        self.root.join("quarantine").join(&self.name)
    }

    fn move_to(&self, dest: &Path) -> Result<PathBuf> {
        if dest.exists() {
            fs::remove_dir_all(dest).with_context(|| format!("replacing {}", dest.display()))?;
        }
        if let Some(parent) = dest.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::rename(&self.staging, dest).with_context(|| format!("moving outputs to {}", dest.display()))?;
        Ok(dest.to_path_buf())
    }

    pub fn commit(self) -> Result<PathBuf> {
        self.move_to(&self.final_dir())
    }

    /// Moves whatever was written so far aside. Returns the quarantine
    /// directory, or `None` when nothing had been written.
    pub fn quarantine(self) -> Result<Option<PathBuf>> {
        if self.written.is_empty() {
            fs::remove_dir_all(&self.staging).ok();
            return Ok(None);
        }
        self.move_to(&self.quarantine_dir()).map(Some)
    }
}

/// Runs `body` against a fresh writer and commits on success. On error the
/// partial outputs are quarantined and the original error is returned with
/// the quarantine location attached.
pub fn with_writer<T>(root: &Path, name: &str, body: impl FnOnce(&mut OutputWriter) -> Result<T>) -> Result<(T, PathBuf)> {
    let mut w = OutputWriter::new(root, name)?;
    match body(&mut w) {
        Ok(v) => Ok((v, w.commit()?)),
        Err(e) => match w.quarantine() {
            Ok(Some(q)) => Err(e.context(format!("partial outputs moved to {}", q.display()))),
            _ => Err(e),
        },
    }
}
