//! Staged, all-or-nothing writes into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use edict::Manifest;
use tempfile::TempDir;

/// Files are written into a hidden staging directory under `out` and moved
/// into place only once the command has succeeded.
pub struct Staging {
    out: PathBuf,
    stage: TempDir,
    files: Vec<String>,
    overwrite: bool,
}

impl Staging {
    /// Fails before any work is done if one of `planned` already exists.
    pub fn new(out: &Path, overwrite: bool, planned: &[String]) -> Result<Self> {
        fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        if !overwrite {
            let clashes: Vec<&str> = planned
                .iter()
                .filter(|f| out.join(f).exists())
                .map(String::as_str)
                .collect();
            if !clashes.is_empty() {
                bail!(
                    "refusing to overwrite existing output in {}: {} (pass --overwrite to replace)",
                    out.display(),
                    clashes.join(", ")
                );
            }
        }
        let stage = tempfile::Builder::new()
            .prefix(".staging-")
            .tempdir_in(out)
            .with_context(|| format!("creating staging directory in {}", out.display()))?;
        Ok(Self {
            out: out.to_path_buf(),
            stage,
            files: Vec::new(),
            overwrite,
        })
    }

    /// Path to write `name` to; the file is committed by [`Staging::commit`].
    pub fn path(&mut self, name: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        self.stage.path().join(name)
    }

    pub fn write_json<T: serde::Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {name}"))
    }

    pub fn write_text(&mut self, name: &str, text: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, text).with_context(|| format!("writing {name}"))
    }

    /// Hashes every staged file into `manifest`, writes it as
    /// `manifest_{command}.json` and moves everything into place.
    pub fn commit(mut self, mut manifest: Manifest) -> Result<Vec<PathBuf>> {
        let staged: Vec<String> = self.files.iter().filter(|f| self.stage.path().join(f).exists()).cloned().collect();
        for f in &staged {
            manifest.record(self.stage.path(), f)?;
        }
        let manifest_name = format!("manifest_{}.json", manifest.command);
        self.write_json(&manifest_name, &manifest)?;
        let mut names = staged;
        names.push(manifest_name);
        if !self.overwrite {
            // Another process may have raced us since the up-front check.
            if let Some(f) = names.iter().find(|f| self.out.join(f).exists()) {
                bail!("refusing to overwrite existing output {} (pass --overwrite to replace)", self.out.join(f).display());
            }
        }
        let mut written = Vec::with_capacity(names.len());
        for f in &names {
            let dest = self.out.join(f);
            fs::rename(self.stage.path().join(f), &dest).with_context(|| format!("moving {f} into {}", self.out.display()))?;
            written.push(dest);
        }
        Ok(written)
    }
}
