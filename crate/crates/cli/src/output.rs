//! Staged output trees. Files are written under a temporary directory next
//! to the destination and moved into place only when the whole command has
//! succeeded, so a failed run never leaves partial results behind.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use tempfile::TempDir;

pub struct StagedDir {
    dest: PathBuf,
    tmp: TempDir,
}

impl StagedDir {
    pub fn begin(dest: &Path) -> anyhow::Result<Self> {
        let parent = match dest.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        };
        fs::create_dir_all(&parent).with_context(|| format!("creating {}", parent.display()))?;
        let tmp = tempfile::Builder::new()
            .prefix(".bsm-staging-")
            .tempdir_in(&parent)
            .with_context(|| format!("creating staging area in {}", parent.display()))?;
        Ok(Self {
            dest: dest.to_path_buf(),
            tmp,
        })
    }

    pub fn path(&self) -> &Path {
        self.tmp.path()
    }

    /// Writes `bytes` at `rel` inside the staging area, creating parents.
    pub fn write(&self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> anyhow::Result<()> {
        let path = self.tmp.path().join(rel.as_ref());
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes).with_context(|| format!("writing {}", rel.as_ref().display()))
    }

    /// Moves every staged top-level entry into the destination. Entries of
    /// the destination that the run did not produce are left untouched.
    pub fn promote(self) -> anyhow::Result<PathBuf> {
        let dest = self.dest.clone();
        if !dest.exists() {
            let staged = self.tmp.keep();
            fs::rename(&staged, &dest)
                .with_context(|| format!("moving results to {}", dest.display()))?;
            return Ok(dest);
        }
        if !dest.is_dir() {
            anyhow::bail!("{} exists and is not a directory", dest.display());
        }
        let mut entries: Vec<_> = fs::read_dir(self.tmp.path())?
            .collect::<Result<Vec<_>, _>>()?
            .into_iter()
            .map(|e| e.file_name())
            .collect();
        entries.sort();
        for name in entries {
            let from = self.tmp.path().join(&name);
            let to = dest.join(&name);
            if to.is_dir() && from.is_dir() {
                fs::remove_dir_all(&to).with_context(|| format!("replacing {}", to.display()))?;
            }
            fs::rename(&from, &to).with_context(|| format!("moving {}", to.display()))?;
        }
        Ok(dest)
    }
}

/// File-name-safe rendering of a model id.
pub fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '.' | '-' | '_') {
                c
            } else {
                '_'
            }
        })
        .collect()
}
