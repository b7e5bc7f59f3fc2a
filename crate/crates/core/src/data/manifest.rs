//! Tab-separated image lists: `relative/path<TAB>label`, `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Path relative to the manifest root; doubles as the sample id.
    pub path: String,
    pub label: u8,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            entries: Vec::new(),
        }
    }

    /// Parse manifest text; `source` names the file in errors.
    pub fn parse(text: &str, root: impl Into<PathBuf>, source: &Path) -> Result<Self> {
        let mut m = Self::new(root);
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim_end_matches('\r');
            if line.trim().is_empty() || line.trim_start().starts_with('#') {
                continue;
            }
            let bad = |detail: String| Error::Malformed {
                path: source.to_path_buf(),
                detail: format!("line {}: {detail}", i + 1),
            };
            let (path, label) = line
                .split_once('\t')
                .ok_or_else(|| bad("expected `path<TAB>label`".into()))?;
            let label = match label.trim() {
                "0" => 0,
                "1" => 1,
                other => return Err(bad(format!("label must be 0 or 1, got `{other}`"))),
            };
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            m.entries.push(ManifestEntry {
                path: path.to_string(),
                label,
            });
        }
        Ok(m)
    }

    /// Read a manifest; entries resolve relative to its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# path\tlabel\n");
        for e in &self.entries {
            let _ = writeln!(out, "{}\t{}", e.path, e.label);
        }
        out
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        self.root.join(&entry.path)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}
