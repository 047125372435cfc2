//! Dataset manifests: one `<split> <path>` pair per line, `#` comments.
//! Relative paths are resolved against the manifest's directory.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Result, TunesError};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?} (train|val|test)")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub path: PathBuf,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        let mut offset = 0;
        for raw in text.split_inclusive('\n') {
            let line = raw.split('#').next().unwrap_or("").trim();
            if !line.is_empty() {
                let (split, path) = line
                    .split_once(char::is_whitespace)
                    .ok_or_else(|| TunesError::parse(offset, "expected `<split> <path>`"))?;
                let split = split.parse().map_err(|e: String| TunesError::parse(offset, e))?;
                let path = path.trim();
                if path.is_empty() {
                    return Err(TunesError::parse(offset, "missing path"));
                }
                entries.push(ManifestEntry {
                    split,
                    path: PathBuf::from(path),
                });
            }
            offset += raw.len();
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(&e.path)) {
            return Err(TunesError::config(format!(
                "{} is listed more than once; splits must not overlap",
                dup.path.display()
            )));
        }
        Ok(Self { entries })
    }

    /// Reads a manifest and makes relative paths absolute w.r.t. its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let mut m = Self::parse(&std::fs::read_to_string(path)?)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for e in &mut m.entries {
            if e.path.is_relative() {
                e.path = base.join(&e.path);
            }
        }
        Ok(m)
    }

    pub fn push(&mut self, split: Split, path: impl Into<PathBuf>) {
        self.entries.push(ManifestEntry {
            split,
            path: path.into(),
        });
    }

    pub fn paths(&self, split: Split) -> Vec<&Path> {
        self.entries
            .iter()
            .filter(|e| e.split == split)
            .map(|e| e.path.as_path())
            .collect()
    }

    /// Paths of a split that must not be empty.
    pub fn require(&self, split: Split) -> Result<Vec<&Path>> {
        let paths = self.paths(split);
        if paths.is_empty() {
            return Err(TunesError::config(format!("manifest has no {split} entries")));
        }
        Ok(paths)
    }
}

impl fmt::Display for Manifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{} {}", e.split, e.path.display())?;
        }
        Ok(())
    }
}
