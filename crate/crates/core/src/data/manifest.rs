//! Tab-separated dataset manifest:
//! `image_path<TAB>mask_path<TAB>kind<TAB>seed<TAB>split`.
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use thiserror::Error;

use super::ForgeryKind;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("cannot read manifest {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: expected 5 tab-separated fields, found {found}")]
    FieldCount { line: usize, found: usize },
    #[error("line {line}: {reason}")]
    Field { line: usize, reason: String },
    #[error("sample {image} appears in both train and test splits")]
    SplitOverlap { image: String },
    #[error("line {line}: duplicate entry for {image}")]
    Duplicate { line: usize, image: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub image_path: String,
    pub mask_path: String,
    pub kind: ForgeryKind,
    pub seed: u64,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    /// Directory that relative paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    /// Parses manifest text. Blank lines and `#` comments are skipped.
    pub fn parse(text: &str) -> Result<Self, ManifestError> {
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        let mut splits: std::collections::HashMap<&str, Split> = std::collections::HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let trimmed = raw.trim_end_matches('\r');
            if trimmed.trim().is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split('\t').collect();
            if fields.len() != 5 {
                return Err(ManifestError::FieldCount {
                    line,
                    found: fields.len(),
                });
            }
            let bad = |reason: String| ManifestError::Field { line, reason };
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(bad("empty path".into()));
            }
            let kind = ForgeryKind::from_str(fields[2]).map_err(bad)?;
            let seed = fields[3]
                .parse::<u64>()
                .map_err(|e| bad(format!("seed `{}`: {e}", fields[3])))?;
            let split = Split::from_str(fields[4]).map_err(bad)?;
            if let Some(prev) = splits.insert(fields[0], split) {
                if prev != split {
                    return Err(ManifestError::SplitOverlap {
                        image: fields[0].to_string(),
                    });
                }
            }
            if !seen.insert((fields[0], split)) {
                return Err(ManifestError::Duplicate {
                    line,
                    image: fields[0].to_string(),
                });
            }
            entries.push(ManifestEntry {
                image_path: fields[0].to_string(),
                mask_path: fields[1].to_string(),
                kind,
                seed,
                split,
            });
        }
        Ok(DatasetManifest {
            entries,
            root: PathBuf::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|source| ManifestError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        let mut m = Self::parse(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn resolve(&self, p: &str) -> PathBuf {
        let p = Path::new(p);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Paths of entries whose image or mask file is missing.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        self.entries
            .iter()
            .flat_map(|e| [self.resolve(&e.image_path), self.resolve(&e.mask_path)])
            .filter(|p| !p.exists())
            .collect()
    }
}

impl fmt::Display for DatasetManifest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{}\t{}\t{}\t{}\t{}",
                e.image_path,
                e.mask_path,
                e.kind,
                e.seed,
                e.split.as_str()
            )?;
        }
        Ok(())
    }
}
