//! JSON-lines clip lists.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub clip_id: String,
    /// Relative paths are resolved against the manifest's directory.
    pub path: String,
    pub label: u32,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let m = Self { entries };
        m.check_unique()?;
        Ok(m)
    }

    fn check_unique(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.clip_id.as_str()) {
                return Err(Error::Input(format!("duplicate clip_id {:?}", e.clip_id)));
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Input(format!("manifest line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        Self::new(entries)
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fsutil::read(path)?;
        let text = String::from_utf8(bytes)
            .map_err(|_| Error::Input(format!("{} is not UTF-8", path.display())))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fsutil::write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Number of distinct labels, taken as `max label + 1`.
    pub fn num_classes(&self) -> usize {
        self.entries.iter().map(|e| e.label as usize + 1).max().unwrap_or(0)
    }
}

pub fn resolve(manifest_path: &Path, entry: &ManifestEntry) -> PathBuf {
    let p = Path::new(&entry.path);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        manifest_path.parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, split: Split) -> ManifestEntry {
        ManifestEntry {
            clip_id: id.into(),
            path: format!("clips/{id}.wav"),
            label: 1,
            split,
        }
    }

    #[test]
    fn line_format() {
        let m = Manifest::new(vec![entry("a", Split::Test)]).unwrap();
        assert_eq!(
            m.to_jsonl(),
            "{\"clip_id\":\"a\",\"path\":\"clips/a.wav\",\"label\":1,\"split\":\"test\"}\n"
        );
    }

    #[test]
    fn duplicates_and_unknown_keys_rejected() {
        assert!(Manifest::new(vec![entry("a", Split::Train), entry("a", Split::Test)]).is_err());
        assert!(Manifest::parse("{\"clip_id\":\"a\",\"path\":\"p\",\"label\":0,\"split\":\"train\",\"x\":1}").is_err());
        assert!(Manifest::parse("{\"clip_id\":\"a\",\"path\":\"p\",\"label\":0,\"split\":\"dev\"}").is_err());
    }

    #[test]
    fn relative_paths_resolve_next_to_manifest() {
        let e = entry("a", Split::Train);
        assert_eq!(
            resolve(Path::new("/data/set/m.jsonl"), &e),
            PathBuf::from("/data/set/clips/a.wav")
        );
    }
}
