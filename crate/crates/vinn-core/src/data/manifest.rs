//! Dataset manifests: line-delimited `prefix <TAB> voxel_mm <TAB> split`
//! records pointing at `{prefix}.img.vvol` / `{prefix}.lab.vvol` pairs.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
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
    type Err = DataError;
    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DataError::Format(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Path prefix relative to the manifest's directory.
    pub prefix: String,
    pub voxel_mm: f64,
    pub split: Split,
}

impl ManifestEntry {
    pub fn image_path(&self, root: &Path) -> PathBuf {
        root.join(format!("{}.img.vvol", self.prefix))
    }

    pub fn label_path(&self, root: &Path) -> PathBuf {
        root.join(format!("{}.lab.vvol", self.prefix))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut out = String::new();
        for e in &self.entries {
            // `{}` on f64 prints the shortest representation that parses
            // back exactly, so voxel sizes survive the round trip.
            out.push_str(&format!("{}\t{}\t{}\n", e.prefix, e.voxel_mm, e.split));
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Manifest, DataError> {
        let text = std::fs::read_to_string(path)?;
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let bad = || DataError::Format(format!("manifest line {}: {line:?}", n + 1));
            let prefix = parts.next().ok_or_else(bad)?.to_string();
            let voxel_mm: f64 = parts
                .next()
                .ok_or_else(bad)?
                .parse()
                .map_err(|_| bad())?;
            let split: Split = parts.next().ok_or_else(bad)?.parse()?;
            if parts.next().is_some() {
                return Err(bad());
            }
            entries.push(ManifestEntry {
                prefix,
                voxel_mm,
                split,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }
}
