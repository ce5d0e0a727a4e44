//! JSON dataset manifests. Paths are stored relative to the manifest file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub id: String,
    /// Frame (or generator target) image.
    pub image: String,
    /// Binary polyp mask; absent for normal frames.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    /// Combined edge/mask generator input.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conditioned: Option<String>,
    /// Id of the entry this one was derived from.
    pub source: String,
    /// Transform chain applied to the source, oldest first.
    #[serde(default)]
    pub transforms: Vec<String>,
    /// Drawn parameters, for reproduction.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<serde_json::Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub extent: usize,
    pub seed: u64,
    pub entries: Vec<DatasetEntry>,
}

impl DatasetManifest {
    pub fn new(extent: usize, seed: u64) -> Self {
        DatasetManifest {
            version: MANIFEST_VERSION,
            extent,
            seed,
            entries: Vec::new(),
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: DatasetManifest = serde_json::from_str(&text).map_err(|e| Error::format(path, e))?;
        if m.version != MANIFEST_VERSION {
            return Err(Error::format(path, format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::format(path, e))?;
        fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn polyp_entries(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(|e| e.mask.is_some())
    }

    pub fn normal_entries(&self) -> impl Iterator<Item = &DatasetEntry> {
        self.entries.iter().filter(|e| e.mask.is_none())
    }
}

/// Resolves a manifest-relative path.
pub fn resolve(manifest_path: &Path, relative: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(relative)
}
