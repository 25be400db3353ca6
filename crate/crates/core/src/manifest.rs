//! Dataset manifests: a JSON index of image/mask files grouped by patient.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

/// Which imaging domain a slice comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    /// Labeled domain with sharp, high-contrast anatomy.
    Source,
    /// Unlabeled domain with heterogeneous myocardium and blurred edges.
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::validation("domain", format!("unknown domain {other:?} (source|target)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub patient_id: u32,
    pub slice_index: u32,
    pub domain: Domain,
    /// Relative paths resolve against the manifest's directory.
    pub image_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub samples: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(samples: Vec<ManifestEntry>) -> Self {
        Self { format_version: MANIFEST_VERSION, samples }
    }

    /// Accepts either a manifest file or a directory containing `manifest.json`.
    pub fn locate(path: &Path) -> PathBuf {
        if path.is_dir() {
            path.join(MANIFEST_FILE)
        } else {
            path.to_path_buf()
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let path = Self::locate(path);
        if !path.exists() {
            return Err(Error::MissingFile(path));
        }
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest { path: path.clone(), reason: e.to_string() })?;
        if m.format_version != MANIFEST_VERSION {
            return Err(Error::Manifest {
                path,
                reason: format!("format_version {} (expected {MANIFEST_VERSION})", m.format_version),
            });
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// Entries grouped by patient, slices in index order.
    pub fn by_patient(&self) -> BTreeMap<u32, Vec<&ManifestEntry>> {
        let mut out: BTreeMap<u32, Vec<&ManifestEntry>> = BTreeMap::new();
        for e in &self.samples {
            out.entry(e.patient_id).or_default().push(e);
        }
        for v in out.values_mut() {
            v.sort_by_key(|e| e.slice_index);
        }
        out
    }
}

/// Resolves `p` relative to the directory holding `manifest_path`.
pub fn resolve(manifest_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        DatasetManifest::locate(manifest_path).parent().unwrap_or(Path::new(".")).join(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn domain_parsing() {
        assert_eq!("Source".parse::<Domain>().unwrap(), Domain::Source);
        assert!("lge".parse::<Domain>().is_err());
    }

    #[test]
    fn grouping_sorts_slices() {
        let e = |p, s| ManifestEntry {
            patient_id: p,
            slice_index: s,
            domain: Domain::Target,
            image_path: format!("{p}_{s}.png").into(),
            mask_path: None,
            seed: None,
        };
        let m = DatasetManifest::new(vec![e(2, 1), e(1, 0), e(2, 0)]);
        let g = m.by_patient();
        assert_eq!(g.len(), 2);
        assert_eq!(g[&2].iter().map(|e| e.slice_index).collect::<Vec<_>>(), vec![0, 1]);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        std::fs::write(&p, r#"{"format_version":1,"samples":[],"extra":1}"#).unwrap();
        assert!(matches!(DatasetManifest::load(&p), Err(Error::Manifest { .. })));
    }
}
