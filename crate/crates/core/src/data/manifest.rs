//! Dataset manifests: UTF-8 CSV with header `path,label,speaker,group,split`.
//!
//! Paths are stored relative to the directory holding the manifest and
//! always use `/` as separator.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::DataError;

pub const MANIFEST_HEADER: [&str; 5] = ["path", "label", "speaker", "group", "split"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
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
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!(
                "unknown split {other:?} (expected train, val or test)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRow {
    pub path: String,
    pub label: String,
    pub speaker: String,
    /// Optional grouping tag (for instance speaker gender); empty when absent.
    #[serde(default)]
    pub group: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    /// Directory the relative paths resolve against.
    pub root: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    /// Sorted, de-duplicated labels over every split.
    pub fn class_names(&self) -> Vec<String> {
        self.rows
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    pub fn rows_in<'a>(
        &'a self,
        splits: &'a [Split],
    ) -> impl Iterator<Item = &'a ManifestRow> + 'a {
        self.rows.iter().filter(move |r| splits.contains(&r.split))
    }

    pub fn count(&self, split: Split) -> usize {
        self.rows.iter().filter(|r| r.split == split).count()
    }

    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        self.root
            .join(row.path.replace('/', std::path::MAIN_SEPARATOR_STR))
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for r in &self.rows {
            if r.path.is_empty() || r.label.is_empty() {
                return Err(DataError::Manifest(format!(
                    "row with empty path or label: {r:?}"
                )));
            }
            if !seen.insert(r.path.as_str()) {
                return Err(DataError::Manifest(format!("duplicate path {}", r.path)));
            }
        }
        Ok(())
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Manifest, DataError> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?
        .iter()
        .map(str::to_owned)
        .collect();
    if header != MANIFEST_HEADER {
        return Err(DataError::Manifest(format!(
            "{}: header must be {}, found {}",
            path.display(),
            MANIFEST_HEADER.join(","),
            header.join(",")
        )));
    }
    let rows = reader
        .deserialize()
        .collect::<Result<Vec<ManifestRow>, _>>()
        .map_err(|e| DataError::Manifest(format!("{}: {e}", path.display())))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let manifest = Manifest { root, rows };
    manifest.validate()?;
    Ok(manifest)
}

/// Writes rows whose `path` fields are already relative to `out`'s directory.
pub fn write_manifest(rows: &[ManifestRow], out: impl AsRef<Path>) -> Result<(), DataError> {
    let out = out.as_ref();
    let io = |e: csv::Error| DataError::Manifest(format!("{}: {e}", out.display()));
    let mut w = csv::Writer::from_path(out).map_err(io)?;
    w.write_record(MANIFEST_HEADER).map_err(io)?;
    for r in rows {
        let split = r.split.to_string();
        w.write_record([r.path.as_str(), &r.label, &r.speaker, &r.group, &split])
            .map_err(io)?;
    }
    w.flush()
        .map_err(|e| DataError::Manifest(format!("{}: {e}", out.display())))
}

/// `target` expressed relative to `base_dir`, with `/` separators.
pub fn relative_path(target: &Path, base_dir: &Path) -> String {
    let rel = pathdiff::diff_paths(target, base_dir).unwrap_or_else(|| target.to_path_buf());
    rel.components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}
