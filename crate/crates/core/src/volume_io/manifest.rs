//! Study manifests: CSV with header `study_id,timepoint,day_offset,path,label`.
//!
//! Relative paths resolve against the manifest's directory.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Result, VolumeError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Positive,
    Negative,
    Unknown,
}

impl Label {
    pub fn as_str(&self) -> &'static str {
        match self {
            Label::Positive => "positive",
            Label::Negative => "negative",
            Label::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Label {
    type Err = VolumeError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "positive" => Ok(Label::Positive),
            "negative" => Ok(Label::Negative),
            "unknown" => Ok(Label::Unknown),
            other => Err(VolumeError::BadLabel(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub study_id: String,
    pub timepoint: u32,
    pub day_offset: i64,
    /// Path as written in the manifest.
    pub path: PathBuf,
    pub label: Label,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StudyManifest {
    pub rows: Vec<ManifestRow>,
    /// Directory relative paths resolve against.
    pub base_dir: PathBuf,
}

#[derive(Deserialize)]
struct RawRow {
    study_id: String,
    timepoint: u32,
    day_offset: i64,
    path: String,
    label: String,
}

impl StudyManifest {
    pub fn resolve(&self, row: &ManifestRow) -> PathBuf {
        if row.path.is_absolute() {
            row.path.clone()
        } else {
            self.base_dir.join(&row.path)
        }
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Rows grouped by study id (sorted), each group sorted by timepoint.
    pub fn studies(&self) -> BTreeMap<&str, Vec<&ManifestRow>> {
        let mut map: BTreeMap<&str, Vec<&ManifestRow>> = BTreeMap::new();
        for row in &self.rows {
            map.entry(row.study_id.as_str()).or_default().push(row);
        }
        for rows in map.values_mut() {
            rows.sort_by_key(|r| r.timepoint);
        }
        map
    }

    /// Checks uniqueness of (study, timepoint) and day ordering.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for row in &self.rows {
            if !seen.insert((row.study_id.as_str(), row.timepoint)) {
                return Err(VolumeError::DuplicateTimepoint {
                    study_id: row.study_id.clone(),
                    timepoint: row.timepoint,
                });
            }
        }
        for (study, rows) in self.studies() {
            if rows.windows(2).any(|w| w[1].day_offset < w[0].day_offset) {
                return Err(VolumeError::UnorderedDays(study.to_string()));
            }
        }
        Ok(())
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<StudyManifest> {
    let path = path.as_ref();
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut reader = csv::Reader::from_path(path)?;
    let headers = reader.headers()?.clone();
    let expected = ["study_id", "timepoint", "day_offset", "path", "label"];
    if headers.iter().ne(expected) {
        return Err(VolumeError::Csv(csv::Error::from(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("expected header {}", expected.join(",")),
        ))));
    }
    let mut manifest = StudyManifest { rows: Vec::new(), base_dir };
    for raw in reader.deserialize::<RawRow>() {
        let raw = raw?;
        let row = ManifestRow {
            study_id: raw.study_id,
            timepoint: raw.timepoint,
            day_offset: raw.day_offset,
            path: PathBuf::from(raw.path),
            label: raw.label.parse()?,
        };
        let resolved = manifest.resolve(&row);
        if !resolved.is_file() {
            return Err(VolumeError::UnresolvablePath(resolved.display().to_string()));
        }
        manifest.rows.push(row);
    }
    manifest.validate()?;
    Ok(manifest)
}

pub fn write_manifest(manifest: &StudyManifest, path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["study_id", "timepoint", "day_offset", "path", "label"])?;
    for row in &manifest.rows {
        w.write_record([
            row.study_id.as_str(),
            &row.timepoint.to_string(),
            &row.day_offset.to_string(),
            &row.path.to_string_lossy(),
            row.label.as_str(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
