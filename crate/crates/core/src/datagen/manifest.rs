//! Dataset manifest: a JSON file binding original images, their masks and
//! the tampered outputs. Relative paths resolve against the manifest's
//! directory.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskRecordEntry {
    pub mask_number: usize,
    pub original_mask_path: PathBuf,
    pub edited_mask_path: PathBuf,
    pub masked_object: String,
    pub area_percentage: f64,
    /// (row, col) in pixels.
    pub centroid: [f64; 2],
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TamperedEntry {
    pub inpainter_id: String,
    pub path: PathBuf,
    /// Mask record the image was inpainted with.
    pub mask_number: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image_path: PathBuf,
    pub caption: String,
    pub mask_records: Vec<MaskRecordEntry>,
    pub tampered: Vec<TamperedEntry>,
    pub safety_flag: bool,
}

impl ManifestEntry {
    pub fn record(&self, mask_number: usize) -> Option<&MaskRecordEntry> {
        self.mask_records
            .iter()
            .find(|r| r.mask_number == mask_number)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// Checks path uniqueness and that every tampered entry names an
    /// existing mask record of its own entry.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let mut claim = |p: &Path, what: &str| {
            if seen.insert(p.to_path_buf()) {
                Ok(())
            } else {
                Err(Error::Validation(format!(
                    "duplicate {what} path {}",
                    p.display()
                )))
            }
        };
        for (i, e) in self.entries.iter().enumerate() {
            claim(&e.image_path, "image")?;
            let mut numbers = HashSet::new();
            for r in &e.mask_records {
                if !numbers.insert(r.mask_number) {
                    return Err(Error::Validation(format!(
                        "entry {i} repeats mask_number {}",
                        r.mask_number
                    )));
                }
                claim(&r.original_mask_path, "mask")?;
                if r.edited_mask_path != r.original_mask_path {
                    claim(&r.edited_mask_path, "mask")?;
                }
                if !(0.0..=1.0).contains(&r.area_percentage) {
                    return Err(Error::Validation(format!(
                        "entry {i} mask {} has area {}",
                        r.mask_number, r.area_percentage
                    )));
                }
            }
            for t in &e.tampered {
                if !numbers.contains(&t.mask_number) {
                    return Err(Error::Validation(format!(
                        "entry {i} tampered image {} references absent mask_number {}",
                        t.path.display(),
                        t.mask_number
                    )));
                }
                claim(&t.path, "tampered")?;
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Parses and validates.
    pub fn from_json(text: &str) -> Result<Self> {
        let m: DatasetManifest =
            serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        m.validate()?;
        Ok(m)
    }

    pub fn num_tampered(&self) -> usize {
        self.entries.iter().map(|e| e.tampered.len()).sum()
    }
}

pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, manifest.to_json()? + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    DatasetManifest::from_json(&text)
}

/// Directory that relative manifest paths are resolved against.
pub fn manifest_base(manifest_path: &Path) -> PathBuf {
    manifest_path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

pub fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

/// `path` relative to `base` when it lies below it, otherwise unchanged.
pub fn relative_to(base: &Path, path: &Path) -> PathBuf {
    path.strip_prefix(base)
        .map(Path::to_path_buf)
        .unwrap_or_else(|_| path.to_path_buf())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample() -> DatasetManifest {
        DatasetManifest {
            entries: vec![ManifestEntry {
                image_path: "images/a.png".into(),
                caption: "a scene with a cup".into(),
                mask_records: vec![
                    MaskRecordEntry {
                        mask_number: 0,
                        original_mask_path: "masks/a_0.png".into(),
                        edited_mask_path: "masks/a_0_edit.png".into(),
                        masked_object: "cup".into(),
                        area_percentage: 0.1234567890123,
                        centroid: [10.25, 3.0 / 7.0],
                    },
                    MaskRecordEntry {
                        mask_number: 1,
                        original_mask_path: "masks/a_1.png".into(),
                        edited_mask_path: "masks/a_1.png".into(),
                        masked_object: "random_polygon".into(),
                        area_percentage: 0.2,
                        centroid: [1.0, 2.0],
                    },
                ],
                tampered: vec![TamperedEntry {
                    inpainter_id: "pi-smooth".into(),
                    path: "tampered/a_0.png".into(),
                    mask_number: 0,
                }],
                safety_flag: false,
            }],
        }
    }

    #[test]
    fn json_round_trip_is_identity() {
        let m = sample();
        let text = m.to_json().unwrap();
        assert_eq!(DatasetManifest::from_json(&text).unwrap(), m);
        assert_eq!(
            DatasetManifest::from_json(&text)
                .unwrap()
                .to_json()
                .unwrap(),
            text
        );
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub/manifest.json");
        write_manifest(&sample(), &path).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), sample());
        assert_eq!(manifest_base(&path), dir.path().join("sub"));
    }

    #[test]
    fn missing_key_is_parse_error() {
        let text = sample()
            .to_json()
            .unwrap()
            .replace("\"safety_flag\": false", "\"other\": false");
        assert!(matches!(
            DatasetManifest::from_json(&text),
            Err(Error::Parse(_))
        ));
        let mut v: serde_json::Value = serde_json::from_str(&sample().to_json().unwrap()).unwrap();
        v["entries"][0].as_object_mut().unwrap().remove("caption");
        assert!(matches!(
            DatasetManifest::from_json(&v.to_string()),
            Err(Error::Parse(_))
        ));
        assert!(matches!(
            DatasetManifest::from_json("{"),
            Err(Error::Parse(_))
        ));
    }

    #[test]
    fn absent_mask_number_is_validation_error() {
        let mut m = sample();
        m.entries[0].tampered[0].mask_number = 7;
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
        assert!(matches!(
            DatasetManifest::from_json(&m.to_json().unwrap()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn duplicate_paths_rejected() {
        let mut m = sample();
        m.entries[0].tampered.push(TamperedEntry {
            inpainter_id: "pi-grain".into(),
            path: "tampered/a_0.png".into(),
            mask_number: 1,
        });
        assert!(matches!(m.validate(), Err(Error::Validation(_))));
        let mut m = sample();
        m.entries.push(m.entries[0].clone());
        assert!(m.validate().is_err());
    }
}
