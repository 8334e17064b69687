//! Line-delimited dataset manifests: one JSON object per line with fields
//! {id, image, captions}. Image paths are relative to the manifest location.

use crate::error::{Result, RunnerError};
use natpatch_core::raster::Raster;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub image: String,
    pub captions: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    split: String,
    root: PathBuf,
    provenance: Option<String>,
}

impl DatasetManifest {
    pub fn new(
        records: Vec<ManifestRecord>,
        split: &str,
        root: &Path,
        provenance: Option<String>,
    ) -> Result<Self> {
        let mut ids = HashSet::new();
        for (i, record) in records.iter().enumerate() {
            if record.captions.is_empty() {
                return Err(RunnerError::Manifest(format!(
                    "record {} ('{}') has an empty caption list",
                    i + 1,
                    record.id
                )));
            }
            if !ids.insert(record.id.clone()) {
                return Err(RunnerError::Manifest(format!("duplicate id '{}'", record.id)));
            }
        }
        if records.is_empty() {
            return Err(RunnerError::Manifest("manifest has no records".into()));
        }
        Ok(DatasetManifest { records, split: split.to_string(), root: root.to_path_buf(), provenance })
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn split(&self) -> &str {
        &self.split
    }

    pub fn provenance(&self) -> Option<&str> {
        self.provenance.as_deref()
    }

    pub fn image_path(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image)
    }

    pub fn load_images(&self) -> Result<Vec<Raster>> {
        self.records
            .iter()
            .map(|r| {
                Raster::load_png(&self.image_path(r)).map_err(|e| {
                    RunnerError::Manifest(format!("failed to load image for '{}': {e}", r.id))
                })
            })
            .collect()
    }

    /// All captions flattened in record order, with per-record text indices.
    pub fn caption_pool(&self) -> (Vec<String>, Vec<Vec<usize>>) {
        let mut captions = Vec::new();
        let mut matched = Vec::with_capacity(self.records.len());
        for record in &self.records {
            let start = captions.len();
            captions.extend(record.captions.iter().cloned());
            matched.push((start..captions.len()).collect());
        }
        (captions, matched)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for record in &self.records {
            out.push_str(&serde_json::to_string(record)?);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Parse and validate a manifest file; the split label is the file stem.
pub fn ingest_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| RunnerError::Manifest(format!("cannot read {}: {e}", path.display())))?;
    let root = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let split = path
        .file_stem()
        .map(|s| s.to_string_lossy().to_string())
        .unwrap_or_else(|| "unknown".into());
    let mut records = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| {
            RunnerError::Manifest(format!("{}:{}: parse error: {e}", path.display(), lineno + 1))
        })?;
        records.push(record);
    }
    // Provenance travels in an optional sidecar written by the generator.
    let provenance = std::fs::read_to_string(root.join("corpus.json"))
        .ok()
        .and_then(|text| serde_json::from_str::<serde_json::Value>(&text).ok())
        .and_then(|v| v["provenance"].as_str().map(|s| s.to_string()));
    let manifest = DatasetManifest::new(records, &split, &root, provenance)?;
    for record in manifest.records() {
        let img = manifest.image_path(record);
        if !img.is_file() {
            return Err(RunnerError::Manifest(format!(
                "record '{}': image {} not found",
                record.id,
                img.display()
            )));
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_manifest(dir: &Path, lines: &[&str]) -> PathBuf {
        let path = dir.join("probe.jsonl");
        std::fs::write(&path, lines.join("\n")).unwrap();
        path
    }

    fn touch_image(dir: &Path, name: &str) {
        let img = Raster::zeros(4, 4, 3);
        img.save_png(&dir.join(name)).unwrap();
    }

    #[test]
    fn well_formed_three_records() {
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.png", "b.png", "c.png"] {
            touch_image(dir.path(), name);
        }
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"id":"a","image":"a.png","captions":["a red circle on white"]}"#,
                r#"{"id":"b","image":"b.png","captions":["a blue square on white"]}"#,
                r#"{"id":"c","image":"c.png","captions":["x","y"]}"#,
            ],
        );
        let m = ingest_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.split(), "probe");
        let (captions, matched) = m.caption_pool();
        assert_eq!(captions.len(), 4);
        assert_eq!(matched[2], vec![2, 3]);
    }

    #[test]
    fn rejects_empty_caption_list() {
        let dir = tempfile::tempdir().unwrap();
        touch_image(dir.path(), "a.png");
        let path = write_manifest(dir.path(), &[r#"{"id":"a","image":"a.png","captions":[]}"#]);
        let err = ingest_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("'a'"), "{err}");
    }

    #[test]
    fn rejects_duplicate_ids() {
        let dir = tempfile::tempdir().unwrap();
        touch_image(dir.path(), "a.png");
        let path = write_manifest(
            dir.path(),
            &[
                r#"{"id":"a","image":"a.png","captions":["x"]}"#,
                r#"{"id":"a","image":"a.png","captions":["y"]}"#,
            ],
        );
        let err = ingest_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");
    }

    #[test]
    fn parse_error_carries_line_number() {
        let dir = tempfile::tempdir().unwrap();
        touch_image(dir.path(), "a.png");
        let path = write_manifest(
            dir.path(),
            &[r#"{"id":"a","image":"a.png","captions":["x"]}"#, "{not json"],
        );
        let err = ingest_manifest(&path).unwrap_err();
        assert!(err.to_string().contains(":2:"), "{err}");
    }

    #[test]
    fn rejects_missing_image_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = write_manifest(dir.path(), &[r#"{"id":"a","image":"gone.png","captions":["x"]}"#]);
        let err = ingest_manifest(&path).unwrap_err();
        assert!(err.to_string().contains("not found"), "{err}");
    }
}
