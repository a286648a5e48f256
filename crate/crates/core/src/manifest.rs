//! JSON Lines dataset manifests.
//!
//! One record per line; relative paths resolve against the manifest's
//! directory. Blank lines are ignored.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRecord {
    pub audio_path: PathBuf,
    pub speaker_id: String,
    #[serde(alias = "language_tag")]
    pub language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels_path: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory relative paths resolve against.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl DatasetManifest {
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        if path.is_absolute() {
            path.to_path_buf()
        } else {
            self.root.join(path)
        }
    }

    pub fn audio_path(&self, record: &ManifestRecord) -> PathBuf {
        self.resolve(&record.audio_path)
    }

    pub fn labels_path(&self, record: &ManifestRecord) -> Option<PathBuf> {
        record.frame_labels_path.as_deref().map(|p| self.resolve(p))
    }

    /// Sorted speaker ids.
    pub fn speakers(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.records.iter().map(|r| r.speaker_id.clone()).collect();
        ids.sort();
        ids.dedup();
        ids
    }

    /// Records grouped by speaker, speakers sorted, manifest order within.
    pub fn by_speaker(&self) -> BTreeMap<String, Vec<&ManifestRecord>> {
        let mut map: BTreeMap<String, Vec<&ManifestRecord>> = BTreeMap::new();
        for r in &self.records {
            map.entry(r.speaker_id.clone()).or_default().push(r);
        }
        map
    }

    /// Checks every record; the error names the 1-based record line.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for (i, r) in self.records.iter().enumerate() {
            validate_record(self, r, i + 1, &mut seen)?;
        }
        Ok(())
    }

    /// Writes one JSON object per line.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn validate_record(manifest: &DatasetManifest, r: &ManifestRecord, line: usize, seen: &mut HashSet<PathBuf>) -> Result<()> {
    let fail = |message: String| Error::Manifest { line, message };
    if r.speaker_id.trim().is_empty() {
        return Err(fail("empty speaker_id".into()));
    }
    if r.language.trim().is_empty() {
        return Err(fail("empty language".into()));
    }
    let audio = manifest.audio_path(r);
    if !audio.is_file() {
        return Err(fail(format!("audio file {} does not exist", audio.display())));
    }
    if !seen.insert(normalize(&audio)) {
        return Err(fail(format!("duplicate audio path {}", r.audio_path.display())));
    }
    if let Some(labels) = manifest.labels_path(r) {
        if !labels.is_file() {
            return Err(fail(format!("label file {} does not exist", labels.display())));
        }
    }
    Ok(())
}

fn normalize(path: &Path) -> PathBuf {
    path.canonicalize().unwrap_or_else(|_| path.to_path_buf())
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut manifest = DatasetManifest {
        root,
        records: Vec::new(),
    };
    let mut seen = HashSet::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line).map_err(|e| Error::Manifest {
            line: i + 1,
            message: e.to_string(),
        })?;
        validate_record(&manifest, &record, i + 1, &mut seen)?;
        manifest.records.push(record);
    }
    if manifest.records.is_empty() {
        log::warn!("manifest {} has no records", path.display());
    }
    Ok(manifest)
}

/// Whitespace-separated class indices, one per frame.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.split_whitespace()
        .map(|tok| {
            tok.parse::<usize>()
                .map_err(|_| Error::Invalid(format!("{}: bad label `{tok}`", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn touch(dir: &Path, name: &str) {
        std::fs::write(dir.join(name), b"x").unwrap();
    }

    #[test]
    fn empty_manifest_loads() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(&p, "\n\n").unwrap();
        assert!(load_manifest(&p).unwrap().is_empty());
    }

    #[test]
    fn errors_name_the_line() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.wav");
        touch(dir.path(), "b.wav");
        let p = dir.path().join("m.jsonl");
        let cases = [
            (
                "{\"audio_path\":\"a.wav\",\"speaker_id\":\"s\",\"language\":\"en\"}\n{\"audio_path\":\"b.wav\",\"language\":\"en\"}\n",
                2,
            ),
            (
                "{\"audio_path\":\"a.wav\",\"speaker_id\":\"s\",\"language\":\"en\"}\n\n{\"audio_path\":\"a.wav\",\"speaker_id\":\"t\",\"language\":\"en\"}\n",
                3,
            ),
            ("{\"audio_path\":\"zzz.wav\",\"speaker_id\":\"s\",\"language\":\"en\"}\n", 1),
            ("{\"audio_path\":\"a.wav\",\"speaker_id\":\" \",\"language\":\"en\"}\n", 1),
            ("not json\n", 1),
        ];
        for (text, line) in cases {
            std::fs::write(&p, text).unwrap();
            match load_manifest(&p) {
                Err(Error::Manifest { line: l, .. }) => assert_eq!(l, line, "{text}"),
                other => panic!("{text}: {other:?}"),
            }
        }
    }

    #[test]
    fn language_tag_alias_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        touch(dir.path(), "a.wav");
        std::fs::write(dir.path().join("a.txt"), "0 0 3 3\n2").unwrap();
        let p = dir.path().join("m.jsonl");
        std::fs::write(
            &p,
            "{\"audio_path\":\"a.wav\",\"speaker_id\":\"s\",\"language_tag\":\"fi\",\"frame_labels_path\":\"a.txt\"}\n",
        )
        .unwrap();
        let m = load_manifest(&p).unwrap();
        assert_eq!(m.records[0].language, "fi");
        let labels = load_labels(&m.labels_path(&m.records[0]).unwrap()).unwrap();
        assert_eq!(labels, vec![0, 0, 3, 3, 2]);
    }
}
