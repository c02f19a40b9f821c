//! Synthetic blind-sweep dataset: on-disk layout, manifest format, the
//! phantom generator, preprocessing, augmentation, and patient splits.
//!
//! A dataset directory contains:
//!
//! ```text
//! manifest.jsonl            all generated frames (first line: metadata)
//! manifest_filtered.jsonl   after sweep filtering, when enabled
//! splits.json               patient id -> train | val | test
//! train_manifest.jsonl      training records incl. augmented versions
//! images/<patient>/s<k>/f<idx>.pgm          8-bit grayscale frames
//! masks/<patient>/s<k>/f<idx>.pgm           binary masks, {0, 255}
//! aug/<patient>/s<k>/f<idx>_v<n>[_mask].pgm augmented copies
//! ```

pub mod augment;
pub mod clahe;
pub mod pgm;
pub mod phantom;
pub mod preprocess;
pub mod split;

use std::collections::BTreeMap;
use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Transverse,
    Sagittal,
}

/// One ultrasound frame: identity, file locations, and its binary quality
/// label. `label == 1` iff the mask has at least one foreground pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub patient_id: String,
    pub sweep_id: u8,
    pub sweep_axis: SweepAxis,
    pub frame_index: u16,
    /// Paths relative to the dataset root.
    pub image_path: String,
    pub mask_path: String,
    pub label: u8,
    /// 0 for original frames, 1.. for augmented copies.
    #[serde(default)]
    pub version: u8,
}

impl FrameRecord {
    pub fn key(&self) -> (String, u8, u16, u8) {
        (self.patient_id.clone(), self.sweep_id, self.frame_index, self.version)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestMeta {
    pub seed: u64,
    pub native_height: usize,
    pub native_width: usize,
    pub n_patients: usize,
    pub total_frames: usize,
    pub positive_frames: usize,
    pub prevalence: f64,
    /// False when the generator ran in manifest-only mode.
    pub files_written: bool,
}

/// Line-delimited frame table. The first line is the metadata record;
/// every following line is one [`FrameRecord`].
#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub meta: ManifestMeta,
    pub records: Vec<FrameRecord>,
}

impl Manifest {
    pub fn prevalence(&self) -> f64 {
        if self.records.is_empty() {
            return 0.0;
        }
        self.positives() as f64 / self.records.len() as f64
    }

    pub fn positives(&self) -> usize {
        self.records.iter().filter(|r| r.label == 1).count()
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.meta)?;
        out.push(b'\n');
        for r in &self.records {
            serde_json::to_writer(&mut out, r)?;
            out.push(b'\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let file = fs::File::open(path)?;
        let mut lines = BufReader::new(file).lines();
        let meta_line = lines
            .next()
            .ok_or_else(|| DataError::Format(format!("{path:?}: empty manifest")))??;
        let meta: ManifestMeta = serde_json::from_str(&meta_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        let m = Manifest { meta, records };
        m.check_unique()?;
        Ok(m)
    }

    /// `(patient, sweep, frame, version)` must be unique.
    pub fn check_unique(&self) -> Result<(), DataError> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for r in &self.records {
            if !seen.insert(r.key()) {
                return Err(DataError::Format(format!(
                    "duplicate record {}/{}/{}v{}",
                    r.patient_id, r.sweep_id, r.frame_index, r.version
                )));
            }
        }
        Ok(())
    }

    pub fn patient_ids(&self) -> Vec<String> {
        let mut ids: Vec<String> = self
            .records
            .iter()
            .map(|r| r.patient_id.clone())
            .collect::<HashSet<_>>()
            .into_iter()
            .collect();
        ids.sort();
        ids
    }

    /// Drop every sweep whose frames all have empty masks; retained
    /// records are untouched. Filtering only ever removes negatives, so
    /// positive prevalence cannot decrease.
    pub fn filter_sweeps(&self) -> Manifest {
        let mut sweep_has_positive: BTreeMap<(String, u8), bool> = BTreeMap::new();
        for r in &self.records {
            let e = sweep_has_positive.entry((r.patient_id.clone(), r.sweep_id)).or_insert(false);
            *e |= r.label == 1;
        }
        let records: Vec<FrameRecord> = self
            .records
            .iter()
            .filter(|r| sweep_has_positive[&(r.patient_id.clone(), r.sweep_id)])
            .cloned()
            .collect();
        let meta = ManifestMeta {
            total_frames: records.len(),
            positive_frames: records.iter().filter(|r| r.label == 1).count(),
            prevalence: if records.is_empty() {
                0.0
            } else {
                records.iter().filter(|r| r.label == 1).count() as f64 / records.len() as f64
            },
            ..self.meta.clone()
        };
        Manifest { meta, records }
    }
}

/// Standard file names inside a dataset directory.
pub struct DatasetPaths {
    pub root: PathBuf,
}

impl DatasetPaths {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DatasetPaths { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    pub fn filtered_manifest(&self) -> PathBuf {
        self.root.join("manifest_filtered.jsonl")
    }

    pub fn train_manifest(&self) -> PathBuf {
        self.root.join("train_manifest.jsonl")
    }

    pub fn splits(&self) -> PathBuf {
        self.root.join("splits.json")
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

/// Write the split assignment as pretty JSON (stable key order).
pub fn save_splits(path: &Path, assignment: &split::SplitAssignment) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let ordered: BTreeMap<_, _> = assignment.iter().collect();
    let mut f = fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, &ordered)?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn load_splits(path: &Path) -> Result<split::SplitAssignment, DataError> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}
