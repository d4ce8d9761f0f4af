//! JSON-lines dataset manifests.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::batch::ImageBatch;
use crate::conditioners::LandmarkSet;
use crate::data::io::{read_landmarks, read_png};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub person_id: String,
    pub expression_id: u32,
    pub severity: f64,
    /// Relative to the manifest's directory.
    pub image_path: String,
    pub landmark_path: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub split: Split,
    pub entries: Vec<ManifestEntry>,
    /// Directory that entry paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::Manifest(format!("{}:{}: {e}", path.display(), i + 1)))?;
            entries.push(e);
        }
        let split = match entries.first() {
            Some(e) => e.split,
            None => return Err(Error::Manifest(format!("{} has no entries", path.display()))),
        };
        if entries.iter().any(|e| e.split != split) {
            return Err(Error::Manifest(format!("{} mixes splits", path.display())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self { split, entries, root })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let mut f = std::io::BufWriter::new(fs::File::create(path)?);
        for e in &self.entries {
            serde_json::to_writer(&mut f, e)?;
            f.write_all(b"\n")?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn image_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].image_path)
    }

    pub fn landmark_path(&self, i: usize) -> PathBuf {
        self.root.join(&self.entries[i].landmark_path)
    }

    /// Entry indices grouped by person, in sorted person order.
    pub fn by_person(&self) -> BTreeMap<String, Vec<usize>> {
        let mut m: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, e) in self.entries.iter().enumerate() {
            m.entry(e.person_id.clone()).or_default().push(i);
        }
        m
    }

    pub fn persons(&self) -> Vec<String> {
        self.by_person().into_keys().collect()
    }

    /// Checks pairability and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        for (p, idx) in self.by_person() {
            if idx.len() < 2 {
                return Err(Error::Manifest(format!("person {p} has a single entry")));
            }
        }
        for i in 0..self.len() {
            for path in [self.image_path(i), self.landmark_path(i)] {
                if !path.is_file() {
                    return Err(Error::Manifest(format!("missing file {}", path.display())));
                }
            }
            let s = self.entries[i].severity;
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::Manifest(format!("severity {s} outside [0, 1]")));
            }
        }
        Ok(())
    }

    /// All images as one `[N, 3, H, W]` batch, ids `person/expression`.
    pub fn load_images(&self, dtype: DType, device: &Device) -> Result<ImageBatch> {
        let imgs = (0..self.len())
            .map(|i| read_png(&self.image_path(i), dtype, device))
            .collect::<Result<Vec<_>>>()?;
        let ids = self.entries.iter().map(|e| format!("{}/{}", e.person_id, e.expression_id)).collect();
        ImageBatch::new(Tensor::stack(&imgs, 0)?)?.with_ids(ids)
    }

    pub fn load_landmarks(&self) -> Result<Vec<LandmarkSet>> {
        (0..self.len()).map(|i| read_landmarks(&self.landmark_path(i))).collect()
    }
}

pub fn check_disjoint(a: &DatasetManifest, b: &DatasetManifest) -> Result<()> {
    let pa: BTreeSet<_> = a.entries.iter().map(|e| &e.person_id).collect();
    if let Some(p) = b.entries.iter().map(|e| &e.person_id).find(|p| pa.contains(p)) {
        return Err(Error::Manifest(format!("person {p} appears in both splits")));
    }
    Ok(())
}
