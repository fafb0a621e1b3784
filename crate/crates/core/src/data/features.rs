//! MTNF feature files: little-endian `"MTNF"`, `u16` version 1, `u32` rows,
//! `u32` cols, then `rows * cols` `f32` values row-major.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{MtnError, Result};

pub const MAGIC: &[u8; 4] = b"MTNF";
pub const VERSION: u16 = 1;
const HEADER_LEN: usize = 14;

/// Name and input width of one non-text modality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: String,
    pub dim: usize,
}

impl ModalitySpec {
    pub fn new(name: impl Into<String>, dim: usize) -> Self {
        ModalitySpec {
            name: name.into(),
            dim,
        }
    }
}

/// A `rows × cols` matrix of frame-window features for one modality.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityFeatures {
    pub modality: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl ModalityFeatures {
    pub fn new(modality: impl Into<String>, rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(MtnError::Data(format!(
                "feature matrix {rows}x{cols} does not match {} values",
                data.len()
            )));
        }
        Ok(ModalityFeatures {
            modality: modality.into(),
            rows,
            cols,
            data,
        })
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(modality: &str, bytes: &[u8], origin: &str) -> Result<Self> {
        let fail = |offset: usize, message: String| MtnError::Format {
            path: origin.to_string(),
            offset: offset as u64,
            message,
        };
        if bytes.len() < HEADER_LEN {
            return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
        }
        if &bytes[0..4] != MAGIC {
            return Err(fail(0, "bad magic, expected MTNF".into()));
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != VERSION {
            return Err(fail(4, format!("unsupported version {version}")));
        }
        let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
        if rows == 0 || cols == 0 {
            return Err(fail(6, format!("empty matrix {rows}x{cols}")));
        }
        let expected = rows
            .checked_mul(cols)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| fail(6, "dimension overflow".into()))?;
        let payload = &bytes[HEADER_LEN..];
        if payload.len() != expected {
            return Err(fail(
                HEADER_LEN + payload.len().min(expected),
                format!(
                    "declared {rows}x{cols} needs {expected} payload bytes, found {}",
                    payload.len()
                ),
            ));
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(ModalityFeatures {
            modality: modality.to_string(),
            rows,
            cols,
            data,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| MtnError::io(parent, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| MtnError::io(path, e))
    }
}

/// Reads one MTNF file; the modality name is taken from the parent directory.
pub fn load_features(path: &Path) -> Result<ModalityFeatures> {
    let bytes = std::fs::read(path).map_err(|e| MtnError::io(path, e))?;
    let modality = path
        .parent()
        .and_then(|p| p.file_name())
        .and_then(|n| n.to_str())
        .unwrap_or("");
    ModalityFeatures::from_bytes(modality, &bytes, &path.display().to_string())
}

/// `<dir>/<modality>/<video_id>.mtnf`
pub fn feature_path(dir: &Path, modality: &str, video_id: &str) -> PathBuf {
    dir.join(modality).join(format!("{video_id}.mtnf"))
}

/// Per-video features for an ordered list of modalities.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureStore {
    modalities: Vec<ModalitySpec>,
    videos: BTreeMap<String, Vec<ModalityFeatures>>,
}

impl FeatureStore {
    pub fn new(modalities: Vec<ModalitySpec>) -> Self {
        FeatureStore {
            modalities,
            videos: BTreeMap::new(),
        }
    }

    pub fn modalities(&self) -> &[ModalitySpec] {
        &self.modalities
    }

    /// Registers a video. `features` must follow the modality order.
    pub fn insert(&mut self, video_id: impl Into<String>, features: Vec<ModalityFeatures>) -> Result<()> {
        let video_id = video_id.into();
        if features.len() != self.modalities.len() {
            return Err(MtnError::Data(format!(
                "video {video_id}: {} feature matrices for {} modalities",
                features.len(),
                self.modalities.len()
            )));
        }
        for (f, m) in features.iter().zip(&self.modalities) {
            if f.cols != m.dim {
                return Err(MtnError::Data(format!(
                    "video {video_id}: modality {} has width {} but {} is configured",
                    m.name, f.cols, m.dim
                )));
            }
        }
        self.videos.insert(video_id, features);
        Ok(())
    }

    pub fn get(&self, video_id: &str) -> Option<&[ModalityFeatures]> {
        self.videos.get(video_id).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.videos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[ModalityFeatures])> {
        self.videos.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }

    /// Loads every listed video from `<dir>/<modality>/<video_id>.mtnf`.
    pub fn load_dir<'a>(
        dir: &Path,
        modalities: &[ModalitySpec],
        video_ids: impl IntoIterator<Item = &'a str>,
    ) -> Result<Self> {
        let mut store = FeatureStore::new(modalities.to_vec());
        for vid in video_ids {
            if store.videos.contains_key(vid) {
                continue;
            }
            let feats = modalities
                .iter()
                .map(|m| load_features(&feature_path(dir, &m.name, vid)))
                .collect::<Result<Vec<_>>>()?;
            store.insert(vid, feats)?;
        }
        Ok(store)
    }

    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        for (vid, feats) in &self.videos {
            for f in feats {
                f.write(&feature_path(dir, &f.modality, vid))?;
            }
        }
        Ok(())
    }

    /// Copy with every feature value set to zero (row counts preserved).
    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for feats in out.videos.values_mut() {
            for f in feats {
                f.data.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        out
    }
}
