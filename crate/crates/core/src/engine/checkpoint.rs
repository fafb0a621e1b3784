use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{MtnError, Result};
use crate::model::{ModelConfig, MtnModel};
use crate::numerics::{AdamState, ParamStore, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT: &str = "mtn-checkpoint";
const VERSION: u32 = 1;
const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub byte_offset: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    step: u64,
    adam_step: Option<u64>,
    config: ModelConfig,
    vocab: Vocabulary,
    tensors: Vec<TensorEntry>,
}

/// Model configuration, vocabulary, parameters and optimizer moments.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub step: u64,
    pub params: ParamStore<f32>,
    pub adam: Option<AdamState<f32>>,
}

impl Checkpoint {
    pub fn new(model: &MtnModel<f32>, vocab: &Vocabulary, step: u64, adam: Option<AdamState<f32>>) -> Self {
        Checkpoint {
            config: model.config.clone(),
            vocab: vocab.clone(),
            step,
            params: model.params.clone(),
            adam,
        }
    }

    /// Rebuilds the network and installs the stored parameters.
    pub fn model(&self) -> Result<MtnModel<f32>> {
        if self.vocab.len() != self.config.vocab_size {
            return Err(MtnError::Data(format!(
                "checkpoint vocabulary has {} entries but its config says {}",
                self.vocab.len(),
                self.config.vocab_size
            )));
        }
        MtnModel::new(self.config.clone(), 0)?.with_params(self.params.clone())
    }

    fn tensors(&self) -> Vec<(String, &[usize], &[f32])> {
        let mut out: Vec<(String, &[usize], &[f32])> = self
            .params
            .iter()
            .map(|(_, p)| (p.name.clone(), p.value.shape(), p.value.data()))
            .collect();
        if let Some(adam) = &self.adam {
            for (prefix, moments) in [(ADAM_M, &adam.m), (ADAM_V, &adam.v)] {
                for ((_, p), m) in self.params.iter().zip(moments) {
                    out.push((format!("{prefix}{}", p.name), p.value.shape(), m.as_slice()));
                }
            }
        }
        out
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| MtnError::io(dir, e))?;
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        for (name, shape, data) in self.tensors() {
            entries.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                byte_offset: payload.len() as u64,
            });
            for v in data {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format: FORMAT.into(),
            version: VERSION,
            step: self.step,
            adam_step: self.adam.as_ref().map(|a| a.step),
            config: self.config.clone(),
            vocab: self.vocab.clone(),
            tensors: entries,
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| MtnError::io(&path, e))?;
        let path = dir.join(PARAMS_FILE);
        std::fs::write(&path, payload).map_err(|e| MtnError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&mpath).map_err(|e| MtnError::io(&mpath, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| MtnError::Data(format!("{}: {e}", mpath.display())))?;
        if manifest.format != FORMAT || manifest.version != VERSION {
            return Err(MtnError::Data(format!(
                "{}: unsupported checkpoint {} v{}",
                mpath.display(),
                manifest.format,
                manifest.version
            )));
        }
        manifest.config.validate()?;
        let ppath = dir.join(PARAMS_FILE);
        let bytes = std::fs::read(&ppath).map_err(|e| MtnError::io(&ppath, e))?;
        let origin = ppath.display().to_string();

        let mut expected = 0u64;
        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            if e.byte_offset != expected {
                return Err(MtnError::Format {
                    path: origin.clone(),
                    offset: e.byte_offset,
                    message: format!("tensor {} expected at offset {expected}", e.name),
                });
            }
            let n: usize = e.shape.iter().product();
            let end = e.byte_offset as usize + 4 * n;
            if end > bytes.len() {
                return Err(MtnError::Format {
                    path: origin.clone(),
                    offset: bytes.len() as u64,
                    message: format!("tensor {} runs past the end of the payload", e.name),
                });
            }
            let data: Vec<f32> = bytes[e.byte_offset as usize..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::new(e.shape.clone(), data)?));
            expected = end as u64;
        }
        if expected as usize != bytes.len() {
            return Err(MtnError::Format {
                path: origin,
                offset: expected,
                message: format!("{} trailing bytes", bytes.len() as u64 - expected),
            });
        }

        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in tensors {
            if name.starts_with(ADAM_M) {
                m.push(t.into_data());
            } else if name.starts_with(ADAM_V) {
                v.push(t.into_data());
            } else {
                params.add(name, t)?;
            }
        }
        let adam = match manifest.adam_step {
            Some(step) if m.len() == params.len() && v.len() == params.len() => Some(AdamState { m, v, step }),
            None if m.is_empty() && v.is_empty() => None,
            _ => return Err(MtnError::Data("optimizer moments do not match the parameter set".into())),
        };
        Ok(Checkpoint {
            config: manifest.config,
            vocab: manifest.vocab,
            step: manifest.step,
            params,
            adam,
        })
    }
}
