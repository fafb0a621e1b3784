//! Run configuration: a flat JSON object with dotted keys.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::data::ModalitySpec;
use crate::engine::{DecodeConfig, TrainConfig};
use crate::error::{MtnError, Result};
use crate::model::{ModelConfig, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(rename = "model.layers")]
    pub layers: usize,
    #[serde(rename = "model.heads")]
    pub heads: usize,
    #[serde(rename = "model.dim")]
    pub dim: usize,
    #[serde(rename = "model.ff_dim")]
    pub ff_dim: usize,
    /// `name:width` pairs separated by commas, audio first.
    #[serde(rename = "model.modalities")]
    pub modalities: String,
    #[serde(rename = "model.variant")]
    pub variant: Variant,
    #[serde(rename = "model.dropout")]
    pub dropout: f64,
    #[serde(rename = "model.feature_positional")]
    pub feature_positional: bool,
    #[serde(rename = "model.qae_causal")]
    pub qae_causal: bool,

    #[serde(rename = "data.dataset")]
    pub dataset: Option<PathBuf>,
    #[serde(rename = "data.valid_dataset")]
    pub valid_dataset: Option<PathBuf>,
    #[serde(rename = "data.features")]
    pub features: Option<PathBuf>,
    #[serde(rename = "data.max_history")]
    pub max_history: usize,
    #[serde(rename = "data.min_freq")]
    pub min_freq: usize,

    #[serde(rename = "train.epochs")]
    pub epochs: usize,
    #[serde(rename = "train.max_steps")]
    pub max_steps: Option<u64>,
    #[serde(rename = "train.warmup_steps")]
    pub warmup_steps: u64,
    #[serde(rename = "train.label_smoothing")]
    pub label_smoothing: f64,
    #[serde(rename = "train.batch_size")]
    pub batch_size: usize,
    #[serde(rename = "train.sim_probability")]
    pub sim_probability: f64,
    #[serde(rename = "train.seed")]
    pub seed: u64,
    #[serde(rename = "train.validate_every")]
    pub validate_every: u64,
    #[serde(rename = "train.checkpoint_dir")]
    pub checkpoint_dir: PathBuf,

    #[serde(rename = "decode.beam_size")]
    pub beam_size: usize,
    #[serde(rename = "decode.length_penalty")]
    pub length_penalty: f64,
    #[serde(rename = "decode.max_len")]
    pub max_len: usize,
    #[serde(rename = "decode.greedy")]
    pub greedy: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::default();
        let decode = DecodeConfig::default();
        RunConfig {
            layers: 6,
            heads: 8,
            dim: 512,
            ff_dim: 2048,
            modalities: "audio:128,visual:2048".into(),
            variant: Variant::Full,
            dropout: 0.1,
            feature_positional: true,
            qae_causal: false,
            dataset: None,
            valid_dataset: None,
            features: None,
            max_history: 3,
            min_freq: 2,
            epochs: train.epochs,
            max_steps: train.max_steps,
            warmup_steps: train.warmup_steps,
            label_smoothing: train.label_smoothing,
            batch_size: train.batch_size,
            sim_probability: 0.5,
            seed: train.seed,
            validate_every: train.validate_every,
            checkpoint_dir: PathBuf::from("checkpoints"),
            beam_size: decode.beam_size,
            length_penalty: decode.length_penalty,
            max_len: decode.max_len,
            greedy: false,
        }
    }
}

/// Parses `audio:128,visual:2048`.
pub fn parse_modalities(text: &str) -> Result<Vec<ModalitySpec>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (name, dim) = item.split_once(':').ok_or_else(|| {
                MtnError::config("model.modalities", format!("`{item}` is not name:width"))
            })?;
            let dim: usize = dim.trim().parse().map_err(|_| {
                MtnError::config("model.modalities", format!("`{item}` has a non-numeric width"))
            })?;
            Ok(ModalitySpec::new(name.trim(), dim))
        })
        .collect()
}

fn field_of(message: &str) -> String {
    message
        .split('`')
        .nth(1)
        .filter(|f| f.contains('.'))
        .unwrap_or("config")
        .to_string()
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            let msg = e.to_string();
            MtnError::config(field_of(&msg), msg)
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MtnError::config("--config", format!("{}: {e}", path.display())))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }

    /// Applies `key=value` overrides. Values are read as JSON when they
    /// parse, otherwise as strings.
    pub fn apply_overrides<S: AsRef<str>>(&self, overrides: &[S]) -> Result<Self> {
        let mut map: Map<String, Value> = match serde_json::to_value(self)? {
            Value::Object(m) => m,
            _ => unreachable!("config serializes to an object"),
        };
        for o in overrides {
            let o = o.as_ref();
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| MtnError::config("--set", format!("`{o}` is not key=value")))?;
            let key = key.trim();
            if !map.contains_key(key) {
                return Err(MtnError::config(key, "unknown configuration key"));
            }
            let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
            map.insert(key.to_string(), value);
        }
        serde_json::from_value(Value::Object(map)).map_err(|e| {
            let msg = e.to_string();
            MtnError::config(field_of(&msg), msg)
        })
    }

    pub fn model_config(&self, vocab_size: usize) -> Result<ModelConfig> {
        let c = ModelConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            ff_dim: self.ff_dim,
            modalities: parse_modalities(&self.modalities)?,
            vocab_size,
            dropout: self.dropout,
            sim_probability: self.sim_probability,
            max_history: self.max_history,
            variant: self.variant,
            feature_positional: self.feature_positional,
            qae_causal: self.qae_causal,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let c = TrainConfig {
            epochs: self.epochs,
            max_steps: self.max_steps,
            warmup_steps: self.warmup_steps,
            label_smoothing: self.label_smoothing,
            batch_size: self.batch_size,
            seed: self.seed,
            checkpoint_dir: Some(self.checkpoint_dir.clone()),
            validate_every: self.validate_every,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        if self.beam_size == 0 {
            return Err(MtnError::config("decode.beam_size", "must be at least 1"));
        }
        if self.max_len == 0 {
            return Err(MtnError::config("decode.max_len", "must be at least 1"));
        }
        Ok(DecodeConfig {
            beam_size: self.beam_size,
            length_penalty: self.length_penalty,
            max_len: self.max_len,
        })
    }

    pub fn require_dataset(&self) -> Result<&Path> {
        self.dataset
            .as_deref()
            .ok_or_else(|| MtnError::config("data.dataset", "no dataset path configured"))
    }

    pub fn require_features(&self) -> Result<&Path> {
        self.features
            .as_deref()
            .ok_or_else(|| MtnError::config("data.features", "no feature directory configured"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_a_fixpoint() {
        let c = RunConfig::default()
            .apply_overrides(&["model.variant=\"qe\"", "train.max_steps=10", "data.dataset=a/b.json"])
            .unwrap();
        let text = c.to_json();
        let back = RunConfig::from_json(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_json(), text);
        assert_eq!(c.variant, Variant::Qe);
        assert_eq!(c.dataset.as_deref(), Some(Path::new("a/b.json")));
    }

    #[test]
    fn bare_strings_and_errors() {
        let c = RunConfig::default().apply_overrides(&["model.variant=no_qae"]).unwrap();
        assert_eq!(c.variant, Variant::NoQae);
        match RunConfig::default().apply_overrides(&["model.depth=3"]) {
            Err(MtnError::Config { field, .. }) => assert_eq!(field, "model.depth"),
            other => panic!("{other:?}"),
        }
        assert!(RunConfig::default().apply_overrides(&["train.epochs=many"]).is_err());
        match RunConfig::from_json(r#"{"model.layerz": 2}"#) {
            Err(MtnError::Config { field, .. }) => assert_eq!(field, "model.layerz"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn modality_list() {
        let m = parse_modalities("audio:4, visual:8").unwrap();
        assert_eq!(m, vec![ModalitySpec::new("audio", 4), ModalitySpec::new("visual", 8)]);
        assert!(parse_modalities("audio").is_err());
        assert!(parse_modalities("").unwrap().is_empty());
    }
}
