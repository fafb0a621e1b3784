use serde::{Deserialize, Serialize};

use crate::data::ModalitySpec;
use crate::error::{MtnError, Result};

/// Architecture ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Encoders, per-layer query-aware auto-encoder, decoder, both heads.
    Full,
    /// Decoder attends to encoded features directly; no auto-encoder.
    NoQae,
    /// Auto-encoder structure without regeneration; its last layer feeds
    /// every decoder layer.
    Qe,
    /// `NoQae` with stacked self-attention blocks over each text stream.
    SelfAttnEnc,
    /// One decoder attention over concatenated history, caption and query.
    ConcatDec,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoQae,
        Variant::Qe,
        Variant::SelfAttnEnc,
        Variant::ConcatDec,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoQae => "no_qae",
            Variant::Qe => "qe",
            Variant::SelfAttnEnc => "self_attn_enc",
            Variant::ConcatDec => "concat_dec",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        Variant::ALL.into_iter().find(|v| v.name() == s)
    }

    /// Whether the variant runs the query-aware stack at all.
    pub fn has_qae(self) -> bool {
        matches!(self, Variant::Full | Variant::Qe)
    }

    /// Whether the query-regeneration loss is trained.
    pub fn regenerates_query(self) -> bool {
        self == Variant::Full
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Blocks stacked over each text stream in [`Variant::SelfAttnEnc`].
pub const SELF_ATTN_ENC_BLOCKS: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub modalities: Vec<ModalitySpec>,
    pub vocab_size: usize,
    pub dropout: f64,
    pub sim_probability: f64,
    pub max_history: usize,
    pub variant: Variant,
    pub feature_positional: bool,
    /// Causal masking on the auto-encoder's query self-attention.
    pub qae_causal: bool,
}

impl ModelConfig {
    /// Base sizes: 6 layers, 8 heads, width 512.
    pub fn base(vocab_size: usize, modalities: Vec<ModalitySpec>) -> Self {
        ModelConfig {
            layers: 6,
            heads: 8,
            dim: 512,
            ff_dim: 2048,
            modalities,
            vocab_size,
            dropout: 0.1,
            sim_probability: 0.5,
            max_history: 3,
            variant: Variant::Full,
            feature_positional: true,
            qae_causal: false,
        }
    }

    /// Large sizes: 10 layers, 16 heads, width 1024.
    pub fn large(vocab_size: usize, modalities: Vec<ModalitySpec>) -> Self {
        ModelConfig {
            layers: 10,
            heads: 16,
            dim: 1024,
            ff_dim: 4096,
            ..ModelConfig::base(vocab_size, modalities)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |field: &str, msg: String| Err(MtnError::config(field, msg));
        if self.layers == 0 {
            return fail("model.layers", "must be at least 1".into());
        }
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return fail("model.dim", format!("must be positive and even, got {}", self.dim));
        }
        if self.heads == 0 || !self.dim.is_multiple_of(self.heads) {
            return fail(
                "model.heads",
                format!("{} heads do not divide width {}", self.heads, self.dim),
            );
        }
        if self.ff_dim == 0 {
            return fail("model.ff_dim", "must be positive".into());
        }
        if self.vocab_size <= crate::data::UNK {
            return fail(
                "model.vocab_size",
                format!("{} leaves no room past the reserved ids", self.vocab_size),
            );
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("model.dropout", format!("{} outside [0, 1)", self.dropout));
        }
        if !(0.0..=1.0).contains(&self.sim_probability) {
            return fail(
                "train.sim_probability",
                format!("{} outside [0, 1]", self.sim_probability),
            );
        }
        if self.max_history == 0 {
            return fail("data.max_history", "must be at least 1".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 || m.name.is_empty() {
                return fail("model.modalities", format!("modality {i} needs a name and a width"));
            }
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return fail("model.modalities", format!("duplicate modality {}", m.name));
            }
        }
        if self.variant.has_qae() && self.modalities.is_empty() {
            return fail(
                "model.variant",
                format!("{} needs at least one feature modality", self.variant),
            );
        }
        Ok(())
    }

    /// Attention sub-layers per decoder layer.
    pub fn decoder_sublayers(&self) -> usize {
        let text = if self.variant == Variant::ConcatDec { 1 } else { 3 };
        1 + text + self.modalities.len()
    }

    /// Attention sub-layers per auto-encoder layer (0 without one).
    pub fn qae_sublayers(&self) -> usize {
        if self.variant.has_qae() {
            1 + self.modalities.len()
        } else {
            0
        }
    }
}
