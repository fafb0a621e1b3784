//! The multimodal transformer network: text and video encoders, the
//! query-aware auto-encoder, the multi-source decoder and the generative
//! heads, with every ablation variant.

mod config;

pub use config::{ModelConfig, Variant, SELF_ATTN_ENC_BLOCKS};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{positional_encoding, AttentionBlock, Seq};
use crate::data::{Batch, PaddedFeatures, PaddedIds};
use crate::error::{MtnError, Result};
use crate::numerics::{Embedding, Graph, LayerNorm, Linear, ParamStore, Real, Tensor, Var};

/// Embedding, positions and layer norm, optionally followed by
/// self-attention blocks per stream.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub embedding: Embedding,
    pub norm: LayerNorm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextStream {
    History,
    Caption,
    Query,
}

impl TextStream {
    fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: AttentionBlock,
    /// History, caption, query; a single block in the concatenated variant.
    pub text: Vec<AttentionBlock>,
    /// One per modality, applied last.
    pub video: Vec<AttentionBlock>,
}

#[derive(Clone, Debug)]
pub struct QaeLayer {
    pub self_attn: AttentionBlock,
    pub video: Vec<AttentionBlock>,
}

#[derive(Clone, Debug)]
struct Architecture {
    source: TextEncoder,
    target: TextEncoder,
    /// `[stream][block]`, only for the self-attention-encoder variant.
    stream_blocks: Vec<Vec<AttentionBlock>>,
    video: Vec<Linear>,
    qae: Vec<QaeLayer>,
    decoder: Vec<DecoderLayer>,
    response_head: Linear,
    query_head: Option<Linear>,
}

/// A configured network and its parameters.
#[derive(Clone, Debug)]
pub struct MtnModel<T: Real> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    arch: Architecture,
}

/// Output of [`MtnModel::qae_forward`].
#[derive(Clone, Debug)]
pub struct QaeOutput {
    /// `features[n][m]` is the attended feature set of modality `m` after
    /// layer `n`; each has the query's row layout.
    pub features: Vec<Vec<Seq>>,
    pub query: Seq,
}

/// Encoded sources shared by every decoding step.
#[derive(Clone, Debug)]
pub struct Sources {
    pub history: Seq,
    pub caption: Seq,
    pub query: Seq,
    /// Features consumed by each decoder layer, `[layer][modality]`.
    pub video: Vec<Vec<Seq>>,
    /// Final auto-encoder query representation.
    pub qae_query: Option<Seq>,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    /// `[batch * target_len, V]`.
    pub response_logits: Var,
    /// `[batch * query_len, V]`, present only when the query is regenerated.
    pub query_logits: Option<Var>,
}

fn block<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    c: &ModelConfig,
) -> Result<AttentionBlock> {
    AttentionBlock::new(store, rng, name, c.dim, c.heads, c.ff_dim)
}

impl<T: Real> MtnModel<T> {
    /// Builds and initializes the network for `config.variant`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let c = &config;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let text_encoder = |s: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str| -> Result<TextEncoder> {
            Ok(TextEncoder {
                embedding: Embedding::new(s, rng, &format!("{name}.embed"), c.vocab_size, c.dim)?,
                norm: LayerNorm::new(s, &format!("{name}.norm"), c.dim)?,
            })
        };
        let source = text_encoder(&mut s, &mut rng, "source")?;
        let target = text_encoder(&mut s, &mut rng, "target")?;

        let mut stream_blocks = Vec::new();
        if c.variant == Variant::SelfAttnEnc {
            for stream in ["history", "caption", "query"] {
                let blocks = (0..SELF_ATTN_ENC_BLOCKS)
                    .map(|k| block(&mut s, &mut rng, &format!("encoder.{stream}.{k}"), c))
                    .collect::<Result<Vec<_>>>()?;
                stream_blocks.push(blocks);
            }
        }

        let video = c
            .modalities
            .iter()
            .map(|m| Linear::new(&mut s, &mut rng, &format!("video.{}", m.name), m.dim, c.dim, true))
            .collect::<Result<Vec<_>>>()?;

        let mut qae = Vec::new();
        if c.variant.has_qae() {
            for n in 0..c.layers {
                qae.push(QaeLayer {
                    self_attn: block(&mut s, &mut rng, &format!("qae.{n}.self"), c)?,
                    video: c
                        .modalities
                        .iter()
                        .map(|m| block(&mut s, &mut rng, &format!("qae.{n}.{}", m.name), c))
                        .collect::<Result<Vec<_>>>()?,
                });
            }
        }

        let text_names: &[&str] = if c.variant == Variant::ConcatDec {
            &["sources"]
        } else {
            &["history", "caption", "query"]
        };
        let mut decoder = Vec::new();
        for n in 0..c.layers {
            decoder.push(DecoderLayer {
                self_attn: block(&mut s, &mut rng, &format!("decoder.{n}.self"), c)?,
                text: text_names
                    .iter()
                    .map(|t| block(&mut s, &mut rng, &format!("decoder.{n}.{t}"), c))
                    .collect::<Result<Vec<_>>>()?,
                video: c
                    .modalities
                    .iter()
                    .map(|m| block(&mut s, &mut rng, &format!("decoder.{n}.{}", m.name), c))
                    .collect::<Result<Vec<_>>>()?,
            });
        }

        let response_head = Linear::new(&mut s, &mut rng, "head.response", c.dim, c.vocab_size, true)?;
        let query_head = if c.variant.regenerates_query() {
            Some(Linear::new(&mut s, &mut rng, "head.query", c.dim, c.vocab_size, true)?)
        } else {
            None
        };

        Ok(MtnModel {
            arch: Architecture {
                source,
                target,
                stream_blocks,
                video,
                qae,
                decoder,
                response_head,
                query_head,
            },
            config,
            params: s,
        })
    }

    /// Same network with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> MtnModel<U> {
        MtnModel {
            config: self.config.clone(),
            params: self.params.cast(),
            arch: self.arch.clone(),
        }
    }

    /// Replaces the parameter store; names and shapes must match.
    pub fn with_params(mut self, params: ParamStore<T>) -> Result<Self> {
        if params.len() != self.params.len() {
            return Err(MtnError::Data(format!(
                "expected {} parameter tensors, found {}",
                self.params.len(),
                params.len()
            )));
        }
        for ((_, a), (_, b)) in self.params.iter().zip(params.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() {
                return Err(MtnError::Data(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    b.name,
                    b.value.shape(),
                    a.name,
                    a.value.shape()
                )));
            }
        }
        self.params = params;
        Ok(self)
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.arch.decoder
    }

    pub fn qae_layers(&self) -> &[QaeLayer] {
        &self.arch.qae
    }

    pub fn source_encoder(&self) -> &TextEncoder {
        &self.arch.source
    }

    pub fn target_encoder(&self) -> &TextEncoder {
        &self.arch.target
    }

    pub fn response_head(&self) -> &Linear {
        &self.arch.response_head
    }

    pub fn query_head(&self) -> Option<&Linear> {
        self.arch.query_head.as_ref()
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn dropout(&self, g: &Graph<T>) -> f64 {
        if g.is_training() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// Positional rows for `batch` items of padded length `len`.
    fn positions(&self, g: &mut Graph<T>, batch: usize, len: usize) -> Result<Var> {
        let table = positional_encoding::<T>(len, self.config.dim)?;
        let mut data = Vec::with_capacity(batch * table.numel());
        for _ in 0..batch {
            data.extend_from_slice(table.data());
        }
        Ok(g.constant(Tensor::new(vec![batch * len, self.config.dim], data)?))
    }

    fn embed(&self, g: &mut Graph<T>, enc: &TextEncoder, ids: &PaddedIds) -> Result<Seq> {
        let emb = enc.embedding.forward(g, &self.params, &ids.ids)?;
        let pe = self.positions(g, ids.batch(), ids.len)?;
        let x = g.add(emb, pe)?;
        let x = enc.norm.forward(g, &self.params, x)?;
        let p = self.dropout(g);
        let x = g.dropout(x, p);
        Ok(Seq {
            x,
            len: ids.len,
            lens: ids.lens.clone(),
        })
    }

    /// Encodes a source text stream with the shared source embedding.
    pub fn encode_text(&self, g: &mut Graph<T>, ids: &PaddedIds, stream: TextStream) -> Result<Seq> {
        let mut z = self.embed(g, &self.arch.source, ids)?;
        if let Some(blocks) = self.arch.stream_blocks.get(stream.index()) {
            let p = self.dropout(g);
            for b in blocks {
                z = b.forward(g, &self.params, &z, &z, false, p)?;
            }
        }
        Ok(z)
    }

    /// Encodes the offset target with the target-side embedding.
    pub fn encode_target(&self, g: &mut Graph<T>, ids: &PaddedIds) -> Result<Seq> {
        self.embed(g, &self.arch.target, ids)
    }

    /// `relu(features·W + b)` plus positions unless disabled.
    pub fn encode_video(&self, g: &mut Graph<T>, modality: usize, feats: &PaddedFeatures) -> Result<Seq> {
        let spec = self.config.modalities.get(modality).ok_or_else(|| {
            MtnError::contract(format!("modality index {modality} not configured"))
        })?;
        if feats.dim != spec.dim {
            return Err(MtnError::Data(format!(
                "modality {} features have width {} but {} is configured",
                spec.name, feats.dim, spec.dim
            )));
        }
        let batch = feats.lens.len();
        let data = feats.data.iter().map(|&v| T::from_f32_exact(v)).collect();
        let x = g.constant(Tensor::new(vec![batch * feats.rows, feats.dim], data)?);
        let h = self.arch.video[modality].forward(g, &self.params, x)?;
        let mut h = g.relu(h);
        if self.config.feature_positional {
            let pe = self.positions(g, batch, feats.rows)?;
            h = g.add(h, pe)?;
        }
        let p = self.dropout(g);
        let h = g.dropout(h, p);
        Ok(Seq {
            x: h,
            len: feats.rows,
            lens: feats.lens.clone(),
        })
    }

    /// Runs the query-aware stack. Layer `n` starts from layer `n - 1`'s
    /// output, applies query self-attention, then attends to each
    /// modality's features in turn.
    pub fn qae_forward(&self, g: &mut Graph<T>, query: &Seq, features: &[Seq]) -> Result<QaeOutput> {
        if self.arch.qae.is_empty() {
            return Err(MtnError::contract(format!(
                "variant {} has no query-aware stack",
                self.config.variant
            )));
        }
        self.check_modalities(features.len())?;
        let p = self.dropout(g);
        let mut z = query.clone();
        let mut out = Vec::with_capacity(self.arch.qae.len());
        for layer in &self.arch.qae {
            z = layer.self_attn.forward(g, &self.params, &z, &z, self.config.qae_causal, p)?;
            let mut per_modality = Vec::with_capacity(features.len());
            for (blk, f) in layer.video.iter().zip(features) {
                z = blk.forward(g, &self.params, &z, f, false, p)?;
                per_modality.push(z.clone());
            }
            out.push(per_modality);
        }
        Ok(QaeOutput {
            features: out,
            query: z,
        })
    }

    fn check_modalities(&self, got: usize) -> Result<()> {
        if got != self.config.modalities.len() {
            return Err(MtnError::Data(format!(
                "{} feature streams supplied for {} configured modalities",
                got,
                self.config.modalities.len()
            )));
        }
        Ok(())
    }

    /// Joins history, caption and query per batch item, compacting away
    /// the padding between them.
    fn concat_sources(&self, g: &mut Graph<T>, parts: [&Seq; 3]) -> Result<Seq> {
        let batch = parts[0].batch();
        let joined = g.concat_seq(&parts.map(|s| (s.x, s.len)), batch)?;
        let total: usize = parts.iter().map(|s| s.len).sum();
        let lens: Vec<usize> = (0..batch).map(|b| parts.iter().map(|s| s.lens[b]).sum()).collect();
        let len = lens.iter().copied().max().unwrap_or(0);
        let mut rows = Vec::with_capacity(batch * len);
        for (b, &n) in lens.iter().enumerate() {
            let base = b * total;
            let mut offset = 0;
            for s in parts {
                rows.extend((0..s.lens[b]).map(|j| base + offset + j));
                offset += s.len;
            }
            rows.extend(std::iter::repeat_n(base, len - n));
        }
        let x = g.gather(joined, &rows)?;
        Ok(Seq { x, len, lens })
    }

    /// Runs the decoder stack over the embedded offset target. `video[n]`
    /// holds the features attended by layer `n`, one per modality.
    pub fn decoder_forward(
        &self,
        g: &mut Graph<T>,
        target: &Seq,
        history: &Seq,
        caption: &Seq,
        query: &Seq,
        video: &[Vec<Seq>],
    ) -> Result<Var> {
        if video.len() != self.arch.decoder.len() {
            return Err(MtnError::contract(format!(
                "{} feature sets for {} decoder layers",
                video.len(),
                self.arch.decoder.len()
            )));
        }
        let p = self.dropout(g);
        let concat = if self.config.variant == Variant::ConcatDec {
            Some(self.concat_sources(g, [history, caption, query])?)
        } else {
            None
        };
        let mut z = target.clone();
        for (layer, feats) in self.arch.decoder.iter().zip(video) {
            self.check_modalities(feats.len())?;
            z = layer.self_attn.forward(g, &self.params, &z, &z, true, p)?;
            match &concat {
                Some(src) => z = layer.text[0].forward(g, &self.params, &z, src, false, p)?,
                None => {
                    for (blk, src) in layer.text.iter().zip([history, caption, query]) {
                        z = blk.forward(g, &self.params, &z, src, false, p)?;
                    }
                }
            }
            for (blk, f) in layer.video.iter().zip(feats) {
                z = blk.forward(g, &self.params, &z, f, false, p)?;
            }
        }
        Ok(z.x)
    }

    /// Encodes every source of `batch` and wires the per-layer features.
    pub fn encode(&self, g: &mut Graph<T>, batch: &Batch) -> Result<Sources> {
        self.check_modalities(batch.features.len())?;
        let history = self.encode_text(g, &batch.history, TextStream::History)?;
        let caption = self.encode_text(g, &batch.caption, TextStream::Caption)?;
        let query = self.encode_text(g, &batch.query, TextStream::Query)?;
        let feats = batch
            .features
            .iter()
            .enumerate()
            .map(|(m, f)| self.encode_video(g, m, f))
            .collect::<Result<Vec<_>>>()?;
        let layers = self.config.layers;
        let (video, qae_query) = match self.config.variant {
            Variant::Full => {
                let out = self.qae_forward(g, &query, &feats)?;
                (out.features, Some(out.query))
            }
            Variant::Qe => {
                let out = self.qae_forward(g, &query, &feats)?;
                let last = out.features.last().cloned().unwrap_or_default();
                (vec![last; layers], Some(out.query))
            }
            _ => (vec![feats; layers], None),
        };
        Ok(Sources {
            history,
            caption,
            query,
            video,
            qae_query,
        })
    }

    /// Response logits for `decoder_input` given encoded sources.
    pub fn decode(&self, g: &mut Graph<T>, sources: &Sources, decoder_input: &PaddedIds) -> Result<Var> {
        let target = self.encode_target(g, decoder_input)?;
        let z = self.decoder_forward(
            g,
            &target,
            &sources.history,
            &sources.caption,
            &sources.query,
            &sources.video,
        )?;
        self.arch.response_head.forward(g, &self.params, z)
    }

    /// Full pass: encoders, auto-encoder per variant, decoder and heads.
    pub fn forward(&self, g: &mut Graph<T>, batch: &Batch) -> Result<ModelOutput> {
        let sources = self.encode(g, batch)?;
        let response_logits = self.decode(g, &sources, &batch.decoder_input)?;
        let query_logits = match (&self.arch.query_head, &sources.qae_query) {
            (Some(head), Some(q)) => Some(head.forward(g, &self.params, q.x)?),
            _ => None,
        };
        Ok(ModelOutput {
            response_logits,
            query_logits,
        })
    }
}

/// Repeats batch items of `seq`: output item `i` is input item `items[i]`.
pub fn select_items<T: Real>(g: &mut Graph<T>, seq: &Seq, items: &[usize]) -> Result<Seq> {
    let rows: Vec<usize> = items
        .iter()
        .flat_map(|&b| (0..seq.len).map(move |j| b * seq.len + j))
        .collect();
    let x = g.gather(seq.x, &rows)?;
    Ok(Seq {
        x,
        len: seq.len,
        lens: items.iter().map(|&b| seq.lens[b]).collect(),
    })
}

impl Sources {
    /// Sources for a batch built from `items` of this one.
    pub fn select<T: Real>(&self, g: &mut Graph<T>, items: &[usize]) -> Result<Sources> {
        let video = self
            .video
            .iter()
            .map(|layer| layer.iter().map(|s| select_items(g, s, items)).collect())
            .collect::<Result<Vec<Vec<Seq>>>>()?;
        Ok(Sources {
            history: select_items(g, &self.history, items)?,
            caption: select_items(g, &self.caption, items)?,
            query: select_items(g, &self.query, items)?,
            video,
            qae_query: match &self.qae_query {
                Some(q) => Some(select_items(g, q, items)?),
                None => None,
            },
        })
    }
}
