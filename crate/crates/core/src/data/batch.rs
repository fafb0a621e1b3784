//! Id-encoded examples, length-sorted batching and padded batch assembly.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{MtnError, Result};

use super::dataset::DialogueExample;
use super::features::FeatureStore;
use super::vocab::{Vocabulary, EOS, PAD, UNK};

/// A [`DialogueExample`] mapped to vocabulary ids.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedExample {
    pub video_id: String,
    pub dialogue_index: usize,
    pub turn: usize,
    pub history: Vec<usize>,
    pub caption: Vec<usize>,
    pub query: Vec<usize>,
    /// `<sos> ... <eos>`.
    pub target: Vec<usize>,
    pub candidates: Option<Vec<Vec<usize>>>,
}

fn encode_stream(vocab: &Vocabulary, tokens: &[String]) -> Vec<usize> {
    if tokens.is_empty() {
        // An empty stream still needs one attendable key.
        return vec![EOS];
    }
    vocab
        .encode(tokens)
        .into_iter()
        .map(|id| if id == PAD { UNK } else { id })
        .collect()
}

impl EncodedExample {
    pub fn new(example: &DialogueExample, vocab: &Vocabulary) -> Self {
        let target = vocab
            .encode(&example.target)
            .into_iter()
            .map(|id| if id == PAD { UNK } else { id })
            .collect();
        EncodedExample {
            video_id: example.video_id.clone(),
            dialogue_index: example.dialogue_index,
            turn: example.turn,
            history: encode_stream(vocab, &example.history_tokens()),
            caption: encode_stream(vocab, &example.caption),
            query: encode_stream(vocab, &example.query),
            target,
            candidates: example.candidates.as_ref().map(|cands| {
                cands
                    .iter()
                    .map(|c| {
                        let mut ids = vec![super::vocab::SOS];
                        ids.extend(vocab.encode(c).into_iter().map(|id| if id == PAD { UNK } else { id }));
                        ids.push(EOS);
                        ids
                    })
                    .collect()
            }),
        }
    }
}

pub fn encode_examples(examples: &[DialogueExample], vocab: &Vocabulary) -> Vec<EncodedExample> {
    examples.iter().map(|e| EncodedExample::new(e, vocab)).collect()
}

/// Splits example indices into batches of sequences with similar lengths,
/// sorted by history, caption, query and target length. Chunk order is
/// shuffled with `rng`.
pub fn make_batches(examples: &[EncodedExample], batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(MtnError::config("train.batch_size", "must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| {
        let e = &examples[i];
        (e.history.len(), e.caption.len(), e.query.len(), e.target.len(), i)
    });
    let mut chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.shuffle(rng);
    Ok(chunks)
}

/// Right-padded id matrix `[batch, len]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedIds {
    pub ids: Vec<usize>,
    pub len: usize,
    pub lens: Vec<usize>,
}

impl PaddedIds {
    pub fn new(seqs: &[&[usize]]) -> Result<Self> {
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(MtnError::contract("cannot pad an empty batch or sequence"));
        }
        let mut ids = vec![PAD; seqs.len() * len];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * len..b * len + s.len()].copy_from_slice(s);
        }
        Ok(PaddedIds {
            ids,
            len,
            lens: seqs.iter().map(|s| s.len()).collect(),
        })
    }

    pub fn batch(&self) -> usize {
        self.lens.len()
    }

    pub fn row(&self, b: usize) -> &[usize] {
        &self.ids[b * self.len..b * self.len + self.lens[b]]
    }
}

/// Row-padded features of one modality, `[batch * rows, dim]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PaddedFeatures {
    pub data: Vec<f32>,
    pub rows: usize,
    pub dim: usize,
    pub lens: Vec<usize>,
}

/// Everything one forward pass consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub history: PaddedIds,
    pub caption: PaddedIds,
    pub query: PaddedIds,
    pub decoder_input: PaddedIds,
    /// `[batch * decoder_input.len]`, `PAD` past each item's end.
    pub labels: Vec<usize>,
    pub features: Vec<PaddedFeatures>,
}

impl Batch {
    /// Teacher-forced batch: decoder input is `target[..n-1]`, labels are
    /// `target[1..]`. `targets` overrides the example targets (e.g. cropped).
    pub fn new(examples: &[&EncodedExample], targets: &[&[usize]], store: &FeatureStore) -> Result<Self> {
        if examples.len() != targets.len() {
            return Err(MtnError::contract("one target per example required"));
        }
        if let Some(t) = targets.iter().find(|t| t.len() < 2) {
            return Err(MtnError::contract(format!("target {t:?} shorter than two tokens")));
        }
        let inputs: Vec<&[usize]> = targets.iter().map(|t| &t[..t.len() - 1]).collect();
        let decoder_input = PaddedIds::new(&inputs)?;
        let mut labels = vec![PAD; decoder_input.ids.len()];
        for (b, t) in targets.iter().enumerate() {
            let start = b * decoder_input.len;
            labels[start..start + t.len() - 1].copy_from_slice(&t[1..]);
        }
        Batch::assemble(examples, decoder_input, labels, store)
    }

    pub fn from_examples(examples: &[&EncodedExample], store: &FeatureStore) -> Result<Self> {
        let targets: Vec<&[usize]> = examples.iter().map(|e| e.target.as_slice()).collect();
        Batch::new(examples, &targets, store)
    }

    /// One row per decoder prefix, all sharing `example`'s sources. Labels
    /// are all `PAD`.
    pub fn for_decoding(example: &EncodedExample, prefixes: &[&[usize]], store: &FeatureStore) -> Result<Self> {
        let decoder_input = PaddedIds::new(prefixes)?;
        let labels = vec![PAD; decoder_input.ids.len()];
        let examples = vec![example; prefixes.len()];
        Batch::assemble(&examples, decoder_input, labels, store)
    }

    fn assemble(
        examples: &[&EncodedExample],
        decoder_input: PaddedIds,
        labels: Vec<usize>,
        store: &FeatureStore,
    ) -> Result<Self> {
        if examples.is_empty() {
            return Err(MtnError::contract("empty batch"));
        }
        let stream = |f: fn(&EncodedExample) -> &[usize]| {
            PaddedIds::new(&examples.iter().map(|e| f(e)).collect::<Vec<_>>())
        };
        let mut features = Vec::with_capacity(store.modalities().len());
        for (m, spec) in store.modalities().iter().enumerate() {
            let mats = examples
                .iter()
                .map(|e| {
                    store.get(&e.video_id).map(|f| &f[m]).ok_or_else(|| {
                        MtnError::Data(format!("no {} features for video {}", spec.name, e.video_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let rows = mats.iter().map(|f| f.rows).max().unwrap_or(0);
            let mut data = vec![0.0f32; examples.len() * rows * spec.dim];
            for (b, f) in mats.iter().enumerate() {
                let start = b * rows * spec.dim;
                data[start..start + f.data.len()].copy_from_slice(&f.data);
            }
            features.push(PaddedFeatures {
                data,
                rows,
                dim: spec.dim,
                lens: mats.iter().map(|f| f.rows).collect(),
            });
        }
        Ok(Batch {
            history: stream(|e| &e.history)?,
            caption: stream(|e| &e.caption)?,
            query: stream(|e| &e.query)?,
            decoder_input,
            labels,
            features,
        })
    }

    pub fn size(&self) -> usize {
        self.decoder_input.batch()
    }

    /// Number of non-pad labels.
    pub fn label_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != PAD).count()
    }
}
