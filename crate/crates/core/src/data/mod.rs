//! Tokenization, vocabulary, dialogue and feature ingestion, batching and
//! the synthetic corpus.

pub mod batch;
pub mod dataset;
pub mod features;
pub mod synth;
pub mod tokenize;
pub mod vocab;

pub use batch::{encode_examples, make_batches, Batch, EncodedExample, PaddedFeatures, PaddedIds};
pub use dataset::{build_vocab, load_dataset, wrap_target, Dialog, DialogFile, DialogueExample, Turn};
pub use features::{feature_path, load_features, FeatureStore, ModalityFeatures, ModalitySpec};
pub use synth::{synth_corpus, synth_modalities, SynthCorpus, TurnTruth};
pub use tokenize::{detokenize, tokenize};
pub use vocab::{Vocabulary, EOS, PAD, SOS, UNK};
