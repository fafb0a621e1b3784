//! Training, checkpointing and inference.

mod checkpoint;
mod decode;
mod output;
mod train;

pub use checkpoint::{Checkpoint, TensorEntry, MANIFEST_FILE, PARAMS_FILE};
pub use decode::{
    beam_search, decode_examples, greedy, rank_candidates, score_candidates, sequence_score, DecodeConfig,
    ModelScorer, StepScorer,
};
pub use output::{read_generations, write_generations, GenerationRecord};
pub use train::{
    compute_loss, crop_target, perplexity, train, Control, LossParts, StepLog, TrainConfig, TrainReport,
    Validation,
};
