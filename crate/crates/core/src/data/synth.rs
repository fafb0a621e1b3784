//! Deterministic synthetic dialogue corpus whose answers depend on planted
//! feature patterns.
//!
//! Each video draws a colour, an object, a sound and a place. The place is
//! stated in the caption; the colour and object are planted as one-hot
//! blocks in the visual features and the sound in the audio features, so
//! three of the five answers can only be produced by reading the features.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

use super::dataset::{Dialog, DialogFile, Turn};
use super::features::{FeatureStore, ModalityFeatures, ModalitySpec};

const COLORS: [&str; 8] = ["red", "blue", "green", "yellow", "white", "black", "orange", "purple"];
const OBJECTS: [&str; 8] = ["cup", "phone", "book", "ball", "knife", "towel", "remote", "bag"];
const SOUNDS: [&str; 8] = ["music", "talking", "barking", "rain", "laughter", "traffic", "birds", "whistling"];
const PLACES: [&str; 8] = ["kitchen", "garden", "office", "bedroom", "street", "garage", "park", "hallway"];

pub const AUDIO_ROWS: usize = 3;
pub const VISUAL_ROWS: usize = 4;
pub const NOISE_STD: f64 = 0.25;
pub const DISTRACTORS: usize = 9;

fn word(list: &[&str; 8], i: usize) -> String {
    if i < list.len() {
        list[i].to_string()
    } else {
        format!("{}{}", list[i % list.len()], i / list.len())
    }
}

/// What the generator planted for one turn.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TurnTruth {
    /// The slot word the answer hinges on, if any.
    pub keyword: Option<String>,
    /// Index of the keyword within the (unwrapped) answer tokens.
    pub keyword_position: usize,
    /// True when the keyword is only recoverable from the features.
    pub feature_dependent: bool,
}

#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub dialogs: DialogFile,
    pub features: FeatureStore,
    /// `truths[dialogue][turn - 1]`.
    pub truths: Vec<Vec<TurnTruth>>,
}

/// Modalities emitted by the generator, audio first.
pub fn synth_modalities(grammar_size: usize) -> Vec<ModalitySpec> {
    let g = grammar_size.max(1);
    vec![ModalitySpec::new("audio", g), ModalitySpec::new("visual", 2 * g)]
}

struct Template {
    question: &'static str,
    answer: fn(&[String; 4]) -> String,
    slot: Option<usize>,
    position: usize,
    from_features: bool,
}

// Slots: 0 colour, 1 object, 2 sound, 3 place.
const TEMPLATES: [Template; 5] = [
    Template {
        question: "what color is the video ?",
        answer: |s| format!("it is mostly {} .", s[0]),
        slot: Some(0),
        position: 3,
        from_features: true,
    },
    Template {
        question: "is anyone else there ?",
        answer: |_| "no , only one person .".to_string(),
        slot: None,
        position: 0,
        from_features: false,
    },
    Template {
        question: "what sound can you hear ?",
        answer: |s| format!("i can hear {} .", s[2]),
        slot: Some(2),
        position: 3,
        from_features: true,
    },
    Template {
        question: "where are they ?",
        answer: |s| format!("they are in the {} .", s[3]),
        slot: Some(3),
        position: 4,
        from_features: false,
    },
    Template {
        question: "what is the person holding ?",
        answer: |s| format!("they are holding a {} .", s[1]),
        slot: Some(1),
        position: 4,
        from_features: true,
    },
];

fn all_answers(g: usize) -> Vec<String> {
    let mut out = Vec::new();
    for t in &TEMPLATES {
        for v in 0..if t.slot.is_some() { g } else { 1 } {
            let slots = [word(&COLORS, v), word(&OBJECTS, v), word(&SOUNDS, v), word(&PLACES, v)];
            let a = (t.answer)(&slots);
            if !out.contains(&a) {
                out.push(a);
            }
        }
    }
    out
}

fn planted(rng: &mut ChaCha8Rng, rows: usize, dim: usize, hot: &[usize], noise: &Normal<f64>) -> Vec<f32> {
    let mut data = Vec::with_capacity(rows * dim);
    for _ in 0..rows {
        for c in 0..dim {
            let base = if hot.contains(&c) { 1.0 } else { 0.0 };
            data.push((base + noise.sample(rng)) as f32);
        }
    }
    data
}

/// Generates `n_dialogues` five-turn dialogues over `grammar_size` values
/// per slot. Every turn carries the gold answer plus nine distinct
/// distractors as candidates.
pub fn synth_corpus(seed: u64, n_dialogues: usize, grammar_size: usize) -> SynthCorpus {
    let g = grammar_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let pool = all_answers(g);
    let mut store = FeatureStore::new(synth_modalities(g));
    let mut dialogs = Vec::with_capacity(n_dialogues);
    let mut truths = Vec::with_capacity(n_dialogues);

    for d in 0..n_dialogues {
        let video_id = format!("vid{d:04}");
        let idx: [usize; 4] = std::array::from_fn(|_| rng.gen_range(0..g));
        let slots = [
            word(&COLORS, idx[0]),
            word(&OBJECTS, idx[1]),
            word(&SOUNDS, idx[2]),
            word(&PLACES, idx[3]),
        ];
        let audio = planted(&mut rng, AUDIO_ROWS, g, &[idx[2]], &noise);
        let visual = planted(&mut rng, VISUAL_ROWS, 2 * g, &[idx[0], g + idx[1]], &noise);
        store
            .insert(
                video_id.clone(),
                vec![
                    ModalityFeatures::new("audio", AUDIO_ROWS, g, audio).expect("sized"),
                    ModalityFeatures::new("visual", VISUAL_ROWS, 2 * g, visual).expect("sized"),
                ],
            )
            .expect("widths match");

        let mut turns = Vec::with_capacity(TEMPLATES.len());
        let mut turn_truths = Vec::with_capacity(TEMPLATES.len());
        for t in &TEMPLATES {
            let answer = (t.answer)(&slots);
            let mut others: Vec<&String> = pool.iter().filter(|a| **a != answer).collect();
            others.shuffle(&mut rng);
            let mut candidates: Vec<String> = others.into_iter().take(DISTRACTORS).cloned().collect();
            let at = rng.gen_range(0..=candidates.len());
            candidates.insert(at, answer.clone());
            turns.push(Turn {
                question: t.question.to_string(),
                answer,
                candidates: Some(candidates),
            });
            turn_truths.push(TurnTruth {
                keyword: t.slot.map(|s| slots[s].clone()),
                keyword_position: t.position,
                feature_dependent: t.from_features,
            });
        }
        dialogs.push(Dialog {
            video_id,
            caption: format!("a person is in the {} .", slots[3]),
            summary: "someone is moving around .".to_string(),
            dialog: turns,
        });
        truths.push(turn_truths);
    }

    SynthCorpus {
        dialogs: DialogFile { dialogs },
        features: store,
        truths,
    }
}

impl SynthCorpus {
    /// Writes `<dir>/dialogs.json` and `<dir>/features/<modality>/<id>.mtnf`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| crate::error::MtnError::io(dir, e))?;
        self.dialogs.write(&dir.join("dialogs.json"))?;
        self.features.write_dir(&dir.join("features"))
    }
}
