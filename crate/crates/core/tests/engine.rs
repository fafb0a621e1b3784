mod common;

use std::path::Path;

use common::{batch, tiny_config, tiny_corpus, Tiny};
use mtn_core::data::{Batch, EncodedExample, EOS, PAD, SOS};
use mtn_core::engine::{
    beam_search, compute_loss, perplexity, score_candidates, sequence_score, train, Checkpoint, Control,
    DecodeConfig, StepScorer, TrainConfig, MANIFEST_FILE, PARAMS_FILE,
};
use mtn_core::model::{MtnModel, Variant};
use mtn_core::numerics::{log_softmax_excluding, noam_lr, Graph, ScheduleConfig, Tensor};

/// Fixed random table indexed by (prefix length, last token).
struct Table {
    vocab: usize,
}

impl Table {
    fn row(&self, prefix: &[usize]) -> Vec<f64> {
        let last = *prefix.last().unwrap();
        let raw: Vec<f64> = (0..self.vocab)
            .map(|t| (((t * 31 + last * 17 + prefix.len() * 13) % 23) as f64 * 0.37).sin() * 2.0)
            .collect();
        let t = Tensor::new(vec![1, self.vocab], raw).unwrap();
        log_softmax_excluding(&t, PAD).data().to_vec()
    }
}

impl StepScorer for Table {
    fn log_probs(&mut self, _: &[usize], prefixes: &[&[usize]]) -> mtn_core::Result<Vec<Vec<f64>>> {
        Ok(prefixes.iter().map(|p| self.row(p)).collect())
    }
}

/// Best complete hypothesis by brute force over every token sequence:
/// those ending in `<eos>` within `max_len`, and those cut at `max_len`.
fn exhaustive(table: &Table, max_len: usize, alpha: f64) -> Vec<usize> {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut frontier = vec![(vec![SOS], 0.0)];
    for depth in 1..=max_len {
        let mut next = Vec::new();
        for (seq, lp) in &frontier {
            let row = table.row(seq);
            for (tok, &l) in row.iter().enumerate() {
                if !l.is_finite() {
                    continue;
                }
                let mut s = seq.clone();
                s.push(tok);
                let total = lp + l;
                if tok == EOS || depth == max_len {
                    let score = sequence_score(total, depth, alpha);
                    if best.as_ref().is_none_or(|(b, _)| score > *b) {
                        best = Some((score, s.clone()));
                    }
                }
                if tok != EOS {
                    next.push((s, total));
                }
            }
        }
        frontier = next;
    }
    let mut out = best.unwrap().1.split_off(1);
    if out.last() == Some(&EOS) {
        out.pop();
    }
    out
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    let table = Table { vocab: 6 };
    for max_len in 1..=4 {
        for alpha in [0.0, 0.6, 1.0, 2.0] {
            let cfg = DecodeConfig {
                beam_size: 10_000,
                length_penalty: alpha,
                max_len,
            };
            let got = beam_search(&mut Table { vocab: 6 }, &cfg).unwrap();
            assert_eq!(got, exhaustive(&table, max_len, alpha), "max_len {max_len}, alpha {alpha}");
        }
    }
}

#[test]
fn candidate_scores_agree_with_unsmoothed_loss() {
    let tiny = tiny_corpus(3, 2);
    let model = MtnModel::<f64>::new(tiny_config(&tiny, Variant::Full, 8, 2), 9).unwrap();
    let example = &tiny.examples[1];
    let cands = example.candidates.clone().unwrap();
    let scores = score_candidates(&model, example, &cands, &tiny.features).unwrap();
    for (c, s) in cands.iter().zip(&scores) {
        let b = Batch::new(&[example], &[c.as_slice()], &tiny.features).unwrap();
        let mut g = Graph::eval();
        let (_, parts) = compute_loss(&mut g, &model, &b, 0.0).unwrap();
        assert!((s + parts.response).abs() < 1e-12, "{s} vs {}", parts.response);
    }
}

fn train_cfg(dir: Option<&Path>, max_steps: u64) -> TrainConfig {
    TrainConfig {
        epochs: 100,
        max_steps: Some(max_steps),
        warmup_steps: 50,
        batch_size: 8,
        seed: 4,
        checkpoint_dir: dir.map(Path::to_path_buf),
        validate_every: 5,
        ..TrainConfig::default()
    }
}

fn tiny_run(tiny: &Tiny, dir: Option<&Path>, max_steps: u64) -> (MtnModel<f32>, mtn_core::engine::TrainReport) {
    let mut model = MtnModel::<f32>::new(tiny_config(tiny, Variant::Full, 8, 2), 1).unwrap();
    let report = train(
        &mut model,
        &tiny.vocab,
        &tiny.examples,
        &[],
        &tiny.features,
        &train_cfg(dir, max_steps),
        |_, _| Control::Continue,
    )
    .unwrap();
    (model, report)
}

#[test]
fn applied_learning_rate_is_the_schedule() {
    let tiny = tiny_corpus(3, 4);
    let (model, report) = tiny_run(&tiny, None, 12);
    let schedule = ScheduleConfig::new(model.config.dim, 50).unwrap();
    assert_eq!(report.steps.len(), 12);
    for s in &report.steps {
        assert_eq!(s.lr, noam_lr(s.step, &schedule));
        assert!(s.loss.total.is_finite() && s.loss.query.is_some());
    }
    assert_eq!(report.validations.iter().map(|v| v.step).collect::<Vec<_>>(), [5, 10, 12]);
}

fn file_bytes(dir: &Path) -> (Vec<u8>, Vec<u8>) {
    (
        std::fs::read(dir.join(MANIFEST_FILE)).unwrap(),
        std::fs::read(dir.join(PARAMS_FILE)).unwrap(),
    )
}

#[test]
fn training_is_reproducible_to_the_byte() {
    let tiny = tiny_corpus(3, 4);
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_run(&tiny, Some(a.path()), 10);
    tiny_run(&tiny, Some(b.path()), 10);
    for sub in ["step-000005", "step-000010", "best"] {
        assert_eq!(file_bytes(&a.path().join(sub)), file_bytes(&b.path().join(sub)), "{sub}");
    }
}

#[test]
fn checkpoint_roundtrip_is_exact() {
    let tiny = tiny_corpus(3, 4);
    let dir = tempfile::tempdir().unwrap();
    let (model, report) = tiny_run(&tiny, Some(dir.path()), 10);

    let step10 = dir.path().join("step-000010");
    let loaded = Checkpoint::load(&step10).unwrap();
    assert_eq!(loaded.step, 10);
    assert_eq!(loaded.adam.as_ref().unwrap().step, 10);
    let again = tempfile::tempdir().unwrap();
    loaded.save(again.path()).unwrap();
    assert_eq!(file_bytes(&step10), file_bytes(again.path()));

    let restored = loaded.model().unwrap();
    let b = batch(&tiny, &[0, 1, 2, 5]);
    let logits = |m: &MtnModel<f32>| {
        let mut g = Graph::eval();
        let out = m.forward(&mut g, &b).unwrap();
        g.value(out.response_logits).clone()
    };
    assert_eq!(logits(&model), logits(&restored));

    let recorded = report.validations.iter().find(|v| v.step == 10).unwrap().perplexity;
    let ppl = perplexity(&restored, &tiny.examples, &tiny.features, 8).unwrap();
    assert_eq!(ppl, recorded);
}

#[test]
fn checkpoint_rejects_truncated_parameters() {
    let tiny = tiny_corpus(3, 2);
    let model = MtnModel::<f32>::new(tiny_config(&tiny, Variant::NoQae, 8, 2), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    Checkpoint::new(&model, &tiny.vocab, 0, None).save(dir.path()).unwrap();
    let path = dir.path().join(PARAMS_FILE);
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
    assert!(Checkpoint::load(dir.path()).is_err());
}

#[test]
fn scores_ignore_other_candidates_in_the_batch() {
    let tiny = tiny_corpus(3, 2);
    let model = MtnModel::<f64>::new(tiny_config(&tiny, Variant::Full, 8, 2), 2).unwrap();
    let e: &EncodedExample = &tiny.examples[2];
    let cands = e.candidates.clone().unwrap();
    let all = score_candidates(&model, e, &cands, &tiny.features).unwrap();
    for (i, c) in cands.iter().enumerate() {
        let one = score_candidates(&model, e, std::slice::from_ref(c), &tiny.features).unwrap();
        assert!((one[0] - all[i]).abs() < 1e-12);
    }
}
