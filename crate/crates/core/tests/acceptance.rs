//! Acceptance run: prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::time::Instant;

use common::golden;
use mtn_core::data::{
    build_vocab, detokenize, encode_examples, synth_corpus, tokenize, Batch, DialogueExample, EncodedExample,
    FeatureStore, SynthCorpus, TurnTruth, Vocabulary,
};
use mtn_core::engine::{
    crop_target, decode_examples, perplexity, rank_candidates, train, Checkpoint, Control, DecodeConfig, TrainConfig,
    MANIFEST_FILE, PARAMS_FILE,
};
use mtn_core::metrics::{bleu, cider, rouge_l, EvalPair, MetricReport};
use mtn_core::model::{ModelConfig, MtnModel, Variant};
use mtn_core::numerics::{noam_lr, Graph, ScheduleConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

const PPL_TARGET: f64 = 1.2;
const EXACT_TARGET: f64 = 0.95;
const STEP_BUDGET: u64 = 3000;
const OVERFIT_MINUTES: f64 = 10.0;
const GROUNDING_GAP: f64 = 0.30;
const RANK_TARGET: f64 = 0.90;
const LEAK_TOL: f64 = 1e-9;
const LR_TOL: f64 = 1e-7;

struct Report {
    failures: usize,
}

impl Report {
    fn line(&mut self, id: &str, name: &str, pass: bool, detail: String) {
        if !pass {
            self.failures += 1;
        }
        println!("[{}] {id:>2} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    }
}

struct Overfit {
    corpus: SynthCorpus,
    raw: Vec<DialogueExample>,
    vocab: Vocabulary,
    examples: Vec<EncodedExample>,
}

impl Overfit {
    fn new() -> Self {
        let corpus = synth_corpus(7, 32, 4);
        let raw = corpus.dialogs.examples(1);
        let vocab = build_vocab(&raw, 1);
        let examples = encode_examples(&raw, &vocab);
        Overfit {
            corpus,
            raw,
            vocab,
            examples,
        }
    }

    fn config(&self, p: f64) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            dim: 32,
            ff_dim: 64,
            sim_probability: p,
            max_history: 1,
            ..ModelConfig::base(self.vocab.len(), self.corpus.features.modalities().to_vec())
        }
    }

    fn truths(&self) -> Vec<&TurnTruth> {
        self.corpus.truths.iter().flatten().collect()
    }
}

struct RunOutcome {
    model: MtnModel<f32>,
    steps: u64,
    perplexity: f64,
    exact: usize,
    responses: Vec<String>,
    met_at: Option<u64>,
    secs: f64,
}

fn greedy_responses(model: &MtnModel<f32>, data: &Overfit, features: &FeatureStore) -> Vec<String> {
    let cfg = DecodeConfig {
        beam_size: 1,
        ..DecodeConfig::default()
    };
    decode_examples(model, &data.vocab, &data.examples, features, &cfg, true)
        .expect("decode")
        .into_iter()
        .map(|r| r.response)
        .collect()
}

fn exact_matches(data: &Overfit, responses: &[String]) -> usize {
    responses
        .iter()
        .zip(&data.raw)
        .filter(|(r, e)| **r == detokenize(e.answer_tokens()))
        .count()
}

/// Trains the tiny model until perplexity and greedy exact match both meet
/// their targets or the step budget runs out.
fn overfit(data: &Overfit, p: f64, features: &FeatureStore) -> RunOutcome {
    let start = Instant::now();
    let mut model = MtnModel::<f32>::new(data.config(p), 7).expect("model");
    let cfg = TrainConfig {
        epochs: usize::MAX,
        max_steps: Some(STEP_BUDGET),
        warmup_steps: 2000,
        label_smoothing: 0.1,
        batch_size: 16,
        seed: 7,
        checkpoint_dir: None,
        validate_every: 100,
    };
    let n = data.examples.len();
    let mut met_at = None;
    let mut last: Option<(u64, f64, Vec<String>)> = None;
    let report = train(&mut model, &data.vocab, &data.examples, &[], features, &cfg, |v, m| {
        if v.perplexity > PPL_TARGET {
            return Control::Continue;
        }
        let responses = greedy_responses(m, data, features);
        let exact = exact_matches(data, &responses);
        last = Some((v.step, v.perplexity, responses));
        if exact as f64 >= EXACT_TARGET * n as f64 {
            met_at = Some(v.step);
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .expect("training");
    let steps = report.last_step();
    let (perplexity, responses) = match last {
        Some((step, ppl, responses)) if step == steps => (ppl, responses),
        _ => (
            report.validations.last().map_or(f64::NAN, |v| v.perplexity),
            greedy_responses(&model, data, features),
        ),
    };
    RunOutcome {
        exact: exact_matches(data, &responses),
        model,
        steps,
        perplexity,
        responses,
        met_at,
        secs: start.elapsed().as_secs_f64(),
    }
}

fn keyword_accuracy(data: &Overfit, responses: &[String]) -> (usize, usize) {
    let mut hit = 0;
    let mut total = 0;
    for (truth, r) in data.truths().iter().zip(responses) {
        if let (true, Some(k)) = (truth.feature_dependent, &truth.keyword) {
            total += 1;
            if tokenize(r).get(truth.keyword_position) == Some(k) {
                hit += 1;
            }
        }
    }
    (hit, total)
}

fn describe(run: &RunOutcome, n: usize) -> String {
    format!(
        "{} steps, perplexity {:.4}, greedy exact {}/{} ({:.1}%), {:.0}s",
        run.steps,
        run.perplexity,
        run.exact,
        n,
        100.0 * run.exact as f64 / n as f64,
        run.secs
    )
}

fn gradient_integrity(r: &mut Report) {
    let start = Instant::now();
    let mut checks = common::layer_checks(101);
    checks.extend(common::model_checks(101));
    let secs = start.elapsed().as_secs_f64();
    let worst = checks.iter().max_by(|a, b| a.max_rel.total_cmp(&b.max_rel)).unwrap();
    let failing: Vec<&str> = checks.iter().filter(|c| !c.ok()).map(|c| c.label.as_str()).collect();
    r.line(
        "1",
        "gradient integrity",
        failing.is_empty() && checks.len() >= 20 && secs < 60.0,
        format!(
            "{} shapes, worst rel-err {:.2e} ({}), {:.1}s{}",
            checks.len(),
            worst.max_rel,
            worst.label,
            secs,
            if failing.is_empty() { String::new() } else { format!(", failing: {failing:?}") }
        ),
    );
}

fn tiny_model(tiny: &common::Tiny, v: Variant) -> MtnModel<f64> {
    MtnModel::<f64>::new(common::tiny_config(tiny, v, 32, 2), 3).expect("model")
}

fn shape_audit(r: &mut Report) {
    let tiny = common::tiny_corpus(5, 2);
    let full = tiny_model(&tiny, Variant::Full);
    let modalities = full.config.modalities.len();
    let dec: Vec<usize> = full.decoder_layers().iter().map(|l| 1 + l.text.len() + l.video.len()).collect();
    let qae: Vec<usize> = full.qae_layers().iter().map(|l| 1 + l.video.len()).collect();
    let mut ok = modalities == 2
        && dec.iter().all(|&c| c == 6)
        && qae.iter().all(|&c| c == 3)
        && qae.len() == full.config.layers
        && full.config.decoder_sublayers() == 6
        && full.config.qae_sublayers() == 3;
    let b = common::batch(&tiny, &[0, 1, 4]);
    let mut ran = Vec::new();
    for v in Variant::ALL {
        let m = tiny_model(&tiny, v);
        let mut g = Graph::eval();
        let out = m.forward(&mut g, &b);
        let fine = out.is_ok_and(|o| {
            let t = g.value(o.response_logits);
            t.is_finite() && t.shape() == [b.size() * b.decoder_input.len, m.config.vocab_size]
        });
        ok &= fine;
        ran.push(format!("{v}{}", if fine { "" } else { " (failed)" }));
    }
    r.line(
        "2",
        "architecture shape audit",
        ok,
        format!(
            "FULL with {modalities} modalities: decoder sub-layers {dec:?}, QAE sub-layers {qae:?}; forward at d=32: {}",
            ran.join(", ")
        ),
    );
}

fn autoregressive(r: &mut Report) {
    let tiny = common::tiny_corpus(5, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst = 0.0f64;
    let mut cases = 0;
    for v in Variant::ALL {
        let model = MtnModel::<f64>::new(common::tiny_config(&tiny, v, 16, 2), rng.gen()).unwrap();
        for e in tiny.examples.iter().take(4) {
            let n = e.target.len();
            for i in 0..n - 2 {
                let mut changed = e.target.clone();
                for t in changed.iter_mut().take(n - 1).skip(i + 1) {
                    *t = rng.gen_range(4..tiny.vocab.len());
                }
                let logits = |t: &[usize]| {
                    let b = Batch::new(&[e], &[t], &tiny.features).unwrap();
                    let mut g = Graph::eval();
                    let out = model.forward(&mut g, &b).unwrap();
                    g.value(out.response_logits).clone()
                };
                let (a, b) = (logits(&e.target), logits(&changed));
                for row in 0..=i {
                    for (x, y) in a.row(row).iter().zip(b.row(row)) {
                        worst = worst.max((x - y).abs());
                    }
                }
                cases += 1;
            }
        }
    }
    r.line(
        "3",
        "autoregressive invariant",
        worst <= LEAK_TOL,
        format!("{cases} perturbations over all variants, max change at earlier positions {worst:.2e}"),
    );
}

fn schedule(r: &mut Report) {
    let cfg = ScheduleConfig::new(512, 9660).unwrap();
    let lr = noam_lr(9660, &cfg);
    let want = 512f64.powf(-0.5) * 9660f64.powf(-0.5);
    let peak = (1..=40_000u64).max_by(|&a, &b| noam_lr(a, &cfg).total_cmp(&noam_lr(b, &cfg))).unwrap();
    r.line(
        "7",
        "schedule check",
        (lr - want).abs() <= LR_TOL && peak == 9660,
        format!("lr(9660) = {lr:.6e} (formula {want:.6e}), peak at step {peak}"),
    );
}

fn metrics_oracle(r: &mut Report) {
    let pairs = golden::golden();
    let mut worst: f64 = 0.0;
    for n in 1..=4 {
        let got = bleu(&pairs, n).unwrap();
        worst = worst.max((got - golden::oracle_bleu(n)).abs());
        worst = worst.max((got - golden::COCO_BLEU[n - 1]).abs());
    }
    let rl = rouge_l(&pairs).unwrap();
    worst = worst.max((rl - golden::oracle_rouge()).abs()).max((rl - golden::COCO_ROUGE_L).abs());
    let cd = cider(&pairs).unwrap();
    worst = worst.max((cd - golden::oracle_cider()).abs()).max((cd - golden::COCO_CIDER_D).abs());
    let same: Vec<EvalPair> = golden::GOLDEN
        .iter()
        .map(|(_, r)| EvalPair::new("x", r, r))
        .collect();
    let ident = MetricReport::compute(&same).unwrap();
    r.line(
        "9",
        "metrics oracle suite",
        worst <= golden::TOL && ident.bleu4 == 1.0 && ident.rouge_l == 1.0,
        format!(
            "max deviation from oracle and frozen values {worst:.1e}; identical corpus BLEU4 {} ROUGE-L {}",
            ident.bleu4, ident.rouge_l
        ),
    );
}

fn persistence(r: &mut Report) {
    let tiny = common::tiny_corpus(9, 4);
    let run = |dir: &std::path::Path| {
        let mut model = MtnModel::<f32>::new(common::tiny_config(&tiny, Variant::Full, 16, 2), 5).unwrap();
        let cfg = TrainConfig {
            epochs: usize::MAX,
            max_steps: Some(20),
            warmup_steps: 100,
            batch_size: 8,
            seed: 5,
            checkpoint_dir: Some(dir.to_path_buf()),
            validate_every: 10,
            ..TrainConfig::default()
        };
        train(&mut model, &tiny.vocab, &tiny.examples, &[], &tiny.features, &cfg, |_, _| Control::Continue).unwrap();
        model
    };
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let model = run(a.path());
    run(b.path());
    let files = |d: &std::path::Path| {
        [MANIFEST_FILE, PARAMS_FILE].map(|f| std::fs::read(d.join("step-000020").join(f)).unwrap())
    };
    let identical = files(a.path()) == files(b.path());
    let restored = Checkpoint::load(&a.path().join("step-000020")).unwrap().model().unwrap();
    let batch = common::batch(&tiny, &[0, 2, 5, 7]);
    let out = |m: &MtnModel<f32>| {
        let mut g = Graph::eval();
        let o = m.forward(&mut g, &batch).unwrap();
        let q = o.query_logits.map(|q| g.value(q).clone());
        (g.value(o.response_logits).clone(), q)
    };
    let exact = out(&model) == out(&restored);
    let ppl_same = perplexity(&model, &tiny.examples, &tiny.features, 8).unwrap()
        == perplexity(&restored, &tiny.examples, &tiny.features, 8).unwrap();
    r.line(
        "10",
        "determinism and persistence",
        identical && exact && ppl_same,
        format!("repeat run byte-identical: {identical}; reloaded forward bit-exact: {exact}; perplexity equal: {ppl_same}"),
    );
}

fn crop_uniformity() -> (bool, String) {
    let target: Vec<usize> = (0..12).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut counts = vec![0usize; target.len()];
    for _ in 0..10_000 {
        counts[crop_target(&target, 1.0, &mut rng).len()] += 1;
    }
    let cells = &counts[2..];
    let expected = 10_000.0 / cells.len() as f64;
    let chi2: f64 = cells.iter().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    let p = 1.0 - ChiSquared::new((cells.len() - 1) as f64).unwrap().cdf(chi2);
    (p > 0.01, format!("crop lengths 2..=11 chi-square {chi2:.2} (p = {p:.3})"))
}

fn main() {
    let total = Instant::now();
    let mut r = Report { failures: 0 };

    gradient_integrity(&mut r);
    shape_audit(&mut r);
    autoregressive(&mut r);

    let data = Overfit::new();
    let n = data.examples.len();
    let features = data.corpus.features.clone();
    let half = overfit(&data, 0.5, &features);
    let met = |run: &RunOutcome| run.met_at.is_some() && run.perplexity <= PPL_TARGET;
    r.line(
        "4",
        "overfit acceptance (p=0.5)",
        met(&half) && half.secs <= OVERFIT_MINUTES * 60.0,
        describe(&half, n),
    );

    let control = overfit(&data, 0.5, &features.zeroed());
    let (fh, ft) = keyword_accuracy(&data, &half.responses);
    let (ch, ct) = keyword_accuracy(&data, &control.responses);
    let (fa, ca) = (fh as f64 / ft as f64, ch as f64 / ct as f64);
    r.line(
        "5",
        "feature grounding",
        fa - ca >= GROUNDING_GAP,
        format!(
            "feature-dependent keyword accuracy FULL {fh}/{ft} ({:.1}%) vs zeroed features {ch}/{ct} ({:.1}%), gap {:.1} pp",
            100.0 * fa,
            100.0 * ca,
            100.0 * (fa - ca)
        ),
    );

    let (uniform, crop_detail) = crop_uniformity();
    let none = overfit(&data, 0.0, &features);
    let all = overfit(&data, 1.0, &features);
    let all_fails = (all.exact as f64) < EXACT_TARGET * n as f64;
    r.line(
        "6",
        "cropping behaviour",
        uniform && met(&none) && met(&half) && all_fails,
        format!(
            "{crop_detail}; p=0: {}; p=1: {}",
            describe(&none, n),
            describe(&all, n)
        ),
    );

    schedule(&mut r);

    let mut first = 0;
    let mut ranked = 0;
    for e in &data.examples {
        let cands = e.candidates.as_ref().expect("synthetic turns carry candidates");
        let gold = cands.iter().position(|c| *c == e.target).expect("gold among candidates");
        ranked += 1;
        if rank_candidates(&half.model, e, cands, &features).unwrap()[0] == gold {
            first += 1;
        }
    }
    r.line(
        "8",
        "ranking mode",
        first as f64 >= RANK_TARGET * ranked as f64,
        format!("gold ranked first for {first}/{ranked} training examples with 9 distractors each"),
    );

    metrics_oracle(&mut r);
    persistence(&mut r);

    println!(
        "acceptance: {} failing, total {:.0}s",
        r.failures,
        total.elapsed().as_secs_f64()
    );
    if r.failures > 0 {
        std::process::exit(1);
    }
}
