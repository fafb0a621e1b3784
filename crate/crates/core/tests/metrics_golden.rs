mod common;

use common::golden::*;
use mtn_core::metrics::{bleu, cider, rouge_l, EvalPair, MetricReport};

#[test]
fn bleu_matches_oracle_and_reference() {
    let pairs = golden();
    for n in 1..=4 {
        let got = bleu(&pairs, n).unwrap();
        assert!((got - oracle_bleu(n)).abs() < TOL, "bleu{n}: {got} vs oracle {}", oracle_bleu(n));
        assert!((got - COCO_BLEU[n - 1]).abs() < TOL, "bleu{n}: {got} vs frozen");
    }
}

#[test]
fn rouge_matches_oracle_and_reference() {
    let got = rouge_l(&golden()).unwrap();
    assert!((got - oracle_rouge()).abs() < TOL);
    assert!((got - COCO_ROUGE_L).abs() < TOL, "{got}");
}

#[test]
fn cider_matches_oracle_and_reference() {
    let got = cider(&golden()).unwrap();
    assert!((got - oracle_cider()).abs() < TOL, "{got} vs {}", oracle_cider());
    assert!((got - COCO_CIDER_D).abs() < TOL, "{got}");
}

#[test]
fn identical_corpus_is_perfect() {
    let pairs: Vec<EvalPair> = GOLDEN
        .iter()
        .enumerate()
        .map(|(i, (_, r))| EvalPair::new(i.to_string(), r, r))
        .collect();
    let report = MetricReport::compute(&pairs).unwrap();
    assert_eq!(report.bleu4, 1.0);
    assert_eq!(report.rouge_l, 1.0);
    assert!((report.cider - 10.0).abs() < TOL);
}

/// Corpus BLEU can rise with the order when a short hypothesis contributes
/// an unmatched unigram but no bigrams.
#[test]
fn corpus_bleu_can_rise_with_order() {
    let pairs = [EvalPair::new("0", "x", "y"), EvalPair::new("1", "a b", "a b")];
    let b1 = bleu(&pairs, 1).unwrap();
    let b2 = bleu(&pairs, 2).unwrap();
    assert!((b1 - 2.0 / 3.0).abs() < TOL);
    assert!((b2 - (2.0f64 / 3.0).sqrt()).abs() < TOL);
    assert!(b2 > b1);
}
