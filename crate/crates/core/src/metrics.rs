//! Corpus BLEU-1..4, ROUGE-L and CIDEr-D over single-reference pairs.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::tokenize;
use crate::engine::read_generations;
use crate::error::{MtnError, Result};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
pub const CIDER_MAX_N: usize = 4;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub hypothesis: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, hypothesis: &str, reference: &str) -> Self {
        EvalPair {
            id: id.into(),
            hypothesis: tokenize(hypothesis),
            reference: tokenize(reference),
        }
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU with clipped n-gram precision, uniform weights over orders
/// `1..=n` and a brevity penalty. A zero precision at any order gives 0.
pub fn bleu(pairs: &[EvalPair], n: usize) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MtnError::contract("BLEU over an empty corpus"));
    }
    if !(1..=4).contains(&n) {
        return Err(MtnError::contract(format!("BLEU order {n} outside 1..=4")));
    }
    let mut log_sum = 0.0;
    for order in 1..=n {
        let (mut matched, mut total) = (0usize, 0usize);
        for p in pairs {
            let refs = ngram_counts(&p.reference, order);
            for (gram, c) in ngram_counts(&p.hypothesis, order) {
                matched += c.min(refs.get(gram).copied().unwrap_or(0));
                total += c;
            }
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let hyp_len: usize = pairs.iter().map(|p| p.hypothesis.len()).sum();
    let ref_len: usize = pairs.iter().map(|p| p.reference.len()).sum();
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(bp * (log_sum / n as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair.
pub fn rouge_l_pair(hypothesis: &[String], reference: &[String]) -> f64 {
    if hypothesis.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let l = lcs(hypothesis, reference) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / hypothesis.len() as f64;
    let r = l / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair ROUGE-L.
pub fn rouge_l(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MtnError::contract("ROUGE-L over an empty corpus"));
    }
    let sum: f64 = pairs.iter().map(|p| rouge_l_pair(&p.hypothesis, &p.reference)).sum();
    Ok(sum / pairs.len() as f64)
}

struct TfIdf<'a> {
    vecs: Vec<HashMap<&'a [String], f64>>,
    norms: Vec<f64>,
}

fn tfidf<'a>(tokens: &'a [String], df: &HashMap<&[String], usize>, log_n: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_MAX_N);
    let mut norms = Vec::with_capacity(CIDER_MAX_N);
    for n in 1..=CIDER_MAX_N {
        let mut v = HashMap::new();
        let mut norm = 0.0;
        for (gram, tf) in ngram_counts(tokens, n) {
            let d = (df.get(gram).copied().unwrap_or(0).max(1) as f64).ln();
            let w = tf as f64 * (log_n - d);
            norm += w * w;
            v.insert(gram, w);
        }
        vecs.push(v);
        norms.push(norm.sqrt());
    }
    TfIdf { vecs, norms }
}

/// CIDEr-D: document frequencies over the references, clipped TF-IDF
/// cosine per order with a Gaussian length penalty, averaged over orders
/// 1..4, times 10, averaged over pairs.
pub fn cider(pairs: &[EvalPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(MtnError::contract("CIDEr over an empty corpus"));
    }
    let mut df: HashMap<&[String], usize> = HashMap::new();
    for p in pairs {
        let mut seen = HashSet::new();
        for n in 1..=CIDER_MAX_N {
            if p.reference.len() >= n {
                seen.extend(p.reference.windows(n));
            }
        }
        for g in seen {
            *df.entry(g).or_insert(0) += 1;
        }
    }
    let log_n = (pairs.len() as f64).ln();
    let mut total = 0.0;
    for p in pairs {
        let h = tfidf(&p.hypothesis, &df, log_n);
        let r = tfidf(&p.reference, &df, log_n);
        let delta = p.hypothesis.len() as f64 - p.reference.len() as f64;
        let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
        let mut score = 0.0;
        for n in 0..CIDER_MAX_N {
            let mut dot = 0.0;
            for (gram, &hw) in &h.vecs[n] {
                if let Some(&rw) = r.vecs[n].get(gram) {
                    dot += hw.min(rw) * rw;
                }
            }
            if h.norms[n] != 0.0 && r.norms[n] != 0.0 {
                dot /= h.norms[n] * r.norms[n];
            }
            score += dot * penalty;
        }
        total += score / CIDER_MAX_N as f64 * 10.0;
    }
    Ok(total / pairs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub count: usize,
}

impl MetricReport {
    pub fn compute(pairs: &[EvalPair]) -> Result<Self> {
        Ok(MetricReport {
            bleu1: bleu(pairs, 1)?,
            bleu2: bleu(pairs, 2)?,
            bleu3: bleu(pairs, 3)?,
            bleu4: bleu(pairs, 4)?,
            rouge_l: rouge_l(pairs)?,
            cider: cider(pairs)?,
            count: pairs.len(),
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain struct serializes")
    }
}

/// Pairs generation lines with reference lines by `(dialogue_id, turn)`.
pub fn pair_files(hyp_file: &Path, ref_file: &Path) -> Result<Vec<EvalPair>> {
    let hyps = read_generations(hyp_file)?;
    let refs = read_generations(ref_file)?;
    let mut by_key = BTreeMap::new();
    for r in &refs {
        if by_key.insert((r.dialogue_id.clone(), r.turn), r).is_some() {
            return Err(MtnError::Data(format!(
                "duplicate reference for {} turn {}",
                r.dialogue_id, r.turn
            )));
        }
    }
    let mut pairs = Vec::with_capacity(hyps.len());
    let mut orphans = Vec::new();
    let mut used = HashSet::new();
    for h in &hyps {
        let key = (h.dialogue_id.clone(), h.turn);
        match by_key.get(&key) {
            Some(r) if used.insert(key.clone()) => pairs.push(EvalPair::new(
                format!("{}#{}", h.dialogue_id, h.turn),
                &h.response,
                &r.response,
            )),
            _ => orphans.push(format!("hypothesis {}#{}", h.dialogue_id, h.turn)),
        }
    }
    for key in by_key.keys() {
        if !used.contains(key) {
            orphans.push(format!("reference {}#{}", key.0, key.1));
        }
    }
    if !orphans.is_empty() {
        return Err(MtnError::Data(format!("unmatched entries: {}", orphans.join(", "))));
    }
    Ok(pairs)
}

pub fn evaluate(hyp_file: &Path, ref_file: &Path) -> Result<MetricReport> {
    MetricReport::compute(&pair_files(hyp_file, ref_file)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair(h: &str, r: &str) -> EvalPair {
        EvalPair::new("x", h, r)
    }

    #[test]
    fn bleu_hand_example() {
        let p = [pair("the man stands", "the man sits")];
        assert!((bleu(&p, 1).unwrap() - 2.0 / 3.0).abs() < 1e-12);
        assert!((bleu(&p, 2).unwrap() - (2.0f64 / 3.0 * 0.5).sqrt()).abs() < 1e-12);
        assert_eq!(bleu(&p, 3).unwrap(), 0.0);
    }

    #[test]
    fn identical_and_disjoint() {
        let same = [pair("a b c d e", "a b c d e"), pair("x y z w", "x y z w")];
        assert!((bleu(&same, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!((rouge_l(&same).unwrap() - 1.0).abs() < 1e-12);
        let disjoint = [pair("a b c", "d e f")];
        assert_eq!(bleu(&disjoint, 1).unwrap(), 0.0);
        assert_eq!(rouge_l(&disjoint).unwrap(), 0.0);
        assert_eq!(cider(&disjoint).unwrap(), 0.0);
        assert!(bleu(&[], 1).is_err());
    }

    #[test]
    fn rouge_hand_example() {
        let p = [pair("the cat", "the black cat")];
        let (prec, rec) = (1.0, 2.0 / 3.0);
        let b2 = 1.44;
        let expect = (1.0 + b2) * prec * rec / (rec + b2 * prec);
        assert!((rouge_l(&p).unwrap() - expect).abs() < 1e-12);
        assert_eq!(rouge_l(&[pair("", "a b")]).unwrap(), 0.0);
    }

    #[test]
    fn cider_zero_when_every_ngram_is_everywhere() {
        let p = [pair("a b", "a b"), pair("a b", "a b")];
        assert_eq!(cider(&p).unwrap(), 0.0);
    }
}
