use serde::{Deserialize, Serialize};

use crate::data::{detokenize, Batch, EncodedExample, FeatureStore, PaddedIds, Vocabulary, EOS, PAD, SOS};
use crate::error::{MtnError, Result};
use crate::model::{MtnModel, Sources};
use crate::numerics::{log_softmax_excluding, Graph, Real, Tensor};

use super::output::GenerationRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_size: usize,
    pub length_penalty: f64,
    /// Upper bound on generated tokens, `<eos>` included.
    pub max_len: usize,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_size: 5,
            length_penalty: 1.0,
            max_len: 30,
        }
    }
}

/// Next-token log-probabilities for a set of prefixes.
pub trait StepScorer {
    /// `items[i]` names the source the `i`-th prefix conditions on. Each
    /// returned row has one entry per vocabulary id.
    fn log_probs(&mut self, items: &[usize], prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

/// Scores prefixes with a model over sources encoded once up front.
pub struct ModelScorer<'a, T: Real> {
    model: &'a MtnModel<T>,
    graph: Graph<T>,
    sources: Sources,
}

impl<'a, T: Real> ModelScorer<'a, T> {
    pub fn new(model: &'a MtnModel<T>, examples: &[&EncodedExample], features: &FeatureStore) -> Result<Self> {
        let targets: Vec<Vec<usize>> = examples.iter().map(|_| vec![SOS, EOS]).collect();
        let target_refs: Vec<&[usize]> = targets.iter().map(Vec::as_slice).collect();
        let batch = Batch::new(examples, &target_refs, features)?;
        let mut graph = Graph::eval();
        let sources = model.encode(&mut graph, &batch)?;
        Ok(ModelScorer { model, graph, sources })
    }
}

impl<T: Real> StepScorer for ModelScorer<'_, T> {
    fn log_probs(&mut self, items: &[usize], prefixes: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let g = &mut self.graph;
        let sources = self.sources.select(g, items)?;
        let input = PaddedIds::new(prefixes)?;
        let logits = self.model.decode(g, &sources, &input)?;
        let value = g.value(logits);
        let v = value.cols();
        let mut rows = Vec::with_capacity(prefixes.len());
        for (b, p) in prefixes.iter().enumerate() {
            rows.extend_from_slice(value.row(b * input.len + p.len() - 1));
        }
        let last = Tensor::new(vec![prefixes.len(), v], rows)?;
        let lp = log_softmax_excluding(&last, PAD);
        Ok(lp
            .data()
            .chunks(v)
            .map(|r| r.iter().map(|x| x.to_f64().unwrap_or(f64::NEG_INFINITY)).collect())
            .collect())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// `logp / len^alpha` with `len` counting generated tokens.
pub fn sequence_score(logp: f64, generated: usize, alpha: f64) -> f64 {
    logp / (generated.max(1) as f64).powf(alpha)
}

/// Greedy decoding for every item at once. Returns token ids after
/// `<sos>` (including `<eos>` when produced) and their total log-prob.
fn greedy_raw(scorer: &mut dyn StepScorer, items: usize, max_len: usize) -> Result<Vec<(Vec<usize>, f64)>> {
    let mut seqs: Vec<Vec<usize>> = vec![vec![SOS]; items];
    let mut logp = vec![0.0; items];
    let mut done = vec![false; items];
    for _ in 0..max_len {
        let active: Vec<usize> = (0..items).filter(|&i| !done[i]).collect();
        if active.is_empty() {
            break;
        }
        let prefixes: Vec<&[usize]> = active.iter().map(|&i| seqs[i].as_slice()).collect();
        let rows = scorer.log_probs(&active, &prefixes)?;
        for (&i, row) in active.iter().zip(&rows) {
            let tok = argmax(row);
            seqs[i].push(tok);
            logp[i] += row[tok];
            done[i] = tok == EOS;
        }
    }
    Ok(seqs.into_iter().zip(logp).map(|(mut s, lp)| (s.split_off(1), lp)).collect())
}

fn strip(mut tokens: Vec<usize>) -> Vec<usize> {
    if tokens.last() == Some(&EOS) {
        tokens.pop();
    }
    tokens
}

/// Greedy decoding of `items` sources; `<sos>`/`<eos>` removed.
pub fn greedy(scorer: &mut dyn StepScorer, items: usize, max_len: usize) -> Result<Vec<Vec<usize>>> {
    Ok(greedy_raw(scorer, items, max_len)?
        .into_iter()
        .map(|(s, _)| strip(s))
        .collect())
}

/// Beam search over source 0. Candidates are expanded from every live
/// hypothesis; an `<eos>` candidate ranked within the top `beam_size`
/// finishes a hypothesis. Search ends once `beam_size` hypotheses have
/// finished or `max_len` tokens were generated. The greedy hypothesis is
/// also kept as a finished candidate, so the result never scores below it.
pub fn beam_search(scorer: &mut dyn StepScorer, cfg: &DecodeConfig) -> Result<Vec<usize>> {
    if cfg.beam_size == 0 || cfg.max_len == 0 {
        return Err(MtnError::contract("beam size and max length must be positive"));
    }
    let alpha = cfg.length_penalty;
    let (greedy_seq, greedy_lp) = greedy_raw(scorer, 1, cfg.max_len)?.remove(0);
    let mut finished: Vec<(Vec<usize>, f64)> = Vec::new();
    let mut live: Vec<(Vec<usize>, f64)> = vec![(vec![SOS], 0.0)];

    for step in 0..cfg.max_len {
        let prefixes: Vec<&[usize]> = live.iter().map(|(s, _)| s.as_slice()).collect();
        let rows = scorer.log_probs(&vec![0; live.len()], &prefixes)?;
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, row) in rows.iter().enumerate() {
            for (tok, &lp) in row.iter().enumerate() {
                if lp.is_finite() {
                    cands.push((h, tok, live[h].1 + lp));
                }
            }
        }
        cands.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
        let last_step = step + 1 == cfg.max_len;
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (rank, &(h, tok, lp)) in cands.iter().enumerate() {
            let mut seq = live[h].0.clone();
            seq.push(tok);
            if tok == EOS {
                if rank < cfg.beam_size {
                    finished.push((seq, lp));
                }
            } else if next.len() < cfg.beam_size {
                next.push((seq, lp));
            }
            if next.len() == cfg.beam_size && rank + 1 >= cfg.beam_size {
                break;
            }
        }
        if finished.len() >= cfg.beam_size {
            break;
        }
        if last_step || next.is_empty() {
            finished.extend(next);
            break;
        }
        live = next;
    }

    let score = |(s, lp): &(Vec<usize>, f64)| sequence_score(*lp, s.len() - 1, alpha);
    let mut best = (vec![SOS].into_iter().chain(greedy_seq).collect::<Vec<_>>(), greedy_lp);
    for f in finished {
        if score(&f) > score(&best) {
            best = f;
        }
    }
    Ok(strip(best.0.split_off(1)))
}

/// Decodes every example and renders responses as text.
pub fn decode_examples<T: Real>(
    model: &MtnModel<T>,
    vocab: &Vocabulary,
    examples: &[EncodedExample],
    features: &FeatureStore,
    cfg: &DecodeConfig,
    greedy_mode: bool,
) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::with_capacity(examples.len());
    const CHUNK: usize = 32;
    for chunk in examples.chunks(CHUNK) {
        let ids: Vec<Vec<usize>> = if greedy_mode {
            let refs: Vec<&EncodedExample> = chunk.iter().collect();
            let mut scorer = ModelScorer::new(model, &refs, features)?;
            greedy(&mut scorer, refs.len(), cfg.max_len)?
        } else {
            chunk
                .iter()
                .map(|e| {
                    let mut scorer = ModelScorer::new(model, &[e], features)?;
                    beam_search(&mut scorer, cfg)
                })
                .collect::<Result<_>>()?
        };
        for (e, ids) in chunk.iter().zip(ids) {
            out.push(GenerationRecord {
                dialogue_id: e.video_id.clone(),
                turn: e.turn,
                response: detokenize(&vocab.decode(&ids)),
            });
        }
    }
    Ok(out)
}

/// Length-normalized teacher-forced log-probability of each candidate
/// (`<sos> ... <eos>` wrapped ids).
pub fn score_candidates<T: Real>(
    model: &MtnModel<T>,
    example: &EncodedExample,
    candidates: &[Vec<usize>],
    features: &FeatureStore,
) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(MtnError::contract("no candidates to rank"));
    }
    let refs = vec![example; candidates.len()];
    let targets: Vec<&[usize]> = candidates.iter().map(Vec::as_slice).collect();
    let batch = Batch::new(&refs, &targets, features)?;
    let mut g = Graph::eval();
    let out = model.forward(&mut g, &batch)?;
    let lp = log_softmax_excluding(g.value(out.response_logits), PAD);
    let len = batch.decoder_input.len;
    Ok((0..candidates.len())
        .map(|b| {
            let labels = &batch.labels[b * len..(b + 1) * len];
            let n = labels.iter().filter(|&&l| l != PAD).count();
            let total: f64 = labels
                .iter()
                .enumerate()
                .filter(|(_, &l)| l != PAD)
                .map(|(i, &l)| lp.at(b * len + i, l).to_f64().unwrap_or(f64::NEG_INFINITY))
                .sum();
            total / n as f64
        })
        .collect())
}

/// Candidate indices by descending score; ties keep their original order.
pub fn rank_candidates<T: Real>(
    model: &MtnModel<T>,
    example: &EncodedExample,
    candidates: &[Vec<usize>],
    features: &FeatureStore,
) -> Result<Vec<usize>> {
    let scores = score_candidates(model, example, candidates, features)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    Ok(order)
}
