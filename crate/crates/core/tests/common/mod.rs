#![allow(dead_code)]

pub mod golden;

use mtn_core::attention::{FeedForward, MultiHeadAttention, Seq};
use mtn_core::data::{
    build_vocab, encode_examples, synth_corpus, Batch, EncodedExample, FeatureStore, Vocabulary,
};
use mtn_core::model::{ModelConfig, MtnModel, Variant};
use mtn_core::numerics::{Embedding, Gradients, Graph, LayerNorm, Linear, ParamStore, Tensor, Var};
use mtn_core::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;

#[derive(Debug)]
pub struct CheckOutcome {
    pub label: String,
    pub max_rel: f64,
    pub worst: String,
    pub checked: usize,
}

impl CheckOutcome {
    pub fn ok(&self) -> bool {
        self.max_rel <= FD_TOL && self.checked > 0
    }
}

/// Compares backprop gradients with central differences for up to
/// `per_param` randomly chosen entries of every parameter.
pub fn grad_check(
    label: &str,
    store: &ParamStore<f64>,
    per_param: usize,
    seed: u64,
    loss: impl Fn(&mut Graph<f64>, &ParamStore<f64>) -> Result<Var>,
) -> CheckOutcome {
    let eval = |s: &ParamStore<f64>| -> f64 {
        let mut g = Graph::new(true, seed);
        let l = loss(&mut g, s).unwrap();
        g.value(l).data()[0]
    };
    let mut g = Graph::new(true, seed);
    let l = loss(&mut g, store).unwrap();
    g.backward(l).unwrap();
    let mut grads = Gradients::zeros_like(store);
    g.accumulate_param_grads(&mut grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut work = store.clone();
    let mut out = CheckOutcome {
        label: label.to_string(),
        max_rel: 0.0,
        worst: String::new(),
        checked: 0,
    };
    for id in store.ids() {
        let n = store.get(id).numel();
        let picks: Vec<usize> = if n <= per_param {
            (0..n).collect()
        } else {
            (0..per_param).map(|_| rng.gen_range(0..n)).collect()
        };
        for j in picks {
            let orig = store.get(id).data()[j];
            work.get_mut(id).data_mut()[j] = orig + FD_STEP;
            let up = eval(&work);
            work.get_mut(id).data_mut()[j] = orig - FD_STEP;
            let down = eval(&work);
            work.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = grads.get(id)[j];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            out.checked += 1;
            if rel > out.max_rel {
                out.max_rel = rel;
                out.worst = format!("{}[{j}] analytic {analytic:.6e} numeric {numeric:.6e}", store.name(id));
            }
        }
    }
    out
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-scale..scale))
}

/// `sum(x ⊙ r)` for a fixed random `r`, so every output entry matters.
pub fn project(g: &mut Graph<f64>, x: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.value(x).shape().to_vec();
    let r = g.constant(random_tensor(&mut rng, &shape, 1.0));
    let y = g.mul(x, r)?;
    Ok(g.sum(y))
}

/// Every randomized layer-level check, at least twenty shapes in total.
pub fn layer_checks(seed: u64) -> Vec<CheckOutcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    for case in 0..4 {
        let (rows, i, o) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
        let mut s = ParamStore::new();
        let lin = Linear::new(&mut s, &mut rng, "linear", i, o, case % 2 == 0).unwrap();
        let x = s.add("x", random_tensor(&mut rng, &[rows, i], 1.0)).unwrap();
        let ps = rng.gen();
        out.push(grad_check(&format!("linear {rows}x{i}->{o}"), &s, 6, ps, |g, s| {
            let xv = g.param(s, x);
            let y = lin.forward(g, s, xv)?;
            project(g, y, ps)
        }));
    }

    for _ in 0..3 {
        let (vocab, dim, n) = (rng.gen_range(2..8), rng.gen_range(1..6), rng.gen_range(1..7));
        let ids: Vec<usize> = (0..n).map(|_| rng.gen_range(0..vocab)).collect();
        let mut s = ParamStore::new();
        let emb = Embedding::new(&mut s, &mut rng, "embedding", vocab, dim).unwrap();
        let ps = rng.gen();
        out.push(grad_check(&format!("embedding {vocab}x{dim} ids {ids:?}"), &s, 40, ps, |g, s| {
            let y = emb.forward(g, s, &ids)?;
            project(g, y, ps)
        }));
    }

    for _ in 0..3 {
        let (rows, dim) = (rng.gen_range(1..5), rng.gen_range(2..7));
        let mut s = ParamStore::new();
        let ln = LayerNorm::new(&mut s, "norm", dim).unwrap();
        for id in s.ids().collect::<Vec<_>>() {
            let t = random_tensor(&mut rng, &[dim], 1.0);
            *s.get_mut(id) = t;
        }
        let x = s.add("x", random_tensor(&mut rng, &[rows, dim], 2.0)).unwrap();
        let ps = rng.gen();
        out.push(grad_check(&format!("layer_norm {rows}x{dim}"), &s, 8, ps, |g, s| {
            let xv = g.param(s, x);
            let y = ln.forward(g, s, xv)?;
            project(g, y, ps)
        }));
    }

    for case in 0..4 {
        let heads = rng.gen_range(1..3);
        let dim = heads * rng.gen_range(1..4);
        let batch = rng.gen_range(1..3);
        let (lq, lk) = (rng.gen_range(1..4), rng.gen_range(1..4));
        let causal = case == 3;
        let lq = if causal { lk } else { lq };
        let key_lens: Vec<usize> = (0..batch).map(|_| rng.gen_range(1..=lk)).collect();
        let dropout = if case == 2 { 0.3 } else { 0.0 };
        let mut s = ParamStore::new();
        let mha = MultiHeadAttention::new(&mut s, &mut rng, "mha", dim, heads).unwrap();
        let q = s.add("q_in", random_tensor(&mut rng, &[batch * lq, dim], 1.0)).unwrap();
        let k = s.add("kv_in", random_tensor(&mut rng, &[batch * lk, dim], 1.0)).unwrap();
        let ps = rng.gen();
        let label = format!(
            "multi_head h={heads} d={dim} b={batch} {lq}x{lk} lens {key_lens:?}{}{}",
            if causal { " causal" } else { "" },
            if dropout > 0.0 { " dropout" } else { "" }
        );
        out.push(grad_check(&label, &s, 6, ps, |g, s| {
            let qs = Seq {
                x: g.param(s, q),
                len: lq,
                lens: vec![lq; batch],
            };
            let ks = Seq {
                x: g.param(s, k),
                len: lk,
                lens: key_lens.clone(),
            };
            let y = mha.forward(g, s, &qs, &ks, causal, dropout)?;
            project(g, y, ps)
        }));
    }

    for _ in 0..3 {
        let (rows, dim, hidden) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(2..7));
        let mut s = ParamStore::new();
        let ff = FeedForward::new(&mut s, &mut rng, "ff", dim, hidden).unwrap();
        for id in s.ids().collect::<Vec<_>>() {
            if s.name(id).ends_with("bias") {
                let n = s.get(id).numel();
                *s.get_mut(id) = random_tensor(&mut rng, &[n], 0.5);
            }
        }
        let x = s.add("x", random_tensor(&mut rng, &[rows, dim], 1.0)).unwrap();
        let ps = rng.gen();
        out.push(grad_check(&format!("feed_forward {rows}x{dim} hidden {hidden}"), &s, 6, ps, |g, s| {
            let xv = g.param(s, x);
            let y = ff.forward(g, s, xv)?;
            project(g, y, ps)
        }));
    }

    for case in 0..3 {
        let (rows, dim, vocab) = (rng.gen_range(1..5), rng.gen_range(1..5), rng.gen_range(3..8));
        let eps = [0.0, 0.1, 0.3][case];
        let targets: Vec<usize> = (0..rows)
            .map(|r| if r == 0 { 1 + rng.gen_range(0..vocab - 1) } else { rng.gen_range(0..vocab) })
            .collect();
        let mut s = ParamStore::new();
        let head = Linear::new(&mut s, &mut rng, "head", dim, vocab, true).unwrap();
        let x = s.add("x", random_tensor(&mut rng, &[rows, dim], 1.0)).unwrap();
        out.push(grad_check(
            &format!("head+smoothed_nll {rows}x{dim}->{vocab} eps {eps}"),
            &s,
            8,
            1,
            |g, s| {
                let xv = g.param(s, x);
                let logits = head.forward(g, s, xv)?;
                g.smoothed_nll(logits, &targets, eps, 0)
            },
        ));
    }

    {
        let mut s = ParamStore::new();
        let x = s.add("x", random_tensor(&mut rng, &[3, 4], 2.0)).unwrap();
        let w = s.add("w", random_tensor(&mut rng, &[5, 4], 1.0)).unwrap();
        out.push(grad_check("matmul_nt+softmax+log", &s, 20, 3, |g, s| {
            let (xv, wv) = (g.param(s, x), g.param(s, w));
            let y = g.matmul_nt(xv, wv)?;
            let p = g.softmax(y);
            let l = g.log(p)?;
            let l = g.scale(l, -0.5);
            project(g, l, 9)
        }));
    }
    out
}

/// Small synthetic setup shared by model-level tests.
pub struct Tiny {
    pub vocab: Vocabulary,
    pub examples: Vec<EncodedExample>,
    pub features: FeatureStore,
}

pub fn tiny_corpus(seed: u64, dialogues: usize) -> Tiny {
    let corpus = synth_corpus(seed, dialogues, 4);
    let raw = corpus.dialogs.examples(1);
    let vocab = build_vocab(&raw, 1);
    Tiny {
        examples: encode_examples(&raw, &vocab),
        vocab,
        features: corpus.features,
    }
}

pub fn tiny_config(tiny: &Tiny, variant: Variant, dim: usize, heads: usize) -> ModelConfig {
    ModelConfig {
        layers: 2,
        heads,
        dim,
        ff_dim: 2 * dim,
        dropout: 0.1,
        variant,
        max_history: 1,
        ..ModelConfig::base(tiny.vocab.len(), tiny.features.modalities().to_vec())
    }
}

pub fn batch(tiny: &Tiny, idx: &[usize]) -> Batch {
    let refs: Vec<&EncodedExample> = idx.iter().map(|&i| &tiny.examples[i]).collect();
    Batch::from_examples(&refs, &tiny.features).unwrap()
}

/// Whole-network checks: every variant, both heads, dropout active.
pub fn model_checks(seed: u64) -> Vec<CheckOutcome> {
    let tiny = tiny_corpus(seed, 2);
    let b = batch(&tiny, &[0, 3, 6]);
    Variant::ALL
        .iter()
        .map(|&v| {
            let model = MtnModel::<f64>::new(tiny_config(&tiny, v, 4, 2), seed).unwrap();
            grad_check(&format!("model {v}"), &model.params, 2, seed, |g, s| {
                let m = model.clone().with_params(s.clone())?;
                let (loss, _) = mtn_core::engine::compute_loss(g, &m, &b, 0.1)?;
                Ok(loss)
            })
        })
        .collect()
}
