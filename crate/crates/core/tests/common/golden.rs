//! Five-pair golden corpus, frozen reference scores from the COCO caption
//! evaluation scorers, and a brute-force oracle written without reference
//! to the library implementation.

use mtn_core::metrics::EvalPair;

pub const GOLDEN: [(&str, &str); 5] = [
    ("the man is walking in the kitchen", "a man walks into the kitchen"),
    ("she is holding a red cup", "she is holding a red cup"),
    ("there is no sound", "there is no sound in the video"),
    ("the dog runs outside", "a person opens the door and leaves the room"),
    ("he picks up the phone and talks", "he picks up his phone"),
];

pub const COCO_BLEU: [f64; 4] = [
    0.5377270546499374,
    0.4638067612371229,
    0.4120807872064582,
    0.3663344724260697,
];
pub const COCO_ROUGE_L: f64 = 0.5984808753818353;
pub const COCO_CIDER_D: f64 = 4.153196999255511;
pub const TOL: f64 = 1e-9;

pub fn golden() -> Vec<EvalPair> {
    GOLDEN
        .iter()
        .enumerate()
        .map(|(i, (h, r))| EvalPair::new(i.to_string(), h, r))
        .collect()
}

fn words(s: &str) -> Vec<&str> {
    s.split_whitespace().collect()
}

fn grams<'a>(t: &[&'a str], n: usize) -> Vec<Vec<&'a str>> {
    (0..(t.len() + 1).saturating_sub(n)).map(|i| t[i..i + n].to_vec()).collect()
}

fn occurrences(list: &[Vec<&str>], g: &[&str]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct<'a>(list: &[Vec<&'a str>]) -> Vec<Vec<&'a str>> {
    let mut out: Vec<Vec<&str>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn oracle_bleu(n: usize) -> f64 {
    let mut prod = 1.0;
    for k in 1..=n {
        let (mut hit, mut all) = (0.0, 0.0);
        for (h, r) in GOLDEN {
            let hg = grams(&words(h), k);
            let rg = grams(&words(r), k);
            for g in distinct(&hg) {
                hit += occurrences(&hg, &g).min(occurrences(&rg, &g)) as f64;
            }
            all += hg.len() as f64;
        }
        prod *= hit / all;
    }
    let c: usize = GOLDEN.iter().map(|(h, _)| words(h).len()).sum();
    let r: usize = GOLDEN.iter().map(|(_, r)| words(r).len()).sum();
    let bp = if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    bp * prod.powf(1.0 / n as f64)
}

fn is_subsequence(sub: &[&str], of: &[&str]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == w))
}

/// Longest common subsequence by trying every subset of the hypothesis.
fn brute_lcs(h: &[&str], r: &[&str]) -> usize {
    let mut best = 0;
    for mask in 0u32..(1 << h.len()) {
        let sub: Vec<&str> = (0..h.len()).filter(|i| mask >> i & 1 == 1).map(|i| h[i]).collect();
        if sub.len() > best && is_subsequence(&sub, r) {
            best = sub.len();
        }
    }
    best
}

pub fn oracle_rouge() -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut sum = 0.0;
    for (h, r) in GOLDEN {
        let (h, r) = (words(h), words(r));
        let l = brute_lcs(&h, &r) as f64;
        if l > 0.0 {
            let p = l / h.len() as f64;
            let rec = l / r.len() as f64;
            sum += (1.0 + beta2) * p * rec / (rec + beta2 * p);
        }
    }
    sum / GOLDEN.len() as f64
}

pub fn oracle_cider() -> f64 {
    let docs = GOLDEN.len() as f64;
    let mut total = 0.0;
    for (h, r) in GOLDEN {
        let (hw, rw) = (words(h), words(r));
        let mut per_n = 0.0;
        for n in 1..=4 {
            let hg = grams(&hw, n);
            let rg = grams(&rw, n);
            let mut axis = distinct(&hg);
            for g in distinct(&rg) {
                if !axis.contains(&g) {
                    axis.push(g);
                }
            }
            let idf = |g: &[&str]| {
                let df = GOLDEN
                    .iter()
                    .filter(|(_, r)| occurrences(&grams(&words(r), n), g) > 0)
                    .count()
                    .max(1);
                docs.ln() - (df as f64).ln()
            };
            let hv: Vec<f64> = axis.iter().map(|g| occurrences(&hg, g) as f64 * idf(g)).collect();
            let rv: Vec<f64> = axis.iter().map(|g| occurrences(&rg, g) as f64 * idf(g)).collect();
            let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut dot: f64 = hv.iter().zip(&rv).map(|(a, b)| a.min(*b) * b).sum();
            if norm(&hv) > 0.0 && norm(&rv) > 0.0 {
                dot /= norm(&hv) * norm(&rv);
            }
            let delta = hw.len() as f64 - rw.len() as f64;
            per_n += dot * (-delta * delta / 72.0).exp();
        }
        total += per_n / 4.0 * 10.0;
    }
    total / docs
}

