//! Brute-force metric oracles, finite differences and small fixtures shared
//! by the integration and acceptance suites.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use candle_core::{Tensor, Var};
use mever::datamodel::{generate_synthetic, Dataset, SynthConfig};
use mever::nn::{ParamStore, DEVICE};
use mever::tokenizer::Vocabulary;
use mever::trainer::TrainConfig;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

// ---------- fixtures ----------

/// d=8, L=2 toy configuration.
pub fn toy_config() -> TrainConfig {
    TrainConfig {
        layers: 2,
        hidden: 8,
        heads: 2,
        max_text_len: 16,
        patch_size: 4,
        max_positions: 24,
        batch_size: 4,
        max_epochs: 2,
        joint_max_epochs: 2,
        max_explanation_len: 10,
        ..TrainConfig::default()
    }
}

pub fn toy_data(seed: u64) -> Dataset {
    generate_synthetic(&SynthConfig {
        seed,
        n_claims: 8,
        n_evidence: 4,
        n_images: 4,
        image_size: 8,
        ..SynthConfig::default()
    })
    .unwrap()
}

/// Exactly `size` entries: corpus words first, then filler.
pub fn vocab_of_size(d: &Dataset, size: usize) -> Vocabulary {
    let base = mever::trainer::build_vocabulary(d, size);
    let mut words: Vec<String> = (Vocabulary::first_word_id() as usize..base.len())
        .map(|i| base.token(i as u32).to_string())
        .collect();
    let mut i = 0;
    while words.len() + (Vocabulary::first_word_id() as usize) < size {
        words.push(format!("filler{i}"));
        i += 1;
    }
    let v = Vocabulary::from_tokens(words);
    assert_eq!(v.len(), size);
    v
}

// ---------- finite differences ----------

fn set_coord(var: &Var, idx: usize, value: f64) {
    let mut data = var.flatten_all().unwrap().to_vec1::<f64>().unwrap();
    data[idx] = value;
    var.set(&Tensor::from_vec(data, var.dims(), &DEVICE).unwrap())
        .unwrap();
}

/// Largest relative error between backprop and a five-point central
/// difference over up to `per_param` random coordinates of every parameter.
/// Gradients smaller than 1e-7 on both sides are compared absolutely.
pub fn gradient_check(
    store: &ParamStore,
    loss: impl Fn() -> Tensor,
    per_param: usize,
    rng: &mut ChaCha8Rng,
) -> (f64, usize) {
    const H: f64 = 1e-3;
    let grads = loss().backward().unwrap();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for p in store.iter() {
        let n = p.var.elem_count();
        let analytic = grads
            .get(p.var.as_tensor())
            .map(|g| g.flatten_all().unwrap().to_vec1::<f64>().unwrap())
            .unwrap_or_else(|| vec![0.0; n]);
        let coords: BTreeSet<usize> = (0..per_param.min(n)).map(|_| rng.random_range(0..n)).collect();
        for idx in coords {
            let orig = p.var.flatten_all().unwrap().to_vec1::<f64>().unwrap()[idx];
            let at = |offset: f64| {
                set_coord(&p.var, idx, orig + offset);
                loss().to_scalar::<f64>().unwrap()
            };
            let numeric = (at(-2.0 * H) - 8.0 * at(-H) + 8.0 * at(H) - at(2.0 * H)) / (12.0 * H);
            set_coord(&p.var, idx, orig);
            let a = analytic[idx];
            let scale = a.abs().max(numeric.abs());
            let err = if scale < 1e-7 { (a - numeric).abs() } else { (a - numeric).abs() / scale };
            worst = worst.max(err);
            checked += 1;
        }
    }
    (worst, checked)
}

// ---------- retrieval oracles ----------

/// AP by scanning gold items: precision at the rank of each gold hit.
pub fn map_oracle(rankings: &BTreeMap<String, Vec<String>>, gold: &BTreeMap<String, BTreeSet<String>>) -> f64 {
    let mut total = 0.0;
    for (claim, ranked) in rankings {
        let g = &gold[claim];
        let mut ap = 0.0;
        for item in g {
            if let Some(pos) = ranked.iter().position(|x| x == item) {
                let rank = pos + 1;
                let hits_in_prefix = ranked[..rank].iter().filter(|x| g.contains(*x)).count();
                ap += hits_in_prefix as f64 / rank as f64;
            }
        }
        total += ap / g.len() as f64;
    }
    total / rankings.len() as f64
}

pub fn pr_at_k_oracle(
    rankings: &BTreeMap<String, Vec<String>>,
    gold: &BTreeMap<String, BTreeSet<String>>,
    k: usize,
) -> (f64, f64) {
    let (mut p, mut r) = (0.0, 0.0);
    for (claim, ranked) in rankings {
        let top: BTreeSet<&String> = ranked.iter().take(k).collect();
        let g: BTreeSet<&String> = gold[claim].iter().collect();
        let inter = top.intersection(&g).count() as f64;
        p += inter / k as f64;
        r += inter / g.len() as f64;
    }
    let n = rankings.len() as f64;
    (p / n, r / n)
}

// ---------- verification oracle ----------

/// `(micro, macro)` from explicit TP/FP/FN counts.
pub fn f1_oracle(preds: &[String], golds: &[String], labels: &[String]) -> (f64, f64) {
    let f = |tp: f64, fp: f64, fn_: f64| {
        let p = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let r = if tp + fn_ == 0.0 { 0.0 } else { tp / (tp + fn_) };
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    };
    let (mut tp_all, mut fp_all, mut fn_all) = (0.0, 0.0, 0.0);
    let mut macro_sum = 0.0;
    for l in labels {
        let mut tp = 0.0;
        let mut fp = 0.0;
        let mut fn_ = 0.0;
        for (p, g) in preds.iter().zip(golds) {
            match (p == l, g == l) {
                (true, true) => tp += 1.0,
                (true, false) => fp += 1.0,
                (false, true) => fn_ += 1.0,
                _ => {}
            }
        }
        macro_sum += f(tp, fp, fn_);
        tp_all += tp;
        fp_all += fp;
        fn_all += fn_;
    }
    (f(tp_all, fp_all, fn_all), macro_sum / labels.len() as f64)
}

// ---------- generation oracles ----------

pub fn words(s: &str) -> Vec<String> {
    s.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return Vec::new();
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

/// Clipped matches by removing each matched reference gram once.
fn clipped(c: &[Vec<String>], r: &[Vec<String>]) -> usize {
    let mut pool = r.to_vec();
    let mut m = 0;
    for g in c {
        if let Some(i) = pool.iter().position(|x| x == g) {
            pool.swap_remove(i);
            m += 1;
        }
    }
    m
}

fn harmonic(m: usize, c: usize, r: usize) -> f64 {
    if m == 0 {
        return 0.0;
    }
    let p = m as f64 / c as f64;
    let rec = m as f64 / r as f64;
    2.0 * p * rec / (p + rec)
}

pub fn rouge_n_oracle(cand: &str, refr: &str, n: usize) -> f64 {
    let (c, r) = (words(cand), words(refr));
    if c.is_empty() {
        return 0.0;
    }
    let (cg, rg) = (grams(&c, n), grams(&r, n));
    if cg.is_empty() && rg.is_empty() {
        return if c == r { 1.0 } else { 0.0 };
    }
    harmonic(clipped(&cg, &rg), cg.len(), rg.len())
}

/// LCS by memoized recursion.
fn lcs(a: &[String], b: &[String], memo: &mut BTreeMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let key = (a.len(), b.len());
    if let Some(v) = memo.get(&key) {
        return *v;
    }
    let v = if a[0] == b[0] {
        1 + lcs(&a[1..], &b[1..], memo)
    } else {
        lcs(&a[1..], b, memo).max(lcs(a, &b[1..], memo))
    };
    memo.insert(key, v);
    v
}

pub fn rouge_l_oracle(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    if c.is_empty() {
        return 0.0;
    }
    harmonic(lcs(&c, &r, &mut BTreeMap::new()), c.len(), r.len())
}

pub fn bleu_oracle(cand: &str, refr: &str, max_n: usize) -> f64 {
    let (c, r) = (words(cand), words(refr));
    if c.is_empty() {
        return 0.0;
    }
    let mut logs = Vec::new();
    for n in 1..=max_n {
        let (cg, rg) = (grams(&c, n), grams(&r, n));
        if cg.is_empty() && rg.is_empty() {
            continue;
        }
        let p = if cg.is_empty() {
            1e-9
        } else {
            (clipped(&cg, &rg) as f64).max(1e-9) / cg.len() as f64
        };
        logs.push(p.ln());
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    bp * (logs.iter().sum::<f64>() / logs.len() as f64).exp()
}

/// Alignment: each candidate word takes the leftmost unused reference
/// position holding the same word.
pub fn meteor_oracle(cand: &str, refr: &str) -> f64 {
    let (c, r) = (words(cand), words(refr));
    let mut used = vec![false; r.len()];
    let mut pairs = Vec::new();
    for (i, w) in c.iter().enumerate() {
        if let Some(j) = (0..r.len()).find(|&j| !used[j] && r[j] == *w) {
            used[j] = true;
            pairs.push((i, j));
        }
    }
    let m = pairs.len();
    if m == 0 {
        return 0.0;
    }
    let mut chunks = 1;
    for w in pairs.windows(2) {
        if !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1) {
            chunks += 1;
        }
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let fmean = 10.0 * p * rec / (rec + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks as f64 / m as f64).powi(3))
}

/// Random sentence over a six-word alphabet with occasional punctuation.
pub fn random_sentence(rng: &mut ChaCha8Rng, min: usize, max: usize) -> String {
    const ALPHABET: [&str; 6] = ["red", "chart", "Rises", "falls", "the", "bar"];
    let n = rng.random_range(min..=max);
    let mut s = String::new();
    for i in 0..n {
        if i > 0 {
            s.push(if rng.random_bool(0.15) { ',' } else { ' ' });
            s.push(' ');
        }
        s.push_str(ALPHABET[rng.random_range(0..ALPHABET.len())]);
    }
    s
}

/// Random rankings over `n_items` with 1..=3 gold items per claim.
pub fn random_retrieval_instance(
    rng: &mut ChaCha8Rng,
) -> (BTreeMap<String, Vec<String>>, BTreeMap<String, BTreeSet<String>>) {
    let n_claims = rng.random_range(1..=5);
    let n_items = rng.random_range(3..=9);
    let mut rankings = BTreeMap::new();
    let mut gold = BTreeMap::new();
    for c in 0..n_claims {
        let mut items: Vec<String> = (0..n_items).map(|i| format!("e{i}")).collect();
        for i in (1..items.len()).rev() {
            items.swap(i, rng.random_range(0..=i));
        }
        let depth = rng.random_range(1..=n_items);
        let g: BTreeSet<String> = (0..rng.random_range(1..=3))
            .map(|_| format!("e{}", rng.random_range(0..n_items + 2)))
            .collect();
        rankings.insert(format!("c{c}"), items[..depth].to_vec());
        gold.insert(format!("c{c}"), g);
    }
    (rankings, gold)
}
