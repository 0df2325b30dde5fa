//! Every metric against its brute-force oracle on random small instances.

mod common;

use common::*;
use mever::datamodel::label_set;
use mever::evalkit::{bleu, f1_scores, mean_average_precision, meteor, precision_recall_at_k, rouge, RougeVariant};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const INSTANCES: usize = 150;
const TOL: f64 = 1e-9;

fn close(a: f64, b: f64, what: &str) {
    assert!((a - b).abs() <= TOL, "{what}: {a} vs oracle {b}");
}

#[test]
fn map_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..INSTANCES {
        let (rankings, gold) = random_retrieval_instance(&mut rng);
        close(mean_average_precision(&rankings, &gold).unwrap(), map_oracle(&rankings, &gold), "MAP");
    }
}

#[test]
fn precision_and_recall_at_k_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..INSTANCES {
        let (rankings, gold) = random_retrieval_instance(&mut rng);
        for k in [1, 3, 5, 7] {
            let (p, r) = precision_recall_at_k(&rankings, &gold, k).unwrap();
            let (po, ro) = pr_at_k_oracle(&rankings, &gold, k);
            close(p, po, &format!("P@{k}"));
            close(r, ro, &format!("R@{k}"));
        }
    }
}

#[test]
fn single_gold_map_is_mean_reciprocal_rank() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..INSTANCES {
        let (rankings, mut gold) = random_retrieval_instance(&mut rng);
        let mut rr = 0.0;
        for (claim, ranked) in &rankings {
            let pick = ranked[rng.random_range(0..ranked.len())].clone();
            rr += 1.0 / (ranked.iter().position(|x| *x == pick).unwrap() + 1) as f64;
            gold.insert(claim.clone(), [pick].into());
        }
        close(mean_average_precision(&rankings, &gold).unwrap(), rr / rankings.len() as f64, "MRR");
    }
}

#[test]
fn f1_matches_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..INSTANCES {
        let labels = label_set(rng.random_bool(0.5));
        let n = rng.random_range(1..=15);
        let mut pick = || labels[rng.random_range(0..labels.len())].clone();
        let preds: Vec<String> = (0..n).map(|_| pick()).collect();
        let golds: Vec<String> = (0..n).map(|_| pick()).collect();
        let got = f1_scores(&preds, &golds, &labels).unwrap();
        let (micro, macro_) = f1_oracle(&preds, &golds, &labels);
        close(got.micro, micro, "micro F1");
        close(got.macro_f1, macro_, "macro F1");
    }
}

#[test]
fn text_metrics_match_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..INSTANCES {
        let cand = random_sentence(&mut rng, 0, 10);
        let refr = random_sentence(&mut rng, 1, 10);
        let ctx = format!("{cand:?} vs {refr:?}");
        close(rouge(&cand, &refr, RougeVariant::One).unwrap(), rouge_n_oracle(&cand, &refr, 1), &format!("ROUGE-1 {ctx}"));
        close(rouge(&cand, &refr, RougeVariant::Two).unwrap(), rouge_n_oracle(&cand, &refr, 2), &format!("ROUGE-2 {ctx}"));
        close(rouge(&cand, &refr, RougeVariant::L).unwrap(), rouge_l_oracle(&cand, &refr), &format!("ROUGE-L {ctx}"));
        close(bleu(&cand, &refr, 2).unwrap(), bleu_oracle(&cand, &refr, 2), &format!("BLEU-2 {ctx}"));
        close(bleu(&cand, &refr, 4).unwrap(), bleu_oracle(&cand, &refr, 4), &format!("BLEU-4 {ctx}"));
        close(meteor(&cand, &refr).unwrap(), meteor_oracle(&cand, &refr), &format!("METEOR {ctx}"));
    }
}

#[test]
fn empty_candidate_scores_zero() {
    for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
        assert_eq!(rouge("", "the bar", v).unwrap(), 0.0);
    }
    assert_eq!(bleu("", "the bar", 4).unwrap(), 0.0);
    assert_eq!(meteor("", "the bar").unwrap(), 0.0);
}
