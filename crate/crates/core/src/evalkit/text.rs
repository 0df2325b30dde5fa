//! Generation metrics over lowercased alphanumeric tokens.

use std::collections::HashMap;

use crate::error::{Error, Result};

const BLEU_EPSILON: f64 = 1e-9;

/// Lowercases and splits on whitespace and punctuation.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_default() += 1;
        }
    }
    counts
}

/// Clipped overlap and the two n-gram totals.
fn overlap(cand: &[String], refr: &[String], n: usize) -> (usize, usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(refr, n);
    let matched = c
        .iter()
        .map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0)))
        .sum();
    (matched, cand.len().saturating_sub(n - 1), refr.len().saturating_sub(n - 1))
}

fn f_score(matched: usize, cand_total: usize, ref_total: usize) -> f64 {
    if matched == 0 {
        return 0.0;
    }
    let p = matched as f64 / cand_total as f64;
    let r = matched as f64 / ref_total as f64;
    2.0 * p * r / (p + r)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RougeVariant {
    One,
    Two,
    L,
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    for x in a {
        let mut cur = vec![0usize; b.len() + 1];
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        prev = cur;
    }
    prev[b.len()]
}

fn reference_tokens(reference: &str) -> Result<Vec<String>> {
    let r = tokenize(reference);
    if r.is_empty() {
        return Err(Error::EmptyReference);
    }
    Ok(r)
}

/// ROUGE-1/2 as n-gram F1, ROUGE-L as LCS F1. When neither side has an
/// n-gram of the requested order the score is 1 for identical token
/// sequences and 0 otherwise.
pub fn rouge(candidate: &str, reference: &str, variant: RougeVariant) -> Result<f64> {
    let r = reference_tokens(reference)?;
    let c = tokenize(candidate);
    if c.is_empty() {
        return Ok(0.0);
    }
    Ok(match variant {
        RougeVariant::L => f_score(lcs(&c, &r), c.len(), r.len()),
        RougeVariant::One | RougeVariant::Two => {
            let n = if variant == RougeVariant::One { 1 } else { 2 };
            let (m, ct, rt) = overlap(&c, &r, n);
            if ct == 0 && rt == 0 {
                f64::from(c == r)
            } else {
                f_score(m, ct, rt)
            }
        }
    })
}

/// Geometric mean of clipped n-gram precisions (orders `1..=max_n`) times
/// the brevity penalty `exp(1 - r/c)` when the candidate is shorter.
/// A zero match count becomes `1e-9`; orders absent from both sides are
/// left out of the mean.
pub fn bleu(candidate: &str, reference: &str, max_n: usize) -> Result<f64> {
    if max_n == 0 {
        return Err(Error::InvalidConfig("BLEU order must be at least 1".into()));
    }
    let r = reference_tokens(reference)?;
    let c = tokenize(candidate);
    if c.is_empty() {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    let mut orders = 0;
    for n in 1..=max_n {
        let (m, ct, rt) = overlap(&c, &r, n);
        if ct == 0 && rt == 0 {
            continue;
        }
        let p = if ct == 0 {
            BLEU_EPSILON
        } else {
            (m as f64).max(BLEU_EPSILON) / ct as f64
        };
        log_sum += p.ln();
        orders += 1;
    }
    let bp = if c.len() >= r.len() {
        1.0
    } else {
        (1.0 - r.len() as f64 / c.len() as f64).exp()
    };
    Ok(bp * (log_sum / orders as f64).exp())
}

/// Exact-match METEOR: the k-th occurrence of a word in the candidate is
/// aligned to its k-th occurrence in the reference.
pub fn meteor(candidate: &str, reference: &str) -> Result<f64> {
    let r = reference_tokens(reference)?;
    let c = tokenize(candidate);
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut alignment = Vec::new();
    for (i, w) in c.iter().enumerate() {
        let k = seen.entry(w.as_str()).or_default();
        if let Some(j) = r.iter().enumerate().filter(|(_, x)| *x == w).map(|(j, _)| j).nth(*k) {
            alignment.push((i, j));
        }
        *k += 1;
    }
    let m = alignment.len();
    if m == 0 {
        return Ok(0.0);
    }
    let p = m as f64 / c.len() as f64;
    let rec = m as f64 / r.len() as f64;
    let f_mean = 10.0 * p * rec / (rec + 9.0 * p);
    let chunks = 1 + alignment
        .windows(2)
        .filter(|w| w[1].0 != w[0].0 + 1 || w[1].1 != w[0].1 + 1)
        .count();
    let penalty = 0.5 * (chunks as f64 / m as f64).powi(3);
    Ok(f_mean * (1.0 - penalty))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tokenizer_splits_punctuation() {
        assert_eq!(tokenize("The chart, clearly RISES!"), vec!["the", "chart", "clearly", "rises"]);
    }

    #[test]
    fn identical_and_disjoint() {
        let s = "the red chart rises";
        for v in [RougeVariant::One, RougeVariant::Two, RougeVariant::L] {
            assert_eq!(rouge(s, s, v).unwrap(), 1.0);
            assert_eq!(rouge("blue bars fall", s, v).unwrap(), 0.0);
        }
        assert!((bleu(s, s, 4).unwrap() - 1.0).abs() < 1e-12);
        assert!((bleu(s, s, 2).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(meteor("blue bars fall", s).unwrap(), 0.0);
        assert!(matches!(rouge(s, " ,", RougeVariant::L), Err(Error::EmptyReference)));
    }

    #[test]
    fn short_identical_candidate_scores_one() {
        assert_eq!(bleu("yes", "yes", 4).unwrap(), 1.0);
        assert_eq!(rouge("yes", "yes", RougeVariant::Two).unwrap(), 1.0);
    }

    #[test]
    fn brevity_penalty_applies() {
        let b = bleu("the red chart", "the red chart rises", 1).unwrap();
        assert!((b - (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn meteor_single_chunk_penalty() {
        let s = "a b c d";
        let want = 1.0 - 0.5 * (1.0f64 / 4.0).powi(3);
        assert!((meteor(s, s).unwrap() - want).abs() < 1e-12);
    }
}
