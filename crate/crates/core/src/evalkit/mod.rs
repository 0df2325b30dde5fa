//! Retrieval, verification and generation metrics plus report emission.

mod report;
mod text;

pub use report::{
    aggregate, emit_report, report_timestamp, GenerationMetrics, MetricsReport, ReportMetadata, RetrievalMetrics,
    Summary, VerificationMetrics,
};
pub use text::{bleu, meteor, rouge, tokenize, RougeVariant};

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ranked evidence ids per claim.
pub type Rankings = BTreeMap<String, Vec<String>>;
/// Gold evidence ids per claim.
pub type GoldSets = BTreeMap<String, BTreeSet<String>>;

fn gold_of<'a>(gold: &'a GoldSets, claim: &str) -> Result<&'a BTreeSet<String>> {
    gold.get(claim)
        .filter(|g| !g.is_empty())
        .ok_or(Error::EmptyGold)
}

/// Mean over claims of average precision; gold items never retrieved
/// contribute zero.
pub fn mean_average_precision(rankings: &Rankings, gold: &GoldSets) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::EmptyGold);
    }
    let mut total = 0.0;
    for (claim, ranked) in rankings {
        let g = gold_of(gold, claim)?;
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (i, id) in ranked.iter().enumerate() {
            if g.contains(id) {
                hits += 1;
                ap += hits as f64 / (i + 1) as f64;
            }
        }
        total += ap / g.len() as f64;
    }
    Ok(total / rankings.len() as f64)
}

/// `(P@k, R@k)` averaged over claims.
pub fn precision_recall_at_k(rankings: &Rankings, gold: &GoldSets, k: usize) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if rankings.is_empty() {
        return Err(Error::EmptyGold);
    }
    let (mut p, mut r) = (0.0, 0.0);
    for (claim, ranked) in rankings {
        let g = gold_of(gold, claim)?;
        let hits = ranked.iter().take(k).filter(|id| g.contains(*id)).count() as f64;
        p += hits / k as f64;
        r += hits / g.len() as f64;
    }
    let n = rankings.len() as f64;
    Ok((p / n, r / n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub micro: f64,
    pub macro_f1: f64,
    pub per_label: BTreeMap<String, LabelScores>,
    /// `confusion[gold][pred]` in label-set order.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

pub fn f1_scores(preds: &[String], golds: &[String], label_set: &[String]) -> Result<F1Scores> {
    if preds.len() != golds.len() {
        return Err(Error::LengthMismatch(preds.len(), golds.len()));
    }
    if preds.is_empty() {
        return Err(Error::LengthMismatch(0, 0));
    }
    let pos = |l: &String| {
        label_set
            .iter()
            .position(|x| x == l)
            .ok_or_else(|| Error::UnknownLabel(l.clone()))
    };
    let n = label_set.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (p, g) in preds.iter().zip(golds) {
        confusion[pos(g)?][pos(p)?] += 1;
    }
    let mut per_label = BTreeMap::new();
    let mut macro_sum = 0.0;
    let mut tp_total = 0;
    for (i, label) in label_set.iter().enumerate() {
        let tp = confusion[i][i];
        let predicted: usize = (0..n).map(|g| confusion[g][i]).sum();
        let support: usize = confusion[i].iter().sum();
        let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
        let score = f1(precision, recall);
        macro_sum += score;
        tp_total += tp;
        per_label.insert(
            label.clone(),
            LabelScores {
                precision,
                recall,
                f1: score,
                support,
            },
        );
    }
    // Every miss is one false positive and one false negative, so micro
    // precision, recall and F1 all equal accuracy.
    let micro = ratio(tp_total, preds.len());
    Ok(F1Scores {
        micro,
        macro_f1: macro_sum / n as f64,
        per_label,
        confusion,
    })
}
