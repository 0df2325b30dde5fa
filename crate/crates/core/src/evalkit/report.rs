use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::LabelScores;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMetadata {
    pub dataset: String,
    pub split: String,
    pub evidence_setting: String,
    pub seed: u64,
    pub timestamp: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalMetrics {
    pub map: f64,
    /// Keyed by κ.
    pub p_at: BTreeMap<usize, f64>,
    pub r_at: BTreeMap<usize, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationMetrics {
    pub micro_f1: f64,
    pub macro_f1: f64,
    pub per_label: BTreeMap<String, LabelScores>,
    pub labels: Vec<String>,
    /// `confusion[gold][pred]` in `labels` order.
    pub confusion: Vec<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[allow(non_snake_case)]
pub struct GenerationMetrics {
    pub rouge1: f64,
    pub rouge2: f64,
    pub rougeL: f64,
    pub meteor: f64,
    pub bleu2: f64,
    pub bleu4: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: ReportMetadata,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub retrieval: Option<RetrievalMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub verification: Option<VerificationMetrics>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub generation: Option<GenerationMetrics>,
}

impl MetricsReport {
    /// Every headline number as `(name, value)` in a fixed order.
    pub fn scalars(&self) -> Vec<(String, f64)> {
        let mut out = Vec::new();
        if let Some(r) = &self.retrieval {
            out.push(("retrieval.map".to_string(), r.map));
            for (k, v) in &r.p_at {
                out.push((format!("retrieval.p@{k}"), *v));
            }
            for (k, v) in &r.r_at {
                out.push((format!("retrieval.r@{k}"), *v));
            }
        }
        if let Some(v) = &self.verification {
            out.push(("verification.micro_f1".to_string(), v.micro_f1));
            out.push(("verification.macro_f1".to_string(), v.macro_f1));
        }
        if let Some(g) = &self.generation {
            for (name, value) in [
                ("rouge1", g.rouge1),
                ("rouge2", g.rouge2),
                ("rougeL", g.rougeL),
                ("meteor", g.meteor),
                ("bleu2", g.bleu2),
                ("bleu4", g.bleu4),
            ] {
                out.push((format!("generation.{name}"), value));
            }
        }
        out
    }
}

/// Mean and population standard deviation over runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

pub fn aggregate(runs: &[MetricsReport]) -> BTreeMap<String, Summary> {
    let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for run in runs {
        for (name, v) in run.scalars() {
            values.entry(name).or_default().push(v);
        }
    }
    values
        .into_iter()
        .map(|(name, vs)| {
            let n = vs.len() as f64;
            let mean = if vs.iter().all(|v| *v == vs[0]) {
                vs[0]
            } else {
                vs.iter().sum::<f64>() / n
            };
            let var = vs.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            (name, Summary { mean, std: var.sqrt() })
        })
        .collect()
}

#[derive(Serialize)]
struct MultiRun<'a> {
    runs: &'a [MetricsReport],
    summary: BTreeMap<String, Summary>,
}

/// RFC 3339 time from `SOURCE_DATE_EPOCH` when set, otherwise now.
pub fn report_timestamp() -> String {
    let epoch = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.trim().parse::<i64>().ok());
    let time = match epoch.and_then(|s| chrono::DateTime::from_timestamp(s, 0)) {
        Some(t) => t,
        None => chrono::Utc::now(),
    };
    time.to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

fn text_table(runs: &[MetricsReport]) -> String {
    let mut s = String::new();
    let meta = &runs[0].metadata;
    let _ = writeln!(
        s,
        "dataset={} split={} setting={} runs={}",
        meta.dataset,
        meta.split,
        meta.evidence_setting,
        runs.len()
    );
    if runs.len() == 1 {
        let _ = writeln!(s, "{:<26}{:>10}", "metric", "value");
        for (name, v) in runs[0].scalars() {
            let _ = writeln!(s, "{name:<26}{v:>10.4}");
        }
    } else {
        let _ = writeln!(s, "{:<26}{:>10}{:>10}", "metric", "mean", "std");
        for (name, sm) in aggregate(runs) {
            let _ = writeln!(s, "{name:<26}{:>10.4}{:>10.4}", sm.mean, sm.std);
        }
    }
    s
}

/// Writes `report.json` and `report.txt` into `dir`. Several runs are
/// summarized with mean and standard deviation.
pub fn emit_report(runs: &[MetricsReport], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if runs.is_empty() {
        return Err(Error::InvalidConfig("no runs to report".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut json = if runs.len() == 1 {
        serde_json::to_string_pretty(&runs[0])?
    } else {
        serde_json::to_string_pretty(&MultiRun {
            runs,
            summary: aggregate(runs),
        })?
    };
    json.push('\n');
    let path = dir.join("report.json");
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    let path = dir.join("report.txt");
    fs::write(&path, text_table(runs)).map_err(|e| Error::io(&path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(map: f64) -> MetricsReport {
        MetricsReport {
            metadata: ReportMetadata {
                dataset: "synth".into(),
                split: "test".into(),
                evidence_setting: "gold".into(),
                seed: 7,
                timestamp: "1970-01-01T00:00:00Z".into(),
            },
            retrieval: Some(RetrievalMetrics {
                map,
                p_at: BTreeMap::from([(1, 0.1 + map / 3.0), (3, 1.0 / 3.0)]),
                r_at: BTreeMap::from([(1, 0.7), (3, 1.0)]),
            }),
            verification: None,
            generation: Some(GenerationMetrics {
                rouge1: 0.123456789012345,
                rouge2: 0.2,
                rougeL: 0.3,
                meteor: 0.4,
                bleu2: 0.5,
                bleu4: 1e-9,
            }),
        }
    }

    #[test]
    fn single_run_round_trips_and_omits_std() {
        let dir = tempfile::tempdir().unwrap();
        let r = report(0.734);
        emit_report(std::slice::from_ref(&r), dir.path()).unwrap();
        let back: MetricsReport =
            serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(back, r);
        let txt = fs::read_to_string(dir.path().join("report.txt")).unwrap();
        assert!(!txt.contains("std"));
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let s = aggregate(&[report(0.1), report(0.1), report(0.1)]);
        assert!(s.values().all(|x| x.std == 0.0));
        assert_eq!(s["retrieval.map"].mean, 0.1);
    }
}
