use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{bail, Context};

use crate::datamodel::Dataset;
use crate::evalkit::{
    bleu, mean_average_precision, meteor, precision_recall_at_k, report_timestamp, rouge, GenerationMetrics,
    MetricsReport, ReportMetadata, RetrievalMetrics, RougeVariant, VerificationMetrics,
};
use crate::trainer::{
    effective_dataset, evidence_for, freeze_and_retrieve, load_checkpoint, load_joint, load_retriever, rank_split,
    train_joint, train_retriever, verification_scores, Ablation, JointModel, RetrieverModel, TrainConfig,
};

use super::{JOINT_CKPT, RETRIEVER_CKPT};

/// Cut-offs reported for retrieval.
pub const KAPPAS: [usize; 4] = [1, 3, 5, 7];

/// Row names of the ablation table, baseline first.
pub const ABLATION_VARIANTS: [&str; 9] = [
    "full",
    "no_images",
    "no_i2t",
    "no_t2i",
    "no_token_fusion",
    "no_evidence_fusion",
    "no_fid",
    "no_regularizer",
    "lambda_0",
];

fn retrieval_metrics(d: &Dataset, r: &RetrieverModel, split: &str) -> crate::Result<Option<RetrievalMetrics>> {
    let (rankings, gold) = rank_split(d, r, split, d.evidence.len())?;
    if rankings.is_empty() {
        return Ok(None);
    }
    let mut p_at = BTreeMap::new();
    let mut r_at = BTreeMap::new();
    for k in KAPPAS {
        let (p, rec) = precision_recall_at_k(&rankings, &gold, k)?;
        p_at.insert(k, p);
        r_at.insert(k, rec);
    }
    Ok(Some(RetrievalMetrics {
        map: mean_average_precision(&rankings, &gold)?,
        p_at,
        r_at,
    }))
}

fn generation_metrics(
    d: &Dataset,
    model: &JointModel,
    retrieved: &BTreeMap<String, crate::retriever::RankedList>,
    split: &str,
) -> crate::Result<Option<GenerationMetrics>> {
    let lookup = d.index();
    let mut sums = [0.0; 6];
    let mut n = 0usize;
    for id in d.split_ids(split) {
        let claim = lookup
            .claim(&id)
            .ok_or_else(|| crate::Error::DanglingReference(id.clone()))?;
        let Some(reference) = claim.explanation.as_deref() else {
            continue;
        };
        if crate::evalkit::tokenize(reference).is_empty() {
            continue;
        }
        let ev = evidence_for(&model.config, claim, retrieved)?;
        let cand = model
            .predict(&lookup, claim, &ev, true)?
            .explanation
            .map(|e| e.text)
            .unwrap_or_default();
        let scores = [
            rouge(&cand, reference, RougeVariant::One)?,
            rouge(&cand, reference, RougeVariant::Two)?,
            rouge(&cand, reference, RougeVariant::L)?,
            meteor(&cand, reference)?,
            bleu(&cand, reference, 2)?,
            bleu(&cand, reference, 4)?,
        ];
        for (s, v) in sums.iter_mut().zip(scores) {
            *s += v;
        }
        n += 1;
    }
    if n == 0 {
        return Ok(None);
    }
    let m = sums.map(|s| s / n as f64);
    Ok(Some(GenerationMetrics {
        rouge1: m[0],
        rouge2: m[1],
        rougeL: m[2],
        meteor: m[3],
        bleu2: m[4],
        bleu4: m[5],
    }))
}

/// Metrics of trained models on one split of `d` (ablations are applied to
/// the dataset here).
pub fn evaluate_models(
    d: &Dataset,
    retriever: &RetrieverModel,
    joint: Option<&JointModel>,
    config: &TrainConfig,
    split: &str,
    dataset_name: &str,
) -> crate::Result<MetricsReport> {
    let d = effective_dataset(d, config);
    let retrieval = retrieval_metrics(&d, retriever, split)?;
    let (mut verification, mut generation) = (None, None);
    if let Some(model) = joint {
        if !d.split_ids(split).is_empty() {
            let retrieved = freeze_and_retrieve(&d, retriever, model.config.k_retrieved)?;
            let f1 = verification_scores(&d, model, &retrieved, split)?;
            verification = Some(VerificationMetrics {
                micro_f1: f1.micro,
                macro_f1: f1.macro_f1,
                per_label: f1.per_label,
                labels: d.label_set.clone(),
                confusion: f1.confusion,
            });
            if model.explain {
                generation = generation_metrics(&d, model, &retrieved, split)?;
            }
        }
    }
    Ok(MetricsReport {
        metadata: ReportMetadata {
            dataset: dataset_name.to_string(),
            split: split.to_string(),
            evidence_setting: config.evidence_setting.as_str().to_string(),
            seed: config.seed,
            timestamp: report_timestamp(),
        },
        retrieval,
        verification,
        generation,
    })
}

/// Evaluates whatever checkpoints exist in `run_dir`.
pub fn evaluate_run(
    d: &Dataset,
    run_dir: &Path,
    split: &str,
    dataset_name: &str,
    setting: Option<&str>,
) -> anyhow::Result<MetricsReport> {
    let joint_path = run_dir.join(JOINT_CKPT);
    let retriever_path = run_dir.join(RETRIEVER_CKPT);
    let (retriever, mut joint, mut config) = if joint_path.exists() {
        let ckpt = load_checkpoint(&joint_path).context("loading joint checkpoint")?;
        let (r, j) = load_joint(&ckpt)?;
        (r, Some(j), ckpt.meta.config)
    } else if retriever_path.exists() {
        let ckpt = load_checkpoint(&retriever_path).context("loading retriever checkpoint")?;
        (load_retriever(&ckpt)?, None, ckpt.meta.config)
    } else {
        bail!("no checkpoint in {}: run train-retriever first", run_dir.display());
    };
    if let Some(s) = setting {
        config.evidence_setting = s.parse()?;
        if let Some(j) = joint.as_mut() {
            j.config.evidence_setting = config.evidence_setting;
        }
    }
    Ok(evaluate_models(d, &retriever, joint.as_ref(), &config, split, dataset_name)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub report: MetricsReport,
}

fn variant_config(base: &TrainConfig, variant: &str) -> crate::Result<TrainConfig> {
    let mut cfg = base.clone();
    cfg.ablations.clear();
    match variant {
        "full" => {}
        "lambda_0" => cfg.lambda_reg = 0.0,
        flag => {
            cfg.ablations.insert(flag.parse()?);
        }
    }
    Ok(cfg)
}

fn touches_retriever(cfg: &TrainConfig) -> bool {
    [Ablation::NoImages, Ablation::NoI2t, Ablation::NoT2i]
        .iter()
        .any(|a| cfg.has(*a))
}

/// Trains and evaluates the baseline and every variant. Variants that do
/// not alter retrieval reuse the baseline retriever.
pub fn ablation_rows(
    d: &Dataset,
    base: &TrainConfig,
    split: &str,
    dataset_name: &str,
    mut on_variant: impl FnMut(&str),
) -> crate::Result<Vec<AblationRow>> {
    let full_cfg = variant_config(base, "full")?;
    let (full_retriever, _) = train_retriever(d, &full_cfg)?;
    ABLATION_VARIANTS
        .iter()
        .map(|variant| {
            on_variant(variant);
            let cfg = variant_config(base, variant)?;
            let retriever = if touches_retriever(&cfg) {
                train_retriever(d, &cfg)?.0
            } else {
                full_retriever.clone()
            };
            let (joint, _) = train_joint(d, retriever.clone(), &cfg)?;
            let report = evaluate_models(d, &retriever, Some(&joint), &cfg, split, dataset_name)?;
            Ok(AblationRow {
                variant: variant.to_string(),
                report,
            })
        })
        .collect()
}

const ABLATION_COLUMNS: [&str; 7] = ["map", "micro_f1", "macro_f1", "rougeL", "meteor", "bleu2", "bleu4"];

fn row_values(r: &MetricsReport) -> [Option<f64>; 7] {
    let v = r.verification.as_ref();
    let g = r.generation.as_ref();
    [
        r.retrieval.as_ref().map(|x| x.map),
        v.map(|x| x.micro_f1),
        v.map(|x| x.macro_f1),
        g.map(|x| x.rougeL),
        g.map(|x| x.meteor),
        g.map(|x| x.bleu2),
        g.map(|x| x.bleu4),
    ]
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Metric columns plus deltas against the `full` row.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    let mut header = vec!["variant".to_string()];
    header.extend(ABLATION_COLUMNS.iter().map(|c| c.to_string()));
    header.extend(ABLATION_COLUMNS.iter().map(|c| format!("delta_{c}")));
    w.write_record(&header)?;
    let base = rows.first().map(|r| row_values(&r.report)).unwrap_or([None; 7]);
    for row in rows {
        let vals = row_values(&row.report);
        let mut rec = vec![row.variant.clone()];
        rec.extend(vals.iter().map(|v| cell(*v)));
        rec.extend(vals.iter().zip(base).map(|(v, b)| cell(v.zip(b).map(|(v, b)| v - b))));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Fixed-width text version of the ablation table.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<20}", "variant");
    for c in ABLATION_COLUMNS {
        let _ = write!(s, "{c:>10}");
    }
    let _ = writeln!(s, "{:>12}", "d_macro_f1");
    let base = rows.first().map(|r| row_values(&r.report)[2]).unwrap_or(None);
    for row in rows {
        let vals = row_values(&row.report);
        let _ = write!(s, "{:<20}", row.variant);
        for v in vals {
            match v {
                Some(x) => {
                    let _ = write!(s, "{x:>10.4}");
                }
                None => {
                    let _ = write!(s, "{:>10}", "-");
                }
            }
        }
        match vals[2].zip(base) {
            Some((v, b)) => {
                let _ = writeln!(s, "{:>+12.4}", v - b);
            }
            None => {
                let _ = writeln!(s, "{:>12}", "-");
            }
        }
    }
    s
}

/// `k,precision,recall` for κ = 1..=7.
pub fn write_metric_vs_k(d: &Dataset, ckpt_path: &Path, split: &str, path: &Path) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(ckpt_path).context("loading retriever checkpoint")?;
    let r = load_retriever(&ckpt)?;
    let d = effective_dataset(d, &ckpt.meta.config);
    let (rankings, gold) = rank_split(&d, &r, split, d.evidence.len())?;
    if rankings.is_empty() {
        bail!("split {split:?} has no claims with gold evidence");
    }
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["k", "precision", "recall"])?;
    for k in 1..=7 {
        let (p, rec) = precision_recall_at_k(&rankings, &gold, k)?;
        w.write_record([k.to_string(), p.to_string(), rec.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Long-format `variant,metric,value` from an ablation table.
pub fn write_ablation_bars(ablation_csv: &Path, path: &Path) -> anyhow::Result<()> {
    let mut r = csv::Reader::from_path(ablation_csv).with_context(|| format!("reading {}", ablation_csv.display()))?;
    let header = r.headers()?.clone();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    w.write_record(["variant", "metric", "value"])?;
    for rec in r.records() {
        let rec = rec?;
        let variant = rec.get(0).unwrap_or_default();
        for (name, value) in header.iter().zip(rec.iter()).skip(1) {
            if name.starts_with("delta_") || value.is_empty() {
                continue;
            }
            w.write_record([variant, name, value])?;
        }
    }
    w.flush()?;
    Ok(())
}
