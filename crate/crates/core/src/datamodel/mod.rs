//! Corpus schema: claims, evidence texts and images, plus loading, validation,
//! text-image alignment, splitting and synthetic corpus generation.

mod align;
mod io;
mod split;
mod synth;

pub use align::align_images;
pub use io::{load_corpus, save_corpus};
pub use split::split_dataset;
pub use synth::{generate_synthetic, SynthConfig};

use std::collections::{BTreeMap, BTreeSet, HashMap};

use image::RgbImage;
use serde::{Deserialize, Serialize};

pub const SUPPORT: &str = "SUPPORT";
pub const REFUTE: &str = "REFUTE";
pub const NEI: &str = "NEI";

/// `[SUPPORT, REFUTE]` or `[SUPPORT, REFUTE, NEI]`.
pub fn label_set(with_nei: bool) -> Vec<String> {
    let mut labels = vec![SUPPORT.to_string(), REFUTE.to_string()];
    if with_nei {
        labels.push(NEI.to_string());
    }
    labels
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub image_ids: Vec<String>,
    #[serde(default)]
    pub gold_evidence_ids: Vec<String>,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub explanation: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvidenceRecord {
    pub id: String,
    pub text: String,
    #[serde(default)]
    pub image_ids: Vec<String>,
}

/// An 8-bit RGB raster with its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    /// Path relative to the corpus root.
    pub uri: String,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
    pub pixels: RgbImage,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: RgbImage) -> Self {
        let id = id.into();
        Self {
            uri: format!("images/{id}.png"),
            id,
            height: pixels.height(),
            width: pixels.width(),
            channels: 3,
            pixels,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub claims: Vec<ClaimRecord>,
    pub evidence: Vec<EvidenceRecord>,
    pub images: Vec<ImageRecord>,
    /// Split name to claim ids (`train`, `val`, `test`).
    pub splits: BTreeMap<String, Vec<String>>,
    pub label_set: Vec<String>,
}

/// Hash lookups over a dataset's records.
pub struct DatasetIndex<'a> {
    pub claims: HashMap<&'a str, &'a ClaimRecord>,
    pub evidence: HashMap<&'a str, &'a EvidenceRecord>,
    pub images: HashMap<&'a str, &'a ImageRecord>,
}

impl<'a> DatasetIndex<'a> {
    pub fn claim(&self, id: &str) -> Option<&'a ClaimRecord> {
        self.claims.get(id).copied()
    }

    pub fn evidence(&self, id: &str) -> Option<&'a EvidenceRecord> {
        self.evidence.get(id).copied()
    }

    pub fn image(&self, id: &str) -> Option<&'a ImageRecord> {
        self.images.get(id).copied()
    }

    /// Resolves image ids, skipping unknown ones.
    pub fn images_of(&self, ids: &[String]) -> Vec<&'a ImageRecord> {
        ids.iter().filter_map(|id| self.image(id)).collect()
    }
}

impl Dataset {
    pub fn index(&self) -> DatasetIndex<'_> {
        DatasetIndex {
            claims: self.claims.iter().map(|c| (c.id.as_str(), c)).collect(),
            evidence: self.evidence.iter().map(|e| (e.id.as_str(), e)).collect(),
            images: self.images.iter().map(|i| (i.id.as_str(), i)).collect(),
        }
    }

    /// Claim ids of a split; `"all"` yields every claim in file order.
    pub fn split_ids(&self, split: &str) -> Vec<String> {
        if split == "all" {
            return self.claims.iter().map(|c| c.id.clone()).collect();
        }
        self.splits.get(split).cloned().unwrap_or_default()
    }

    pub fn has_explanations(&self) -> bool {
        self.claims.iter().any(|c| c.explanation.is_some())
    }

    /// Copy with every image association removed (claims and evidence).
    pub fn without_images(&self) -> Dataset {
        let mut d = self.clone();
        for c in &mut d.claims {
            c.image_ids.clear();
        }
        for e in &mut d.evidence {
            e.image_ids.clear();
        }
        d.images.clear();
        d
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IssueKind {
    DuplicateId,
    UnknownLabel,
    DanglingReference,
    Explanation,
    Split,
    EmptyCorpus,
    LabelSet,
    Image,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub record_id: String,
    pub kind: IssueKind,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RecordCounts {
    pub claims: usize,
    pub evidence: usize,
    pub images: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
    pub counts: RecordCounts,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, id: &str, kind: IssueKind, message: String) {
        self.errors.push(Issue {
            record_id: id.to_string(),
            kind,
            message,
        });
    }

    fn warn(&mut self, id: &str, kind: IssueKind, message: String) {
        self.warnings.push(Issue {
            record_id: id.to_string(),
            kind,
            message,
        });
    }
}

/// Lists every invariant violation of `d`. Never fails.
pub fn validate_dataset(d: &Dataset) -> ValidationReport {
    let mut report = ValidationReport {
        counts: RecordCounts {
            claims: d.claims.len(),
            evidence: d.evidence.len(),
            images: d.images.len(),
        },
        ..Default::default()
    };

    if !(2..=3).contains(&d.label_set.len()) {
        report.error(
            "",
            IssueKind::LabelSet,
            format!("label set must have 2 or 3 labels, has {}", d.label_set.len()),
        );
    }
    if d.evidence.is_empty() {
        report.error("", IssueKind::EmptyCorpus, "evidence corpus is empty".into());
    }

    let mut image_ids = BTreeSet::new();
    for img in &d.images {
        if !image_ids.insert(img.id.as_str()) {
            report.error(&img.id, IssueKind::DuplicateId, "duplicate image id".into());
        }
        if img.channels != 3 || img.height == 0 || img.width == 0 {
            report.error(
                &img.id,
                IssueKind::Image,
                format!("unsupported raster {}x{}x{}", img.height, img.width, img.channels),
            );
        }
    }
    let mut evidence_ids = BTreeSet::new();
    for ev in &d.evidence {
        if !evidence_ids.insert(ev.id.as_str()) {
            report.error(&ev.id, IssueKind::DuplicateId, "duplicate evidence id".into());
        }
        for img in &ev.image_ids {
            if !image_ids.contains(img.as_str()) {
                report.error(
                    &ev.id,
                    IssueKind::DanglingReference,
                    format!("evidence {} references missing image {img}", ev.id),
                );
            }
        }
    }

    let declares_explanations = d.has_explanations();
    let mut claim_ids = BTreeSet::new();
    for c in &d.claims {
        if !claim_ids.insert(c.id.as_str()) {
            report.error(&c.id, IssueKind::DuplicateId, "duplicate claim id".into());
        }
        if !d.label_set.contains(&c.label) {
            report.error(
                &c.id,
                IssueKind::UnknownLabel,
                format!("claim {} has label {:?} outside {:?}", c.id, c.label, d.label_set),
            );
        }
        for img in &c.image_ids {
            if !image_ids.contains(img.as_str()) {
                report.error(
                    &c.id,
                    IssueKind::DanglingReference,
                    format!("claim {} references missing image {img}", c.id),
                );
            }
        }
        for ev in &c.gold_evidence_ids {
            if !evidence_ids.contains(ev.as_str()) {
                report.error(
                    &c.id,
                    IssueKind::DanglingReference,
                    format!("claim {} references missing evidence {ev}", c.id),
                );
            }
        }
        if declares_explanations && c.explanation.is_none() {
            report.error(
                &c.id,
                IssueKind::Explanation,
                "dataset declares explanations but this claim has none".into(),
            );
        }
        if c.label == NEI && !c.gold_evidence_ids.is_empty() {
            report.warn(&c.id, IssueKind::DanglingReference, "NEI claim carries gold evidence".into());
        }
        if c.label != NEI && c.gold_evidence_ids.is_empty() {
            report.warn(
                &c.id,
                IssueKind::DanglingReference,
                "claim has no gold evidence; excluded from retrieval training".into(),
            );
        }
    }

    let mut seen: BTreeMap<&str, &str> = BTreeMap::new();
    for (split, ids) in &d.splits {
        for id in ids {
            if !claim_ids.contains(id.as_str()) {
                report.error(
                    id,
                    IssueKind::Split,
                    format!("split {split} references missing claim {id}"),
                );
            }
            if let Some(other) = seen.insert(id.as_str(), split.as_str()) {
                report.error(
                    id,
                    IssueKind::Split,
                    format!("claim {id} appears in splits {other} and {split}"),
                );
            }
        }
    }
    report
}
