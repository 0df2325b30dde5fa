//! Deterministic toy corpora whose texts and images carry correlated signal.
//!
//! Evidence texts come in pairs with identical wording; the two members of a
//! pair differ only in their chart images (bar colour and trend). Claims name
//! the colour of their gold evidence's chart, so text alone cannot tell the
//! pair apart while text plus images can. A claim is SUPPORTed when its trend
//! word matches the trend drawn in the gold chart and REFUTEd otherwise.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{label_set, ClaimRecord, Dataset, EvidenceRecord, ImageRecord, NEI, SUPPORT};
use crate::error::{Error, Result};

const PALETTE: [(&str, [u8; 3]); 12] = [
    ("red", [220, 40, 40]),
    ("blue", [40, 70, 220]),
    ("green", [40, 170, 60]),
    ("orange", [240, 140, 20]),
    ("purple", [130, 50, 180]),
    ("cyan", [30, 190, 200]),
    ("yellow", [230, 210, 30]),
    ("magenta", [210, 50, 170]),
    ("brown", [130, 80, 40]),
    ("pink", [250, 150, 180]),
    ("olive", [120, 130, 30]),
    ("navy", [20, 30, 110]),
];

const TOPIC_WORDS: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_claims: usize,
    pub n_evidence: usize,
    pub n_images: usize,
    /// Number of distinct topic words.
    pub vocab: usize,
    pub with_explanations: bool,
    /// Three-way labels (adds NEI claims without gold evidence).
    pub with_nei: bool,
    /// Side length of the square rasters.
    pub image_size: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_claims: 16,
            n_evidence: 8,
            n_images: 8,
            vocab: 24,
            with_explanations: true,
            with_nei: false,
            image_size: 16,
        }
    }
}

fn render_chart(size: u32, color: [u8; 3], rising: bool, variant: usize) -> RgbImage {
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    let bars = 4u32;
    let slot = size / bars;
    let width = slot.saturating_sub(1).max(1);
    for b in 0..bars {
        let step = if rising { b + 1 } else { bars - b };
        let height = ((step * size) / (bars + 1) + variant as u32 % 2).min(size);
        let x0 = b * slot;
        for x in x0..(x0 + width).min(size) {
            for y in (size - height)..size {
                img.put_pixel(x, y, Rgb(color));
            }
        }
    }
    img
}

fn trend_word(rising: bool) -> &'static str {
    if rising {
        "rises"
    } else {
        "falls"
    }
}

pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.n_claims == 0 || cfg.n_evidence == 0 || cfg.n_images == 0 {
        return Err(Error::InvalidConfig("synthetic counts must be at least 1".into()));
    }
    if cfg.with_nei && cfg.n_claims < 3 {
        return Err(Error::InvalidConfig("three-way corpora need at least 3 claims".into()));
    }
    if cfg.vocab < 10 {
        return Err(Error::InvalidConfig(format!("vocab must be >= 10, got {}", cfg.vocab)));
    }
    if cfg.image_size < 4 {
        return Err(Error::InvalidConfig("image_size must be at least 4".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = (0..cfg.vocab).map(|i| format!("w{i}")).collect();

    let n_pairs = cfg.n_evidence.div_ceil(2);
    let topics: Vec<Vec<String>> = (0..n_pairs)
        .map(|_| {
            words
                .choose_multiple(&mut rng, TOPIC_WORDS)
                .cloned()
                .collect()
        })
        .collect();
    let rising: Vec<bool> = (0..cfg.n_evidence).map(|_| rng.random::<bool>()).collect();

    let mut evidence: Vec<EvidenceRecord> = (0..cfg.n_evidence)
        .map(|j| EvidenceRecord {
            id: format!("ev{j:03}"),
            text: format!("the chart about {} reports a measured trend", topics[j / 2].join(" ")),
            image_ids: Vec::new(),
        })
        .collect();

    let images: Vec<ImageRecord> = (0..cfg.n_images)
        .map(|k| {
            let j = k % cfg.n_evidence;
            let variant = k / cfg.n_evidence;
            let id = format!("img{k:03}");
            evidence[j].image_ids.push(id.clone());
            ImageRecord::new(id, render_chart(cfg.image_size, PALETTE[j % PALETTE.len()].1, rising[j], variant))
        })
        .collect();

    let labels = label_set(cfg.with_nei);
    let claims: Vec<ClaimRecord> = (0..cfg.n_claims)
        .map(|i| {
            let label = labels[i % labels.len()].clone();
            let id = format!("cl{i:03}");
            if label == NEI {
                let color = PALETTE[rng.random_range(0..PALETTE.len())].0;
                let topic: Vec<String> = words
                    .choose_multiple(&mut rng, TOPIC_WORDS)
                    .cloned()
                    .collect();
                let claimed = rng.random::<bool>();
                return ClaimRecord {
                    id,
                    text: format!("{color} chart about {} {}", topic.join(" "), trend_word(claimed)),
                    image_ids: Vec::new(),
                    gold_evidence_ids: Vec::new(),
                    explanation: cfg.with_explanations.then(|| {
                        format!(
                            "no chart about {} is available so there is not enough information",
                            topic.join(" ")
                        )
                    }),
                    label,
                };
            }
            let j = (i / labels.len()) % cfg.n_evidence;
            let color = PALETTE[j % PALETTE.len()].0;
            let topic = topics[j / 2].join(" ");
            let claimed = if label == SUPPORT { rising[j] } else { !rising[j] };
            let verdict = if label == SUPPORT { "supported" } else { "refuted" };
            ClaimRecord {
                id,
                text: format!("{color} chart about {topic} {}", trend_word(claimed)),
                image_ids: Vec::new(),
                gold_evidence_ids: vec![evidence[j].id.clone()],
                explanation: cfg.with_explanations.then(|| {
                    format!(
                        "the {color} chart about {topic} {} so the claim is {verdict}",
                        trend_word(rising[j])
                    )
                }),
                label,
            }
        })
        .collect();

    let splits = BTreeMap::from([
        ("train".to_string(), claims.iter().map(|c| c.id.clone()).collect()),
        ("val".to_string(), Vec::new()),
        ("test".to_string(), Vec::new()),
    ]);
    Ok(Dataset {
        claims,
        evidence,
        images,
        splits,
        label_set: labels,
    })
}
