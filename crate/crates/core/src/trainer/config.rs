use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, EncoderFlags};
use crate::error::{Error, Result};
use crate::explainer::Seq2SeqConfig;
use crate::verifier::FusionFlags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoImages,
    NoI2t,
    NoT2i,
    NoTokenFusion,
    NoEvidenceFusion,
    NoFid,
    NoRegularizer,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::NoImages,
        Ablation::NoI2t,
        Ablation::NoT2i,
        Ablation::NoTokenFusion,
        Ablation::NoEvidenceFusion,
        Ablation::NoFid,
        Ablation::NoRegularizer,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::NoImages => "no_images",
            Ablation::NoI2t => "no_i2t",
            Ablation::NoT2i => "no_t2i",
            Ablation::NoTokenFusion => "no_token_fusion",
            Ablation::NoEvidenceFusion => "no_evidence_fusion",
            Ablation::NoFid => "no_fid",
            Ablation::NoRegularizer => "no_regularizer",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation {s:?}")))
    }
}

/// Parses a comma-separated ablation list; empty input gives no ablations.
pub fn parse_ablations(s: &str) -> Result<BTreeSet<Ablation>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty() && *x != "none")
        .map(Ablation::from_str)
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvidenceSetting {
    Gold,
    Retrieved,
}

impl EvidenceSetting {
    pub fn as_str(self) -> &'static str {
        match self {
            EvidenceSetting::Gold => "gold",
            EvidenceSetting::Retrieved => "retrieved",
        }
    }
}

impl FromStr for EvidenceSetting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "gold" => Ok(EvidenceSetting::Gold),
            "retrieved" => Ok(EvidenceSetting::Retrieved),
            other => Err(Error::InvalidConfig(format!("evidence setting must be gold or retrieved, got {other:?}"))),
        }
    }
}

/// Whether the explanation losses run: `auto` follows the dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExplanationMode {
    Auto,
    Required,
    Off,
}

impl FromStr for ExplanationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(ExplanationMode::Auto),
            "required" => Ok(ExplanationMode::Required),
            "off" => Ok(ExplanationMode::Off),
            other => Err(Error::InvalidConfig(format!("explanations must be auto, required or off, got {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda_reg: f64,
    pub k_retrieved: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epoch cap for retriever training.
    pub max_epochs: usize,
    /// Epoch cap for joint training.
    pub joint_max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub evidence_setting: EvidenceSetting,
    pub ablations: BTreeSet<Ablation>,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_text_len: usize,
    pub patch_size: usize,
    pub max_positions: usize,
    pub vocab_cap: usize,
    pub max_explanation_len: usize,
    pub explanations: ExplanationMode,
    /// Treat the verdict distribution as a constant inside the regularizer.
    pub kl_stop_gradient: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_reg: 0.5,
            k_retrieved: 3,
            batch_size: 8,
            learning_rate: 1e-3,
            max_epochs: 200,
            joint_max_epochs: 300,
            patience: 20,
            seed: 7,
            evidence_setting: EvidenceSetting::Retrieved,
            ablations: BTreeSet::new(),
            layers: 2,
            hidden: 32,
            heads: 4,
            max_text_len: 32,
            patch_size: 4,
            max_positions: 40,
            vocab_cap: 5000,
            max_explanation_len: 24,
            explanations: ExplanationMode::Auto,
            kl_stop_gradient: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value {value:?} for {key}")))
}

impl TrainConfig {
    pub fn has(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key.trim() {
            "lambda_reg" => self.lambda_reg = parse(key, value)?,
            "k_retrieved" => self.k_retrieved = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "max_epochs" => self.max_epochs = parse(key, value)?,
            "joint_max_epochs" => self.joint_max_epochs = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "evidence_setting" => self.evidence_setting = value.parse()?,
            "ablations" => self.ablations = parse_ablations(value)?,
            "layers" => self.layers = parse(key, value)?,
            "hidden" => self.hidden = parse(key, value)?,
            "heads" => self.heads = parse(key, value)?,
            "max_text_len" => self.max_text_len = parse(key, value)?,
            "patch_size" => self.patch_size = parse(key, value)?,
            "max_positions" => self.max_positions = parse(key, value)?,
            "vocab_cap" => self.vocab_cap = parse(key, value)?,
            "max_explanation_len" => self.max_explanation_len = parse(key, value)?,
            "explanations" => self.explanations = value.parse()?,
            "kl_stop_gradient" => self.kl_stop_gradient = parse(key, value)?,
            other => return Err(Error::InvalidConfig(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidConfig(format!("line {}: expected key=value", i + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|_| Error::MissingFile(path.to_path_buf()))?;
        let mut cfg = Self::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_reg >= 0.0 && self.lambda_reg.is_finite()) {
            return Err(Error::InvalidConfig(format!("lambda_reg must be >= 0, got {}", self.lambda_reg)));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig("batch_size must be at least 2".into()));
        }
        if self.k_retrieved == 0 {
            return Err(Error::InvalidConfig("k_retrieved must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidConfig("learning_rate must be positive".into()));
        }
        if self.max_explanation_len == 0 {
            return Err(Error::InvalidConfig("max_explanation_len must be at least 1".into()));
        }
        self.encoder_config(self.vocab_cap.max(1)).validate()
    }

    pub fn encoder_config(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            max_text_len: self.max_text_len,
            patch_size: self.patch_size,
            channels: 3,
            vocab_size,
            max_positions: self.max_positions,
        }
    }

    pub fn seq2seq_config(&self, vocab_size: usize) -> Seq2SeqConfig {
        Seq2SeqConfig {
            layers: self.layers,
            hidden: self.hidden,
            heads: self.heads,
            vocab_size,
            max_positions: self.max_positions,
        }
    }

    pub fn encoder_flags(&self) -> EncoderFlags {
        EncoderFlags {
            image_to_text: !self.has(Ablation::NoI2t),
            text_to_image: !self.has(Ablation::NoT2i),
        }
    }

    pub fn fusion_flags(&self) -> FusionFlags {
        FusionFlags {
            token_fusion: !self.has(Ablation::NoTokenFusion),
            evidence_fusion: !self.has(Ablation::NoEvidenceFusion),
        }
    }

    /// Weight of the regularizer after ablations.
    pub fn effective_lambda(&self) -> f64 {
        if self.has(Ablation::NoRegularizer) {
            0.0
        } else {
            self.lambda_reg
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_key_values_and_comments() {
        let mut c = TrainConfig::default();
        c.apply_text("# toy\nlambda_reg = 0.25\nablations = no_fid, no_images\n\nevidence_setting=gold # inline\n")
            .unwrap();
        assert_eq!(c.lambda_reg, 0.25);
        assert_eq!(c.evidence_setting, EvidenceSetting::Gold);
        assert!(c.has(Ablation::NoFid) && c.has(Ablation::NoImages));
        assert!(c.apply_text("bogus = 1").is_err());
        assert!(c.apply_text("batch_size = many").is_err());
    }

    #[test]
    fn defaults_are_valid() {
        let c = TrainConfig::default();
        c.validate().unwrap();
        assert_eq!((c.lambda_reg, c.k_retrieved, c.batch_size), (0.5, 3, 8));
    }

    #[test]
    fn ablation_names_round_trip() {
        for a in Ablation::ALL {
            assert_eq!(a.as_str().parse::<Ablation>().unwrap(), a);
        }
    }
}
