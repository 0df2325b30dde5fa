//! Dot-product retrieval: the in-batch contrastive objective, an immutable
//! evidence index and exhaustive top-k search.

mod index;

pub use index::{read_index, write_index};

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::datamodel::{ClaimRecord, Dataset, DatasetIndex};
use crate::encoder::{EncodedUnit, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::{to_flat, DEVICE, DTYPE};
use crate::tokenizer::Vocabulary;

pub fn score(claim: &[f64], evidence: &[f64]) -> Result<f64> {
    if claim.len() != evidence.len() {
        return Err(Error::DimensionMismatch(claim.len(), evidence.len()));
    }
    Ok(claim.iter().zip(evidence).map(|(a, b)| a * b).sum())
}

/// `-sum_c log softmax_t(h_c · h_t)[gold]` over `B × d` claim and evidence
/// embeddings whose rows are paired.
pub fn contrastive_loss_from_embeddings(claims: &Tensor, evidence: &Tensor) -> Result<Tensor> {
    let (b, d) = claims.dims2()?;
    let (be, de) = evidence.dims2()?;
    if d != de {
        return Err(Error::DimensionMismatch(d, de));
    }
    if b != be {
        return Err(Error::ShapeMismatch(format!("{b} claims vs {be} evidence")));
    }
    if b < 2 {
        return Err(Error::BatchTooSmall(b));
    }
    let scores = claims.matmul(&evidence.t()?)?;
    let logp = candle_nn::ops::log_softmax(&scores, D::Minus1)?;
    let diag = logp.mul(&Tensor::eye(b, DTYPE, &DEVICE)?)?;
    Ok(diag.sum_all()?.neg()?)
}

/// Contrastive loss over `(claim, gold evidence)` pairs.
pub fn contrastive_loss(batch: &[(EncodedUnit, EncodedUnit)]) -> Result<Tensor> {
    if batch.len() < 2 {
        return Err(Error::BatchTooSmall(batch.len()));
    }
    let claims: Vec<Tensor> = batch.iter().map(|(c, _)| c.text_embedding.clone()).collect();
    let evidence: Vec<Tensor> = batch.iter().map(|(_, t)| t.text_embedding.clone()).collect();
    contrastive_loss_from_embeddings(&Tensor::cat(&claims, 0)?, &Tensor::cat(&evidence, 0)?)
}

/// Evidence embeddings (stored as `f32`, row-major) keyed by evidence id.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalIndex {
    pub evidence_ids: Vec<String>,
    pub dim: usize,
    pub embeddings: Vec<f32>,
    pub params_fingerprint: [u8; 32],
}

impl RetrievalIndex {
    pub fn len(&self) -> usize {
        self.evidence_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.evidence_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.embeddings[i * self.dim..(i + 1) * self.dim]
            .iter()
            .map(|&x| f64::from(x))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub claim_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn ids(&self) -> Vec<String> {
        self.entries.iter().map(|(id, _)| id.clone()).collect()
    }
}

/// Encodes one evidence text with its images.
pub fn encode_evidence(
    encoder: &EncoderParams,
    vocab: &Vocabulary,
    lookup: &DatasetIndex<'_>,
    evidence_id: &str,
) -> Result<EncodedUnit> {
    let ev = lookup
        .evidence(evidence_id)
        .ok_or_else(|| Error::DanglingReference(evidence_id.to_string()))?;
    encoder.encode(vocab, &ev.text, &lookup.images_of(&ev.image_ids))
}

pub fn encode_claim(
    encoder: &EncoderParams,
    vocab: &Vocabulary,
    lookup: &DatasetIndex<'_>,
    claim: &ClaimRecord,
) -> Result<EncodedUnit> {
    encoder.encode(vocab, &claim.text, &lookup.images_of(&claim.image_ids))
}

pub fn build_index(
    dataset: &Dataset,
    encoder: &EncoderParams,
    vocab: &Vocabulary,
    fingerprint: [u8; 32],
) -> Result<RetrievalIndex> {
    if dataset.evidence.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lookup = dataset.index();
    let mut embeddings = Vec::with_capacity(dataset.evidence.len() * encoder.config.hidden);
    for ev in &dataset.evidence {
        let unit = encoder.encode(vocab, &ev.text, &lookup.images_of(&ev.image_ids))?;
        embeddings.extend(to_flat(&unit.text_embedding)?.into_iter().map(|x| x as f32));
    }
    Ok(RetrievalIndex {
        evidence_ids: dataset.evidence.iter().map(|e| e.id.clone()).collect(),
        dim: encoder.config.hidden,
        embeddings,
        params_fingerprint: fingerprint,
    })
}

/// Top-`min(k, |T|)` evidence for a claim embedding; ties go to the smaller id.
pub fn retrieve(claim_id: &str, claim_embedding: &[f64], index: &RetrievalIndex, k: usize) -> Result<RankedList> {
    if index.is_empty() {
        return Err(Error::EmptyIndex);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    let mut scored = (0..index.len())
        .map(|i| Ok((index.evidence_ids[i].clone(), score(claim_embedding, &index.row(i))?)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scored.truncate(k);
    Ok(RankedList {
        claim_id: claim_id.to_string(),
        entries: scored,
    })
}
