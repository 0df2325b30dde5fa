use std::collections::BTreeMap;

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::config::{Ablation, EvidenceSetting, ExplanationMode, TrainConfig};
use crate::datamodel::{ClaimRecord, Dataset, DatasetIndex};
use crate::encoder::{EncodedUnit, EncoderParams};
use crate::error::{Error, Result};
use crate::explainer::{
    build_fid_input, consistency_loss, fuse_in_decoder, generate, generation_loss, pool_logits, teacher_forcing,
    Explanation, ExplanationHead, Seq2SeqParams,
};
use crate::nn::{to_flat, ParamBuilder, ParamStore};
use crate::retriever::{self, encode_claim, encode_evidence, RankedList, RetrievalIndex};
use crate::tokenizer::Vocabulary;
use crate::verifier::{distribution, verification_loss_from_logits, verify, FusionParams, VerdictDistribution};

/// Vocabulary over every claim, evidence and explanation text.
pub fn build_vocabulary(d: &Dataset, cap: usize) -> Vocabulary {
    let texts = d
        .claims
        .iter()
        .map(|c| c.text.as_str())
        .chain(d.evidence.iter().map(|e| e.text.as_str()))
        .chain(d.claims.iter().filter_map(|c| c.explanation.as_deref()));
    Vocabulary::build(texts, cap)
}

/// Stage-1 encoder, registered under `retriever.`.
#[derive(Debug, Clone)]
pub struct RetrieverModel {
    pub vocab: Vocabulary,
    pub encoder: EncoderParams,
    pub store: ParamStore,
}

impl RetrieverModel {
    pub fn new(config: &TrainConfig, vocab: Vocabulary, rng: &mut ChaCha8Rng) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, rng, config.hidden);
        let encoder = b.scope("retriever", |b| {
            EncoderParams::new(b, config.encoder_config(vocab.len()), config.encoder_flags())
        })?;
        Ok(Self { vocab, encoder, store })
    }

    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        self.store.fingerprint()
    }

    pub fn build_index(&self, d: &Dataset) -> Result<RetrievalIndex> {
        retriever::build_index(d, &self.encoder, &self.vocab, self.fingerprint()?)
    }

    pub fn claim_embedding(&self, lookup: &DatasetIndex<'_>, claim: &ClaimRecord) -> Result<Vec<f64>> {
        to_flat(&encode_claim(&self.encoder, &self.vocab, lookup, claim)?.text_embedding)
    }

    pub fn retrieve(
        &self,
        lookup: &DatasetIndex<'_>,
        claim: &ClaimRecord,
        index: &RetrievalIndex,
        k: usize,
    ) -> Result<RankedList> {
        retriever::retrieve(&claim.id, &self.claim_embedding(lookup, claim)?, index, k)
    }

    /// Differentiable in-batch loss over `(claim, gold evidence)` pairs.
    pub fn batch_loss(&self, lookup: &DatasetIndex<'_>, pairs: &[(&ClaimRecord, &str)]) -> Result<Tensor> {
        let units = pairs
            .iter()
            .map(|(c, e)| {
                Ok((
                    encode_claim(&self.encoder, &self.vocab, lookup, c)?,
                    encode_evidence(&self.encoder, &self.vocab, lookup, e)?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        retriever::contrastive_loss(&units)
    }
}

/// Loss terms of one claim. `generation` and `regularizer` are absent when
/// the explanation objective is off.
#[derive(Debug, Clone)]
pub struct ClaimLoss {
    pub verification: Tensor,
    pub generation: Option<Tensor>,
    pub regularizer: Option<Tensor>,
}

impl ClaimLoss {
    /// `L_Ver + L_Exp + λ L_Reg`.
    pub fn total(&self, lambda: f64) -> Result<Tensor> {
        let mut t = self.verification.clone();
        if let Some(g) = &self.generation {
            t = (t + g)?;
        }
        if let Some(r) = &self.regularizer {
            if lambda != 0.0 {
                t = (t + (r * lambda)?)?;
            }
        }
        Ok(t)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub distribution: VerdictDistribution,
    pub explanation: Option<Explanation>,
}

/// Stage-2 model: verification encoder, fusion and classifier, seq2seq
/// generator and explanation head.
#[derive(Debug, Clone)]
pub struct JointModel {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub label_set: Vec<String>,
    pub encoder: EncoderParams,
    pub fusion: FusionParams,
    pub seq2seq: Seq2SeqParams,
    pub head: ExplanationHead,
    pub store: ParamStore,
    /// Whether `L_Exp` (and with it `L_Reg`) is trained.
    pub explain: bool,
}

impl JointModel {
    pub fn new(
        config: &TrainConfig,
        vocab: Vocabulary,
        label_set: Vec<String>,
        explain: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d, v, n) = (config.hidden, vocab.len(), label_set.len());
        let mut store = ParamStore::new();
        let mut b = ParamBuilder::new(&mut store, rng, d);
        let (encoder, fusion) = b.scope("verifier", |b| {
            let enc = b.scope("encoder", |b| {
                EncoderParams::new(b, config.encoder_config(v), config.encoder_flags())
            })?;
            Ok((enc, FusionParams::new(b, d, config.heads, n)?))
        })?;
        let seq2seq = b.scope("generator", |b| Seq2SeqParams::new(b, config.seq2seq_config(v)))?;
        let head = b.scope("consistency", |b| ExplanationHead::new(b, v, d, n))?;
        Ok(Self {
            config: config.clone(),
            vocab,
            label_set,
            encoder,
            fusion,
            seq2seq,
            head,
            store,
            explain,
        })
    }

    /// Copies the retrieval encoder weights into the verification encoder.
    pub fn init_from_retriever(&self, r: &RetrieverModel) -> Result<()> {
        self.store
            .restore_renamed(&r.store.snapshot()?, "retriever.", "verifier.encoder.")
    }

    fn explanation_ids(&self, claim: &ClaimRecord) -> Option<Vec<u32>> {
        let cap = self
            .config
            .max_explanation_len
            .min(self.config.max_positions.saturating_sub(1));
        let mut ids = self.vocab.encode_words(claim.explanation.as_deref()?);
        ids.truncate(cap);
        (!ids.is_empty()).then_some(ids)
    }

    fn text_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.vocab.encode_words(text);
        ids.truncate(self.config.max_text_len);
        ids
    }

    /// Decoder memory: each evidence paired with the claim, encoded and
    /// averaged; under `no_fid` only the top-ranked pair.
    pub fn memory(
        &self,
        lookup: &DatasetIndex<'_>,
        claim: &ClaimRecord,
        claim_unit: &EncodedUnit,
        evidence_ids: &[String],
        evidence_units: &[EncodedUnit],
    ) -> Result<Tensor> {
        let claim_ids = self.text_ids(&claim.text);
        let keep = if self.config.has(Ablation::NoFid) { 1 } else { evidence_ids.len() };
        let per = evidence_ids
            .iter()
            .zip(evidence_units)
            .take(keep)
            .map(|(id, unit)| {
                let e = lookup
                    .evidence(id)
                    .ok_or_else(|| Error::DanglingReference(id.clone()))?;
                let mut cls = claim_unit.image_embeddings.clone();
                cls.extend(unit.image_embeddings.iter().cloned());
                let input = build_fid_input(&claim_ids, &self.text_ids(&e.text), &cls, &self.encoder.w_img, &self.seq2seq)?;
                self.seq2seq.encode(&input)
            })
            .collect::<Result<Vec<_>>>()?;
        fuse_in_decoder(&per)
    }

    fn encode_all(
        &self,
        lookup: &DatasetIndex<'_>,
        claim: &ClaimRecord,
        evidence_ids: &[String],
    ) -> Result<(EncodedUnit, Vec<EncodedUnit>)> {
        if evidence_ids.is_empty() {
            return Err(Error::NoEvidence);
        }
        let c = encode_claim(&self.encoder, &self.vocab, lookup, claim)?;
        let ev = evidence_ids
            .iter()
            .map(|id| encode_evidence(&self.encoder, &self.vocab, lookup, id))
            .collect::<Result<Vec<_>>>()?;
        Ok((c, ev))
    }

    pub fn verdict_logits(&self, lookup: &DatasetIndex<'_>, claim: &ClaimRecord, evidence_ids: &[String]) -> Result<Tensor> {
        let (c, ev) = self.encode_all(lookup, claim, evidence_ids)?;
        verify(&c, &ev, &self.fusion, &self.encoder, self.config.fusion_flags())
    }

    /// Loss terms for one claim with the given evidence.
    pub fn claim_loss(&self, lookup: &DatasetIndex<'_>, claim: &ClaimRecord, evidence_ids: &[String]) -> Result<ClaimLoss> {
        let gold = self
            .label_set
            .iter()
            .position(|l| *l == claim.label)
            .ok_or_else(|| Error::UnknownLabel(claim.label.clone()))?;
        let (c, ev) = self.encode_all(lookup, claim, evidence_ids)?;
        let logits = verify(&c, &ev, &self.fusion, &self.encoder, self.config.fusion_flags())?;
        let verification = verification_loss_from_logits(&logits, gold)?;
        let target = if self.explain { self.explanation_ids(claim) } else { None };
        let Some(target) = target else {
            return Ok(ClaimLoss {
                verification,
                generation: None,
                regularizer: None,
            });
        };
        let memory = self.memory(lookup, claim, &c, evidence_ids, &ev)?;
        let (input, targets) = teacher_forcing(&target)?;
        let token_logits = self.seq2seq.decode(&memory, &input)?;
        let generation = generation_loss(&token_logits, &targets)?;
        let regularizer = if self.config.effective_lambda() > 0.0 {
            let pooled = pool_logits(&token_logits.narrow(0, 0, target.len())?)?;
            let (reg, _) = consistency_loss(&logits, &pooled, &self.head, gold, self.config.kl_stop_gradient)?;
            Some(reg)
        } else {
            None
        };
        Ok(ClaimLoss {
            verification,
            generation: Some(generation),
            regularizer,
        })
    }

    pub fn predict(
        &self,
        lookup: &DatasetIndex<'_>,
        claim: &ClaimRecord,
        evidence_ids: &[String],
        with_explanation: bool,
    ) -> Result<Prediction> {
        let (c, ev) = self.encode_all(lookup, claim, evidence_ids)?;
        let logits = verify(&c, &ev, &self.fusion, &self.encoder, self.config.fusion_flags())?;
        let explanation = if with_explanation {
            let memory = self.memory(lookup, claim, &c, evidence_ids, &ev)?;
            Some(generate(&memory, &self.seq2seq, &self.vocab, self.config.max_explanation_len)?)
        } else {
            None
        };
        Ok(Prediction {
            distribution: distribution(&logits, &self.label_set)?,
            explanation,
        })
    }
}

/// Whether the explanation objective runs for this dataset and config.
pub fn explanation_enabled(config: &TrainConfig, d: &Dataset) -> Result<bool> {
    match config.explanations {
        ExplanationMode::Off => Ok(false),
        ExplanationMode::Auto => Ok(d.has_explanations()),
        ExplanationMode::Required if d.has_explanations() => Ok(true),
        ExplanationMode::Required => Err(Error::MissingExplanations),
    }
}

/// Evidence used for a claim: its gold set in the gold setting (falling
/// back to retrieval when it has none), otherwise the top-k retrieved.
pub fn evidence_for(
    config: &TrainConfig,
    claim: &ClaimRecord,
    retrieved: &BTreeMap<String, RankedList>,
) -> Result<Vec<String>> {
    if config.evidence_setting == EvidenceSetting::Gold && !claim.gold_evidence_ids.is_empty() {
        return Ok(claim.gold_evidence_ids.clone());
    }
    let list = retrieved.get(&claim.id).ok_or(Error::NoEvidence)?;
    let ids: Vec<String> = list.ids().into_iter().take(config.k_retrieved).collect();
    if ids.is_empty() {
        return Err(Error::NoEvidence);
    }
    Ok(ids)
}
