//! Token-level and evidence-level fusion of a claim with its evidence, and
//! the verdict classifier.

use candle_core::{Tensor, D};

use crate::encoder::{EncodedUnit, EncoderParams};
use crate::error::{Error, Result};
use crate::nn::probe::Site;
use crate::nn::{
    floored_log_softmax, graph_attention, masked_mean, multi_head_attention, softmax_rows, to_flat, zeros, Linear,
    Mlp, ParamBuilder,
};

pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct FusionParams {
    pub heads: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    /// Maps `[H ‖ Z_t]` (`2d`) back to `d`.
    pub w_1: Linear,
    /// Maps `[h_CLS ‖ ẑ]` (`2d`) to `d`.
    pub w_2: Linear,
    pub w_evid: Linear,
    pub b_e2c: candle_core::Var,
    pub classifier: Mlp,
}

impl FusionParams {
    /// Fusion weights go under `fusion.`, the classifier under `classifier.`.
    pub fn new(b: &mut ParamBuilder, d: usize, heads: usize, n_labels: usize) -> Result<Self> {
        let (w_q, w_k, w_v, w_1, w_2, w_evid, b_e2c) = b.scope("fusion", |b| {
            Ok((
                Linear::new(b, "w_q", d, d, false)?,
                Linear::new(b, "w_k", d, d, false)?,
                Linear::new(b, "w_v", d, d, false)?,
                Linear::new(b, "w_1", 2 * d, d, false)?,
                Linear::new(b, "w_2", 2 * d, d, false)?,
                Linear::new(b, "w_evid", d, d, false)?,
                b.column("b_e2c", 2 * d)?,
            ))
        })?;
        let classifier = Mlp::new(b, "classifier", 2 * d, d, n_labels)?;
        Ok(Self {
            heads,
            w_q,
            w_k,
            w_v,
            w_1,
            w_2,
            w_evid,
            b_e2c,
            classifier,
        })
    }

    fn cross(&self, queries: &Tensor, keys: &Tensor, site: Site) -> Result<Tensor> {
        multi_head_attention(
            &self.w_q.forward(queries)?,
            &self.w_k.forward(keys)?,
            &self.w_v.forward(keys)?,
            self.heads,
            None,
            site,
        )
    }
}

/// `U = W_1 [H ‖ mean_i MHA(W_Q H, W_K Z_i, W_V Z_i)]`; without images the
/// image half is zero.
pub fn token_fuse_unit(h: &Tensor, z_list: &[Tensor], params: &FusionParams) -> Result<Tensor> {
    let (n, d) = h.dims2()?;
    let z_t = if z_list.is_empty() {
        zeros(n, d)?
    } else {
        let per_image = z_list
            .iter()
            .map(|z| {
                if z.dim(1)? != d {
                    return Err(Error::ShapeMismatch(format!("patch width {} vs {d}", z.dim(1)?)));
                }
                params.cross(h, z, Site::TokenFusion)
            })
            .collect::<Result<Vec<_>>>()?;
        (Tensor::stack(&per_image, 0)?.sum(0)? / per_image.len() as f64)?
    };
    params.w_1.forward(&Tensor::cat(&[h.clone(), z_t], 1)?)
}

/// Evidence-conditioned claim embedding: CLS row of the mean over evidence
/// of `MHA(W_Q U_t, W_K U_c, W_V U_c)`.
pub fn claim_evidence_interact(u_evidence: &[Tensor], u_claim: &Tensor, params: &FusionParams) -> Result<Tensor> {
    if u_evidence.is_empty() {
        return Err(Error::NoEvidence);
    }
    let per = u_evidence
        .iter()
        .map(|u| params.cross(u, u_claim, Site::ClaimEvidence))
        .collect::<Result<Vec<_>>>()?;
    Ok(masked_mean(&per)?.narrow(0, 0, 1)?)
}

/// Evidence-level fusion. Each evidence becomes
/// `t_k = W_2 [h_CLS ‖ ẑ]` with `ẑ` its images aggregated under the text
/// CLS; the claim then attends over `W_evid t_k`.
pub fn evidence_fuse(
    c: &Tensor,
    evidence: &[EncodedUnit],
    params: &FusionParams,
    encoder: &EncoderParams,
) -> Result<Tensor> {
    let (t, _) = evidence_fuse_weights(c, evidence, params, encoder)?;
    Ok(t)
}

/// [`evidence_fuse`] also returning the `1 × K` evidence weights.
pub fn evidence_fuse_weights(
    c: &Tensor,
    evidence: &[EncodedUnit],
    params: &FusionParams,
    encoder: &EncoderParams,
) -> Result<(Tensor, Tensor)> {
    if evidence.is_empty() {
        return Err(Error::NoEvidence);
    }
    let d = c.dim(1)?;
    let t_k = evidence
        .iter()
        .map(|unit| {
            let h_cls = &unit.text_embedding;
            let z_hat = if unit.image_embeddings.is_empty() {
                zeros(1, d)?
            } else {
                let query = encoder.w_txt.forward(h_cls)?;
                let z_tilde = encoder.w_img.forward(&Tensor::cat(&unit.image_embeddings, 0)?)?;
                graph_attention(&query, &z_tilde, encoder.b_i2t.as_tensor(), Site::EvidenceImages)?.0
            };
            params.w_2.forward(&Tensor::cat(&[h_cls.clone(), z_hat], 1)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let keys = params.w_evid.forward(&Tensor::cat(&t_k, 0)?)?;
    let query = encoder.w_txt.forward(c)?;
    graph_attention(&query, &keys, params.b_e2c.as_tensor(), Site::EvidenceFusion)
}

/// Unnormalized classifier output for `[c ‖ t]` (`1 × |labels|`).
pub fn classifier_logits(c: &Tensor, t: &Tensor, params: &FusionParams) -> Result<Tensor> {
    params.classifier.forward(&Tensor::cat(&[c.clone(), t.clone()], 1)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerdictDistribution {
    pub labels: Vec<String>,
    pub probs: Vec<f64>,
}

impl VerdictDistribution {
    /// Argmax; ties go to the lexicographically smallest label.
    pub fn predicted_label(&self) -> &str {
        let mut best = 0;
        for i in 1..self.probs.len() {
            let better = self.probs[i] > self.probs[best]
                || (self.probs[i] == self.probs[best] && self.labels[i] < self.labels[best]);
            if better {
                best = i;
            }
        }
        &self.labels[best]
    }

    pub fn index_of(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }
}

pub fn distribution(logits: &Tensor, labels: &[String]) -> Result<VerdictDistribution> {
    Ok(VerdictDistribution {
        labels: labels.to_vec(),
        probs: to_flat(&softmax_rows(logits)?)?,
    })
}

pub fn classify(c: &Tensor, t: &Tensor, params: &FusionParams, labels: &[String]) -> Result<VerdictDistribution> {
    distribution(&classifier_logits(c, t, params)?, labels)
}

/// `-ln max(p[gold], 1e-12)` from classifier logits (`1 × |labels|`).
pub fn verification_loss_from_logits(logits: &Tensor, gold: usize) -> Result<Tensor> {
    let n = logits.dim(D::Minus1)?;
    if gold >= n {
        return Err(Error::UnknownLabel(format!("label index {gold}")));
    }
    Ok(floored_log_softmax(logits, PROB_FLOOR)?
        .flatten_all()?
        .narrow(0, gold, 1)?
        .neg()?
        .sum_all()?)
}

/// Cross-entropy of a distribution against a gold label.
pub fn verification_loss(pred: &VerdictDistribution, gold: &str) -> Result<f64> {
    let i = pred.index_of(gold)?;
    Ok(-pred.probs[i].max(PROB_FLOOR).ln())
}

/// Which fusion stages are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionFlags {
    pub token_fusion: bool,
    pub evidence_fusion: bool,
}

impl Default for FusionFlags {
    fn default() -> Self {
        Self {
            token_fusion: true,
            evidence_fusion: true,
        }
    }
}

/// Full verification head: classifier logits for a claim and its evidence.
/// Without token fusion the claim embedding is its text CLS; without
/// evidence fusion the classifier sees `[c ‖ c]`.
pub fn verify(
    claim: &EncodedUnit,
    evidence: &[EncodedUnit],
    params: &FusionParams,
    encoder: &EncoderParams,
    flags: FusionFlags,
) -> Result<Tensor> {
    if evidence.is_empty() {
        return Err(Error::NoEvidence);
    }
    let c = if flags.token_fusion {
        let u_claim = token_fuse_unit(&claim.h, &claim.z, params)?;
        let u_evidence = evidence
            .iter()
            .map(|e| token_fuse_unit(&e.h, &e.z, params))
            .collect::<Result<Vec<_>>>()?;
        claim_evidence_interact(&u_evidence, &u_claim, params)?
    } else {
        claim.text_embedding.clone()
    };
    let t = if flags.evidence_fusion {
        evidence_fuse(&c, evidence, params, encoder)?
    } else {
        c.clone()
    };
    classifier_logits(&c, &t, params)
}
