//! Explanation generation: a sequence-to-sequence model reading each
//! (claim, evidence) pair separately with image embeddings prepended, mean
//! pooling the encoded pairs before decoding, plus the loss that ties the
//! explanation to the predicted verdict.

use candle_core::{Tensor, Var, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::encoder::StackStep;
use crate::nn::probe::Site;
use crate::nn::{
    causal_mask, floored_log_softmax, masked_mean, multi_head_attention, softmax_rows, to_rows, LayerNorm, Linear,
    Mlp, ParamBuilder, DEVICE,
};
use crate::tokenizer::{Vocabulary, BOS, EOS, SEP};
use crate::verifier::PROB_FLOOR;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Seq2SeqConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Rows of the shared positional table; also the text budget of one
    /// encoder input and of the decoder.
    pub max_positions: usize,
}

#[derive(Debug, Clone)]
pub struct DecoderStep {
    pub self_q: Linear,
    pub self_k: Linear,
    pub self_v: Linear,
    pub self_out: Linear,
    pub norm_self: LayerNorm,
    pub cross_q: Linear,
    pub cross_k: Linear,
    pub cross_v: Linear,
    pub cross_out: Linear,
    pub norm_cross: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
}

impl DecoderStep {
    fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                self_q: Linear::new(b, "self_q", d, d, true)?,
                self_k: Linear::new(b, "self_k", d, d, true)?,
                self_v: Linear::new(b, "self_v", d, d, true)?,
                self_out: Linear::new(b, "self_out", d, d, true)?,
                norm_self: LayerNorm::new(b, "norm_self", d)?,
                cross_q: Linear::new(b, "cross_q", d, d, true)?,
                cross_k: Linear::new(b, "cross_k", d, d, true)?,
                cross_v: Linear::new(b, "cross_v", d, d, true)?,
                cross_out: Linear::new(b, "cross_out", d, d, true)?,
                norm_cross: LayerNorm::new(b, "norm_cross", d)?,
                ffn: Mlp::new(b, "ffn", d, 4 * d, d)?,
                norm_ffn: LayerNorm::new(b, "norm_ffn", d)?,
            })
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor, heads: usize, mask: &Tensor) -> Result<Tensor> {
        let a = multi_head_attention(
            &self.self_q.forward(x)?,
            &self.self_k.forward(x)?,
            &self.self_v.forward(x)?,
            heads,
            Some(mask),
            Site::LmDecoderSelf,
        )?;
        let x = self.norm_self.forward(&(x + self.self_out.forward(&a)?)?)?;
        let a = multi_head_attention(
            &self.cross_q.forward(&x)?,
            &self.cross_k.forward(memory)?,
            &self.cross_v.forward(memory)?,
            heads,
            None,
            Site::LmDecoderCross,
        )?;
        let x = self.norm_cross.forward(&(&x + self.cross_out.forward(&a)?)?)?;
        self.norm_ffn.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

/// Encoder-decoder language model. The output head is tied to the token
/// embedding.
#[derive(Debug, Clone)]
pub struct Seq2SeqParams {
    pub config: Seq2SeqConfig,
    pub embedding: Var,
    pub positional: Var,
    pub encoder_steps: Vec<StackStep>,
    pub decoder_steps: Vec<DecoderStep>,
    pub output_bias: Var,
}

impl Seq2SeqParams {
    pub fn new(b: &mut ParamBuilder, config: Seq2SeqConfig) -> Result<Self> {
        if config.hidden % config.heads.max(1) != 0 || [config.layers, config.heads, config.vocab_size].contains(&0) {
            return Err(Error::InvalidConfig(format!("invalid seq2seq config {config:?}")));
        }
        let d = config.hidden;
        Ok(Self {
            config,
            embedding: b.matrix("embedding", config.vocab_size, d)?,
            positional: b.matrix("positional", config.max_positions, d)?,
            encoder_steps: (0..config.layers)
                .map(|l| StackStep::new(b, &format!("encoder{l}"), d))
                .collect::<Result<_>>()?,
            decoder_steps: (0..config.layers)
                .map(|l| DecoderStep::new(b, &format!("decoder{l}"), d))
                .collect::<Result<_>>()?,
            output_bias: b.constant_row("output_bias", config.vocab_size, 0.0)?,
        })
    }

    fn embed(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.len() > self.config.max_positions {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens exceed {} positions",
                ids.len(),
                self.config.max_positions
            )));
        }
        let idx = Tensor::from_slice(ids, ids.len(), &DEVICE)?;
        let emb = self.embedding.as_tensor().index_select(&idx, 0)?;
        Ok((emb + self.positional.as_tensor().narrow(0, 0, ids.len())?)?)
    }

    /// Runs the language encoder over one `Ê` matrix.
    pub fn encode(&self, e_hat: &Tensor) -> Result<Tensor> {
        let mut x = e_hat.clone();
        for step in &self.encoder_steps {
            x = step.forward(&x, &x, self.config.heads, None, Site::LmEncoder)?;
        }
        Ok(x)
    }

    /// Teacher-forced logits (`len(input) × V`) given the fused memory.
    pub fn decode(&self, memory: &Tensor, input: &[u32]) -> Result<Tensor> {
        let mut x = self.embed(input)?;
        let mask = causal_mask(input.len())?;
        for step in &self.decoder_steps {
            x = step.forward(&x, memory, self.config.heads, &mask)?;
        }
        Ok(x
            .matmul(&self.embedding.as_tensor().t()?)?
            .broadcast_add(self.output_bias.as_tensor())?)
    }
}

/// `Ê = [W_img z (claim images) ‖ W_img z (evidence images) ‖ E]` where `E`
/// embeds `claim ‖ SEP ‖ evidence` with positions. Evidence words are
/// dropped first when the text exceeds the positional budget.
pub fn build_fid_input(
    claim_ids: &[u32],
    evidence_ids: &[u32],
    image_cls: &[Tensor],
    w_img: &Linear,
    params: &Seq2SeqParams,
) -> Result<Tensor> {
    let budget = params.config.max_positions;
    if claim_ids.len() + 1 > budget {
        return Err(Error::OverLengthAfterTruncation {
            needed: claim_ids.len() + 1,
            budget,
        });
    }
    let room = budget - claim_ids.len() - 1;
    let mut tokens = claim_ids.to_vec();
    tokens.push(SEP);
    tokens.extend(evidence_ids.iter().take(room));
    let text = params.embed(&tokens)?;
    if image_cls.is_empty() {
        return Ok(text);
    }
    let images = w_img.forward(&Tensor::cat(image_cls, 0)?)?;
    Ok(Tensor::cat(&[images, text], 0)?)
}

/// Mask-aware mean of the encoded pairs.
pub fn fuse_in_decoder(per_evidence: &[Tensor]) -> Result<Tensor> {
    masked_mean(per_evidence)
}

/// Decoder input `[BOS, e_1..e_n]` and targets `[e_1..e_n, EOS]`.
pub fn teacher_forcing(gold: &[u32]) -> Result<(Vec<u32>, Vec<u32>)> {
    if gold.is_empty() {
        return Err(Error::EmptyGold);
    }
    let mut input = vec![BOS];
    input.extend_from_slice(gold);
    let mut target = gold.to_vec();
    target.push(EOS);
    Ok((input, target))
}

/// `-sum_j log p(target_j)` with probabilities floored at 1e-12.
pub fn generation_loss(logits: &Tensor, targets: &[u32]) -> Result<Tensor> {
    if targets.is_empty() {
        return Err(Error::EmptyGold);
    }
    let (rows, _) = logits.dims2()?;
    if rows != targets.len() {
        return Err(Error::ShapeMismatch(format!("{rows} logit rows vs {} targets", targets.len())));
    }
    let logp = floored_log_softmax(logits, PROB_FLOOR)?;
    let idx = Tensor::from_slice(targets, (targets.len(), 1), &DEVICE)?;
    Ok(logp.gather(&idx, 1)?.sum_all()?.neg()?)
}

/// Mean of the per-token logit rows (`n × V` to `1 × V`).
pub fn pool_logits(per_token: &Tensor) -> Result<Tensor> {
    if per_token.dim(0)? == 0 {
        return Err(Error::EmptySequence);
    }
    Ok(per_token.mean_keepdim(0)?)
}

/// Symmetric KL between the verdict distribution `y` and the explanation
/// distribution `y_e`, plus cross-entropy of `y_e` on the gold label. Both
/// inputs are `1 × |labels|` probability rows; logs are floored at 1e-12.
pub fn consistency_loss_from_probs(y: &Tensor, y_e: &Tensor, gold: usize) -> Result<Tensor> {
    let n = y.dim(D::Minus1)?;
    if gold >= n {
        return Err(Error::UnknownLabel(format!("label index {gold}")));
    }
    let log_y = y.maximum(PROB_FLOOR)?.log()?;
    let log_e = y_e.maximum(PROB_FLOOR)?.log()?;
    let diff = (&log_y - &log_e)?;
    let kl_y_e = (y * &diff)?.sum_all()?;
    let kl_e_y = (y_e * diff.neg()?)?.sum_all()?;
    let ce = log_e.flatten_all()?.narrow(0, gold, 1)?.sum_all()?.neg()?;
    Ok(((kl_y_e + kl_e_y)? + ce)?)
}

/// Maps pooled logits to a label distribution.
#[derive(Debug, Clone)]
pub struct ExplanationHead {
    pub mlp: Mlp,
}

impl ExplanationHead {
    pub fn new(b: &mut ParamBuilder, vocab_size: usize, hidden: usize, n_labels: usize) -> Result<Self> {
        Ok(Self {
            mlp: Mlp::new(b, "explanation_head", vocab_size, hidden, n_labels)?,
        })
    }

    pub fn probs(&self, pooled: &Tensor) -> Result<Tensor> {
        softmax_rows(&self.mlp.forward(pooled)?)
    }
}

/// Regularizer from verdict logits and pooled explanation logits. Returns
/// the loss and `ŷ_e`. With `detach_verdict` the verdict distribution is
/// treated as a constant.
pub fn consistency_loss(
    verdict_logits: &Tensor,
    pooled: &Tensor,
    head: &ExplanationHead,
    gold: usize,
    detach_verdict: bool,
) -> Result<(Tensor, Tensor)> {
    let mut y = softmax_rows(verdict_logits)?;
    if detach_verdict {
        y = y.detach();
    }
    let y_e = head.probs(pooled)?;
    Ok((consistency_loss_from_probs(&y, &y_e, gold)?, y_e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Explanation {
    pub token_ids: Vec<u32>,
    pub text: String,
    /// Logit rows of the emitted tokens.
    pub per_step_logits: Vec<Vec<f64>>,
}

/// Greedy decoding; ties go to the lowest token id. Stops after EOS or
/// `max_len` tokens (EOS is not part of the returned ids).
pub fn generate(memory: &Tensor, params: &Seq2SeqParams, vocab: &Vocabulary, max_len: usize) -> Result<Explanation> {
    if max_len == 0 {
        return Err(Error::InvalidConfig("max_len must be at least 1".into()));
    }
    let max_len = max_len.min(params.config.max_positions.saturating_sub(1)).max(1);
    let mut input = vec![BOS];
    let mut token_ids = Vec::new();
    let mut per_step_logits = Vec::new();
    for _ in 0..max_len {
        let logits = params.decode(memory, &input)?;
        let last = to_rows(&logits.narrow(0, input.len() - 1, 1)?)?.remove(0);
        let mut best = 0;
        for (i, v) in last.iter().enumerate() {
            if *v > last[best] {
                best = i;
            }
        }
        let tok = best as u32;
        if tok == EOS {
            break;
        }
        per_step_logits.push(last);
        token_ids.push(tok);
        input.push(tok);
    }
    Ok(Explanation {
        text: vocab.decode(&token_ids),
        token_ids,
        per_step_logits,
    })
}
