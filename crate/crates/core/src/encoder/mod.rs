//! The two-layer text/image graph and the nested encoder.
//!
//! A unit (claim or evidence text plus its images) is encoded by two
//! transformer stacks run in lock step. Before every step the image CLS
//! embeddings are aggregated into a virtual token for the text stack and the
//! text CLS embedding is handed to every image stack, together with an
//! aggregate over the sibling images. Virtual tokens only extend keys and
//! values, so sequence lengths never change.

mod graph;
mod patch;

pub use graph::{build_graph, GraphMode, MultiModalGraph};
pub use patch::patchify;

use candle_core::{Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::datamodel::ImageRecord;
use crate::error::{Error, Result};
use crate::nn::probe::Site;
use crate::nn::{graph_attention, multi_head_attention, LayerNorm, Linear, Mlp, ParamBuilder, ParamStore, DEVICE};
use crate::tokenizer::{Vocabulary, CLS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Number of stack steps `L`.
    pub layers: usize,
    /// Hidden width `d`.
    pub hidden: usize,
    pub heads: usize,
    /// Text length cap, CLS included.
    pub max_text_len: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub vocab_size: usize,
    /// Rows of each positional table `W`.
    pub max_positions: usize,
}

impl EncoderConfig {
    /// Full-size setting (12 steps, width 768).
    pub fn full_size(vocab_size: usize) -> Self {
        Self {
            layers: 12,
            hidden: 768,
            heads: 12,
            max_text_len: 512,
            patch_size: 16,
            channels: 3,
            vocab_size,
            max_positions: 512,
        }
    }

    /// Small setting used for training on toy corpora.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            hidden: 32,
            heads: 4,
            max_text_len: 32,
            patch_size: 4,
            channels: 3,
            vocab_size,
            max_positions: 40,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.layers,
            self.hidden,
            self.heads,
            self.max_text_len,
            self.patch_size,
            self.channels,
            self.vocab_size,
            self.max_positions,
        ];
        if counts.contains(&0) {
            return Err(Error::InvalidConfig(format!("all encoder sizes must be >= 1: {self:?}")));
        }
        if self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_text_len > self.max_positions {
            return Err(Error::InvalidConfig(format!(
                "max_text_len {} exceeds max_positions {}",
                self.max_text_len, self.max_positions
            )));
        }
        Ok(())
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }
}

/// Switches for the cross-modal reasoning paths.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderFlags {
    pub image_to_text: bool,
    pub text_to_image: bool,
}

impl Default for EncoderFlags {
    fn default() -> Self {
        Self {
            image_to_text: true,
            text_to_image: true,
        }
    }
}

/// One post-norm transformer step whose keys and values may be longer than
/// its queries.
#[derive(Debug, Clone)]
pub struct StackStep {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_attn: LayerNorm,
    pub ffn: Mlp,
    pub norm_ffn: LayerNorm,
}

impl StackStep {
    pub fn new(b: &mut ParamBuilder, name: &str, d: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                query: Linear::new(b, "query", d, d, true)?,
                key: Linear::new(b, "key", d, d, true)?,
                value: Linear::new(b, "value", d, d, true)?,
                out: Linear::new(b, "out", d, d, true)?,
                norm_attn: LayerNorm::new(b, "norm_attn", d)?,
                ffn: Mlp::new(b, "ffn", d, 4 * d, d)?,
                norm_ffn: LayerNorm::new(b, "norm_ffn", d)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor, kv: &Tensor, heads: usize, mask: Option<&Tensor>, site: Site) -> Result<Tensor> {
        let attn = multi_head_attention(
            &self.query.forward(x)?,
            &self.key.forward(kv)?,
            &self.value.forward(kv)?,
            heads,
            mask,
            site,
        )?;
        let x = self.norm_attn.forward(&(x + self.out.forward(&attn)?)?)?;
        self.norm_ffn.forward(&(&x + self.ffn.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub flags: EncoderFlags,
    pub token_embedding: Var,
    pub text_positional: Var,
    pub text_steps: Vec<StackStep>,
    pub patch_projection: Linear,
    pub image_cls: Var,
    pub image_positional: Var,
    pub image_steps: Vec<StackStep>,
    pub w_txt: Linear,
    pub w_img: Linear,
    pub b_i2t: Var,
    pub b_i2i: Var,
}

/// Scalar counts per parameter group, used to check the parameter budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderParamCounts {
    /// Weight tables of the text stack, token embedding and positions.
    pub text_stack: usize,
    /// Weight tables of the image stack, patch projection and positions.
    pub image_stack: usize,
    /// Everything in the graph module (projections and score vectors).
    pub graph: usize,
}

impl EncoderParams {
    /// Registers a fresh encoder under the builder's current scope.
    pub fn new(b: &mut ParamBuilder, config: EncoderConfig, flags: EncoderFlags) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let (token_embedding, text_positional, text_steps) = b.scope("text", |b| {
            let emb = b.matrix("token_embedding", config.vocab_size, d)?;
            let pos = b.matrix("positional", config.max_positions, d)?;
            let steps = (0..config.layers)
                .map(|l| StackStep::new(b, &format!("step{l}"), d))
                .collect::<Result<Vec<_>>>()?;
            Ok((emb, pos, steps))
        })?;
        let (patch_projection, image_cls, image_positional, image_steps) = b.scope("image", |b| {
            let proj = Linear::new(b, "patch_projection", config.patch_dim(), d, false)?;
            let cls = b.row("cls", d)?;
            let pos = b.matrix("positional", config.max_positions, d)?;
            let steps = (0..config.layers)
                .map(|l| StackStep::new(b, &format!("step{l}"), d))
                .collect::<Result<Vec<_>>>()?;
            Ok((proj, cls, pos, steps))
        })?;
        let (w_txt, w_img, b_i2t, b_i2i) = b.scope("graph", |b| {
            Ok((
                Linear::new(b, "w_txt", d, d, false)?,
                Linear::new(b, "w_img", d, d, false)?,
                b.column("b_i2t", 2 * d)?,
                b.column("b_i2i", 2 * d)?,
            ))
        })?;
        Ok(Self {
            config,
            flags,
            token_embedding,
            text_positional,
            text_steps,
            patch_projection,
            image_cls,
            image_positional,
            image_steps,
            w_txt,
            w_img,
            b_i2t,
            b_i2i,
        })
    }

    /// Group sizes of an encoder registered under `prefix` in `store`.
    pub fn param_counts(store: &ParamStore, prefix: &str) -> EncoderParamCounts {
        let graph_prefix = format!("{prefix}graph.");
        EncoderParamCounts {
            text_stack: store.matrix_scalars(&format!("{prefix}text.")),
            image_stack: store.matrix_scalars(&format!("{prefix}image.")),
            graph: store
                .iter()
                .filter(|p| p.name.starts_with(&graph_prefix))
                .map(|p| p.var.elem_count())
                .sum(),
        }
    }

    /// `[CLS] + words`, truncated to `max_text_len`.
    pub fn tokenize(&self, vocab: &Vocabulary, text: &str) -> Result<Vec<u32>> {
        let words = vocab.encode_words(text);
        if words.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut ids = Vec::with_capacity(words.len() + 1);
        ids.push(CLS);
        ids.extend(words.into_iter().take(self.config.max_text_len - 1));
        Ok(ids)
    }

    /// Token embeddings plus positions for the text stack.
    pub fn embed_tokens(&self, ids: &[u32]) -> Result<Tensor> {
        if ids.len() > self.config.max_positions {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens exceed {} positions",
                ids.len(),
                self.config.max_positions
            )));
        }
        let idx = Tensor::from_slice(ids, ids.len(), &DEVICE)?;
        let emb = self.token_embedding.as_tensor().index_select(&idx, 0)?;
        let pos = self.text_positional.as_tensor().narrow(0, 0, ids.len())?;
        Ok((emb + pos)?)
    }

    /// `[CLS] + projected patches` plus positions for the image stack.
    pub fn embed_image(&self, image: &ImageRecord) -> Result<Tensor> {
        let patches = patchify(image, self.config.patch_size)?;
        if patches.dim(1)? != self.config.patch_dim() {
            return Err(Error::ShapeMismatch(format!(
                "image {} has 3 channels, encoder expects {}",
                image.id, self.config.channels
            )));
        }
        let n = patches.dim(0)? + 1;
        if n > self.config.max_positions {
            return Err(Error::ShapeMismatch(format!(
                "{n} image positions exceed {}",
                self.config.max_positions
            )));
        }
        let rows = Tensor::cat(
            &[self.image_cls.as_tensor().clone(), self.patch_projection.forward(&patches)?],
            0,
        )?;
        Ok((rows + self.image_positional.as_tensor().narrow(0, 0, n)?)?)
    }

    fn check_width(&self, t: &Tensor) -> Result<()> {
        let w = t.dim(1)?;
        if w != self.config.hidden {
            return Err(Error::ShapeMismatch(format!("state width {w}, expected {}", self.config.hidden)));
        }
        Ok(())
    }

    /// Projected CLS rows of every image (`n × d`), or `None` without images.
    fn projected_image_cls(&self, state: &EncoderState) -> Result<Option<Tensor>> {
        if state.z.is_empty() {
            return Ok(None);
        }
        let cls = state
            .z
            .iter()
            .map(|z| z.narrow(0, 0, 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Some(self.w_img.forward(&Tensor::cat(&cls, 0)?)?))
    }

    /// Image-to-text reasoning: returns `(ẑ_t, ĥ_t)`, with `ẑ_t = None`
    /// when the unit has no images.
    pub fn image_to_text_aggregate(&self, state: &EncoderState) -> Result<(Option<Tensor>, Tensor)> {
        let h_hat = self.w_txt.forward(&state.h.narrow(0, 0, 1)?)?;
        let z_hat = match self.projected_image_cls(state)? {
            Some(z_tilde) => Some(graph_attention(&h_hat, &z_tilde, self.b_i2t.as_tensor(), Site::ImageToText)?.0),
            None => None,
        };
        Ok((z_hat, h_hat))
    }

    /// Text-to-image reasoning for image `i`: returns `(ẑ_i, ĥ_t)` where
    /// `ẑ_i` aggregates every image of the unit, `i` included.
    pub fn text_to_image_aggregate(&self, state: &EncoderState, i: usize) -> Result<(Tensor, Tensor)> {
        let h_hat = self.w_txt.forward(&state.h.narrow(0, 0, 1)?)?;
        let z_tilde = self
            .projected_image_cls(state)?
            .ok_or_else(|| Error::ShapeMismatch("text-to-image reasoning without images".into()))?;
        if i >= z_tilde.dim(0)? {
            return Err(Error::ShapeMismatch(format!("image index {i} out of range")));
        }
        let query = z_tilde.narrow(0, i, 1)?;
        let (z_hat, _) = graph_attention(&query, &z_tilde, self.b_i2i.as_tensor(), Site::ImageToImage)?;
        Ok((z_hat, h_hat))
    }

    /// One nested step: both aggregations are computed from the state at
    /// step `l`, then each stack runs with its virtual tokens prepended to
    /// keys and values.
    pub fn encoder_step(&self, state: &EncoderState) -> Result<EncoderState> {
        let l = state.step;
        if l >= self.config.layers {
            return Err(Error::ShapeMismatch(format!("step {l} is past the last step")));
        }
        self.check_width(&state.h)?;
        for z in &state.z {
            self.check_width(z)?;
        }
        let heads = self.config.heads;
        let (z_hat_t, h_hat) = self.image_to_text_aggregate(state)?;
        let mut text_kv = Vec::with_capacity(3);
        if let (Some(z), true) = (&z_hat_t, self.flags.image_to_text) {
            text_kv.push(z.clone());
        }
        text_kv.push(h_hat.clone());
        text_kv.push(state.h.clone());
        let h = self.text_steps[l].forward(&state.h, &Tensor::cat(&text_kv, 0)?, heads, None, Site::TextStep)?;

        let z = (0..state.z.len())
            .map(|i| {
                let (z_hat_i, _) = self.text_to_image_aggregate(state, i)?;
                let mut kv = vec![z_hat_i];
                if self.flags.text_to_image {
                    kv.push(h_hat.clone());
                }
                kv.push(state.z[i].clone());
                self.image_steps[l].forward(&state.z[i], &Tensor::cat(&kv, 0)?, heads, None, Site::ImageStep)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(EncoderState { h, z, step: l + 1 })
    }

    /// Runs all steps over pre-tokenized text and raw images.
    pub fn encode_ids(&self, ids: &[u32], images: &[&ImageRecord]) -> Result<EncodedUnit> {
        if ids.is_empty() {
            return Err(Error::EmptyText);
        }
        let mut state = EncoderState {
            h: self.embed_tokens(ids)?,
            z: images.iter().map(|img| self.embed_image(img)).collect::<Result<_>>()?,
            step: 0,
        };
        while state.step < self.config.layers {
            state = self.encoder_step(&state)?;
        }
        let text_embedding = state.h.narrow(0, 0, 1)?;
        let image_embeddings = state
            .z
            .iter()
            .map(|z| z.narrow(0, 0, 1))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(EncodedUnit {
            h: state.h,
            z: state.z,
            text_embedding,
            image_embeddings,
        })
    }

    pub fn encode(&self, vocab: &Vocabulary, text: &str, images: &[&ImageRecord]) -> Result<EncodedUnit> {
        self.encode_ids(&self.tokenize(vocab, text)?, images)
    }
}

/// Text and image token matrices at step `step`.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub h: Tensor,
    pub z: Vec<Tensor>,
    pub step: usize,
}

#[derive(Debug, Clone)]
pub struct EncodedUnit {
    /// Final text token matrix (`P_txt × d`), row 0 is CLS.
    pub h: Tensor,
    /// Final patch matrices, one per image.
    pub z: Vec<Tensor>,
    /// Row 0 of `h` (`1 × d`).
    pub text_embedding: Tensor,
    /// Row 0 of each patch matrix.
    pub image_embeddings: Vec<Tensor>,
}

#[cfg(test)]
mod tests;
