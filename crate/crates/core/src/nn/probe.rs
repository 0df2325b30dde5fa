//! Opt-in capture of attention weights for invariant checks.
//!
//! Capture is thread-local and disabled unless a caller wraps a forward pass
//! in [`capture`]; recording copies weights out of the graph, so it stays off
//! during training.

use std::cell::RefCell;

use candle_core::Tensor;

/// Where an attention distribution was computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Site {
    /// Image-to-text aggregation inside the graph encoder.
    ImageToText,
    /// Intra-image aggregation inside the graph encoder.
    ImageToImage,
    TextStep,
    ImageStep,
    /// Token-level fusion of patches into tokens.
    TokenFusion,
    /// Claim-evidence interaction.
    ClaimEvidence,
    /// Image aggregation with the evidence text as query.
    EvidenceImages,
    /// Evidence aggregation with the claim as query.
    EvidenceFusion,
    LmEncoder,
    LmDecoderSelf,
    LmDecoderCross,
}

impl Site {
    /// Sites computed by sigmoid-scored graph attention (scores in (0,1)).
    pub fn is_graph(self) -> bool {
        matches!(
            self,
            Site::ImageToText | Site::ImageToImage | Site::EvidenceImages | Site::EvidenceFusion
        )
    }
}

#[derive(Debug, Clone)]
pub struct Record {
    pub site: Site,
    /// One probability vector per query row (and per head).
    pub weights: Vec<Vec<f64>>,
    /// Pre-softmax sigmoid scores for graph attention sites.
    pub scores: Option<Vec<f64>>,
}

thread_local! {
    static CAPTURE: RefCell<Option<Vec<Record>>> = const { RefCell::new(None) };
}

pub(crate) fn enabled() -> bool {
    CAPTURE.with(|c| c.borrow().is_some())
}

/// Records a `(..., n, m)` weight tensor as rows of length `m`.
pub(crate) fn record(site: Site, weights: &Tensor, scores: Option<&Tensor>) {
    if !enabled() {
        return;
    }
    let m = weights.dims().last().copied().unwrap_or(0);
    let flat = weights
        .flatten_all()
        .and_then(|t| t.to_vec1::<f64>())
        .unwrap_or_default();
    let rows = if m == 0 {
        Vec::new()
    } else {
        flat.chunks(m).map(<[f64]>::to_vec).collect()
    };
    let scores = scores.and_then(|s| s.flatten_all().and_then(|t| t.to_vec1::<f64>()).ok());
    CAPTURE.with(|c| {
        if let Some(buf) = c.borrow_mut().as_mut() {
            buf.push(Record {
                site,
                weights: rows,
                scores,
            });
        }
    });
}

/// Runs `f` and returns its output together with every attention
/// distribution computed on this thread meanwhile.
pub fn capture<R>(f: impl FnOnce() -> R) -> (R, Vec<Record>) {
    let previous = CAPTURE.with(|c| c.borrow_mut().replace(Vec::new()));
    let out = f();
    let records = CAPTURE.with(|c| {
        let mut slot = c.borrow_mut();
        let taken = slot.take().unwrap_or_default();
        *slot = previous;
        taken
    });
    (out, records)
}
