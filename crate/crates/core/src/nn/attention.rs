use candle_core::{Tensor, D};

use super::probe::{self, Site};
use super::{matrix, softmax_rows};
use crate::error::{Error, Result};

/// Scaled dot-product attention over already projected inputs.
///
/// `q` is `n × d`, `k` and `v` are `m × d`; the output is `n × d` with the
/// heads concatenated. `mask` (if any) is `n × m` and added to the scores.
pub fn multi_head_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    n_heads: usize,
    mask: Option<&Tensor>,
    site: Site,
) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    if dk != d || v.dims2()? != (m, d) {
        return Err(Error::ShapeMismatch(format!(
            "attention q {:?} k {:?} v {:?}",
            q.dims(),
            k.dims(),
            v.dims()
        )));
    }
    if n_heads == 0 || d % n_heads != 0 {
        return Err(Error::InvalidConfig(format!(
            "width {d} is not divisible by {n_heads} heads"
        )));
    }
    let dh = d / n_heads;
    let split = |t: &Tensor, len: usize| -> candle_core::Result<Tensor> {
        t.reshape((len, n_heads, dh))?.transpose(0, 1)?.contiguous()
    };
    let qh = split(q, n)?;
    let kh = split(k, m)?;
    let vh = split(v, m)?;
    let mut scores = (qh.matmul(&kh.transpose(1, 2)?.contiguous()?)? / (dh as f64).sqrt())?;
    if let Some(mask) = mask {
        scores = scores.broadcast_add(mask)?;
    }
    let weights = softmax_rows(&scores)?;
    probe::record(site, &weights, None);
    let out = weights.matmul(&vh)?;
    Ok(out.transpose(0, 1)?.contiguous()?.reshape((n, d))?)
}

/// Additive `n × n` mask that blocks attention to later positions.
pub fn causal_mask(n: usize) -> Result<Tensor> {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            data[i * n + j] = -1e30;
        }
    }
    matrix(data, n, n)
}

/// Sigmoid-scored neighbour aggregation used by every graph module:
/// `a = softmax_j(sigmoid(b^T [q || x_j]))`, output `sum_j a_j x_j`.
///
/// `query` is `1 × d`, `neighbors` is `n × d` (both already projected) and
/// `score` is the `2d × 1` attention vector. Returns the aggregate (`1 × d`)
/// and the weights (`1 × n`).
pub fn graph_attention(
    query: &Tensor,
    neighbors: &Tensor,
    score: &Tensor,
    site: Site,
) -> Result<(Tensor, Tensor)> {
    let d = query.dim(1)?;
    let (n, dn) = neighbors.dims2()?;
    if dn != d || score.dims2()? != (2 * d, 1) {
        return Err(Error::ShapeMismatch(format!(
            "graph attention query {:?} neighbors {:?} score {:?}",
            query.dims(),
            neighbors.dims(),
            score.dims()
        )));
    }
    if n == 0 {
        return Err(Error::ShapeMismatch("graph attention without neighbours".into()));
    }
    let from_query = query.matmul(&score.narrow(0, 0, d)?)?;
    let from_neighbor = neighbors.matmul(&score.narrow(0, d, d)?)?;
    let scores = candle_nn::ops::sigmoid(&from_neighbor.broadcast_add(&from_query)?)?.t()?;
    let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
    probe::record(site, &weights, Some(&scores));
    let agg = weights.matmul(neighbors)?;
    Ok((agg, weights))
}
