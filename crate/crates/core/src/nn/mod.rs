//! Small neural building blocks on top of candle: a named parameter store,
//! seeded initialization, affine maps, layer norm and the attention
//! primitives shared by the encoder, the fusion module and the generator.
//!
//! Everything runs in `f64` on the CPU so that finite-difference gradient
//! checks are meaningful.

mod attention;
pub mod probe;

pub use attention::{causal_mask, graph_attention, multi_head_attention};

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DTYPE: DType = DType::F64;
pub const DEVICE: Device = Device::Cpu;

/// Whether a parameter is a 2-D weight table or a vector (bias, gain, score
/// vector, learned CLS token). Parameter accounting counts weight tables only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Matrix,
    Vector,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub var: Var,
    pub kind: ParamKind,
}

/// Flattened copy of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Ordered registry of trainable parameters. Cloning shares storage with the
/// modules that hold the same `Var`s.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.params.iter().map(|p| p.var.clone()).collect()
    }

    pub fn extend(&mut self, other: &ParamStore) {
        self.params.extend(other.params.iter().cloned());
    }

    fn push(&mut self, name: String, var: Var, kind: ParamKind) {
        debug_assert!(self.get(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param { name, var, kind });
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.var.elem_count()).sum()
    }

    /// Number of scalars held in weight tables whose name starts with `prefix`.
    pub fn matrix_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind == ParamKind::Matrix && p.name.starts_with(prefix))
            .map(|p| p.var.elem_count())
            .sum()
    }

    pub fn snapshot(&self) -> Result<Vec<ParamTensor>> {
        self.params
            .iter()
            .map(|p| {
                Ok(ParamTensor {
                    name: p.name.clone(),
                    shape: p.var.dims().to_vec(),
                    data: p.var.flatten_all()?.to_vec1::<f64>()?,
                })
            })
            .collect()
    }

    /// Overwrites every parameter from a snapshot. Names and shapes must match.
    pub fn restore(&self, snapshot: &[ParamTensor]) -> Result<()> {
        if snapshot.len() != self.params.len() {
            return Err(Error::ShapeMismatch(format!(
                "snapshot has {} tensors, store has {}",
                snapshot.len(),
                self.params.len()
            )));
        }
        for (p, s) in self.params.iter().zip(snapshot) {
            if p.name != s.name || p.var.dims() != s.shape.as_slice() {
                return Err(Error::ShapeMismatch(format!(
                    "parameter {} {:?} vs snapshot {} {:?}",
                    p.name,
                    p.var.dims(),
                    s.name,
                    s.shape
                )));
            }
            p.var
                .set(&Tensor::from_vec(s.data.clone(), s.shape.as_slice(), &DEVICE)?)?;
        }
        Ok(())
    }

    /// Restores parameters matched by name after stripping `from` and
    /// prepending `to`; used to initialize one model from another.
    pub fn restore_renamed(&self, snapshot: &[ParamTensor], from: &str, to: &str) -> Result<()> {
        for s in snapshot {
            let Some(rest) = s.name.strip_prefix(from) else {
                continue;
            };
            let target = format!("{to}{rest}");
            let p = self
                .get(&target)
                .ok_or_else(|| Error::ShapeMismatch(format!("no parameter named {target}")))?;
            p.var
                .set(&Tensor::from_vec(s.data.clone(), s.shape.as_slice(), &DEVICE)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values.
    pub fn fingerprint(&self) -> Result<[u8; 32]> {
        let mut hasher = Sha256::new();
        for p in self.snapshot()? {
            hasher.update(p.name.as_bytes());
            for d in &p.shape {
                hasher.update((*d as u64).to_le_bytes());
            }
            for v in &p.data {
                hasher.update(v.to_le_bytes());
            }
        }
        Ok(hasher.finalize().into())
    }
}

/// Registers freshly initialized parameters under a dotted scope.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    scope: Vec<String>,
    bound: f64,
}

impl<'a> ParamBuilder<'a> {
    /// Weights are drawn uniformly from `±1/sqrt(hidden)`.
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, hidden: usize) -> Self {
        Self {
            store,
            rng,
            scope: Vec::new(),
            bound: 1.0 / (hidden as f64).sqrt(),
        }
    }

    pub fn scope<R>(&mut self, name: impl AsRef<str>, f: impl FnOnce(&mut Self) -> Result<R>) -> Result<R> {
        self.scope.push(name.as_ref().to_string());
        let out = f(self);
        self.scope.pop();
        out
    }

    fn full_name(&self, name: &str) -> String {
        let mut s = self.scope.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    fn register(&mut self, name: &str, data: Vec<f64>, shape: (usize, usize), kind: ParamKind) -> Result<Var> {
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &DEVICE)?)?;
        let full = self.full_name(name);
        self.store.push(full, var.clone(), kind);
        Ok(var)
    }

    fn uniform_data(&mut self, n: usize) -> Vec<f64> {
        let b = self.bound;
        (0..n).map(|_| self.rng.random::<f64>() * 2.0 * b - b).collect()
    }

    /// A `rows × cols` weight table.
    pub fn matrix(&mut self, name: &str, rows: usize, cols: usize) -> Result<Var> {
        let data = self.uniform_data(rows * cols);
        self.register(name, data, (rows, cols), ParamKind::Matrix)
    }

    /// A randomly initialized vector stored as a `len × 1` column.
    pub fn column(&mut self, name: &str, len: usize) -> Result<Var> {
        let data = self.uniform_data(len);
        self.register(name, data, (len, 1), ParamKind::Vector)
    }

    /// A randomly initialized vector stored as a `1 × len` row.
    pub fn row(&mut self, name: &str, len: usize) -> Result<Var> {
        let data = self.uniform_data(len);
        self.register(name, data, (1, len), ParamKind::Vector)
    }

    pub fn constant_row(&mut self, name: &str, len: usize, value: f64) -> Result<Var> {
        self.register(name, vec![value; len], (1, len), ParamKind::Vector)
    }
}

/// `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Var,
    pub bias: Option<Var>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder, name: &str, input: usize, output: usize, bias: bool) -> Result<Self> {
        b.scope(name, |b| {
            let weight = b.matrix("weight", input, output)?;
            let bias = if bias {
                Some(b.constant_row("bias", output, 0.0)?)
            } else {
                None
            };
            Ok(Self { weight, bias })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(self.weight.as_tensor())?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(b.as_tensor())?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: Var,
    beta: Var,
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder, name: &str, width: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                gamma: b.constant_row("gamma", width, 1.0)?,
                beta: b.constant_row("beta", width, 0.0)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(1)?;
        let normed = centered.broadcast_div(&(var + LAYER_NORM_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(self.gamma.as_tensor())?
            .broadcast_add(self.beta.as_tensor())?)
    }
}

/// Two-layer perceptron `in → hidden → out` with a GELU in between.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub hidden: Linear,
    pub output: Linear,
}

impl Mlp {
    pub fn new(b: &mut ParamBuilder, name: &str, input: usize, hidden: usize, output: usize) -> Result<Self> {
        b.scope(name, |b| {
            Ok(Self {
                hidden: Linear::new(b, "hidden", input, hidden, true)?,
                output: Linear::new(b, "output", hidden, output, true)?,
            })
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.output.forward(&self.hidden.forward(x)?.gelu()?)
    }
}

/// Builds a constant `rows × cols` tensor from row-major data.
pub fn matrix(data: Vec<f64>, rows: usize, cols: usize) -> Result<Tensor> {
    Ok(Tensor::from_vec(data, (rows, cols), &DEVICE)?)
}

pub fn row_vector(data: &[f64]) -> Result<Tensor> {
    Ok(Tensor::from_slice(data, (1, data.len()), &DEVICE)?)
}

pub fn zeros(rows: usize, cols: usize) -> Result<Tensor> {
    Ok(Tensor::zeros((rows, cols), DTYPE, &DEVICE)?)
}

pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_vec2::<f64>()?)
}

/// Flattens a `1 × d` (or any) tensor into a vector.
pub fn to_flat(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.flatten_all()?.to_vec1::<f64>()?[0])
}

/// Mean of matrices with possibly different row counts. Row `r` of the result
/// averages only the inputs that have a row `r`.
pub fn masked_mean(mats: &[Tensor]) -> Result<Tensor> {
    let first = mats.first().ok_or(Error::NoEvidence)?;
    if mats.len() == 1 {
        return Ok(first.clone());
    }
    let width = first.dim(1)?;
    let rows = mats.iter().map(|m| m.dim(0)).collect::<candle_core::Result<Vec<_>>>()?;
    let max_rows = *rows.iter().max().expect("nonempty");
    let mut sum: Option<Tensor> = None;
    for m in mats {
        if m.dim(1)? != width {
            return Err(Error::ShapeMismatch(format!(
                "width {} vs {}",
                m.dim(1)?,
                width
            )));
        }
        let r = m.dim(0)?;
        let padded = if r < max_rows {
            Tensor::cat(&[m.clone(), zeros(max_rows - r, width)?], 0)?
        } else {
            m.clone()
        };
        sum = Some(match sum {
            Some(s) => (s + padded)?,
            None => padded,
        });
    }
    let counts: Vec<f64> = (0..max_rows)
        .map(|i| rows.iter().filter(|&&r| r > i).count() as f64)
        .collect();
    let counts = matrix(counts, max_rows, 1)?;
    Ok(sum.expect("nonempty").broadcast_div(&counts)?)
}

/// `max(log_softmax(logits), ln floor)` along the last dimension: the log of
/// a probability vector floored at `floor`.
pub fn floored_log_softmax(logits: &Tensor, floor: f64) -> Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, candle_core::D::Minus1)?;
    Ok(logp.maximum(floor.ln())?)
}

pub fn softmax_rows(logits: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(logits, candle_core::D::Minus1)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn masked_mean_ignores_padding() {
        let a = matrix(vec![1.0, 1.0, 3.0, 3.0], 2, 2).unwrap();
        let b = matrix(vec![3.0, 5.0], 1, 2).unwrap();
        let m = to_rows(&masked_mean(&[a, b]).unwrap()).unwrap();
        assert_eq!(m, vec![vec![2.0, 3.0], vec![3.0, 3.0]]);
    }

    #[test]
    fn store_snapshot_restores_values() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, 4);
            Linear::new(&mut b, "lin", 4, 3, true).unwrap()
        };
        let snap = store.snapshot().unwrap();
        let fp = store.fingerprint().unwrap();
        lin.weight.set(&zeros(4, 3).unwrap()).unwrap();
        assert_ne!(store.fingerprint().unwrap(), fp);
        store.restore(&snap).unwrap();
        assert_eq!(store.fingerprint().unwrap(), fp);
        assert_eq!(store.matrix_scalars("lin"), 12);
        assert_eq!(store.scalar_count(), 15);
    }

    #[test]
    fn layer_norm_centers_rows() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ln = {
            let mut b = ParamBuilder::new(&mut store, &mut rng, 4);
            LayerNorm::new(&mut b, "ln", 4).unwrap()
        };
        let x = matrix(vec![1.0, 2.0, 3.0, 4.0], 1, 4).unwrap();
        let y = to_flat(&ln.forward(&x).unwrap()).unwrap();
        let mean: f64 = y.iter().sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
    }
}
