use candle_core::backprop::GradStore;
use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::nn::{ParamStore, DEVICE};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// Moment estimates, one flat vector per parameter in store order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub state: AdamState,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.var.elem_count()]).collect();
        Self {
            lr,
            state: AdamState {
                t: 0,
                m: zeros.clone(),
                v: zeros,
            },
        }
    }

    /// One update. Parameters without a gradient are left untouched.
    pub fn step(&mut self, store: &ParamStore, grads: &GradStore) -> Result<()> {
        self.state.t += 1;
        let t = self.state.t as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (i, p) in store.iter().enumerate() {
            let Some(g) = grads.get(p.var.as_tensor()) else {
                continue;
            };
            let g = g.flatten_all()?.to_vec1::<f64>()?;
            let mut w = p.var.flatten_all()?.to_vec1::<f64>()?;
            let (m, v) = (&mut self.state.m[i], &mut self.state.v[i]);
            for j in 0..w.len() {
                m[j] = BETA1 * m[j] + (1.0 - BETA1) * g[j];
                v[j] = BETA2 * v[j] + (1.0 - BETA2) * g[j] * g[j];
                w[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + EPSILON);
            }
            p.var.set(&Tensor::from_vec(w, p.var.dims(), &DEVICE)?)?;
        }
        Ok(())
    }
}
