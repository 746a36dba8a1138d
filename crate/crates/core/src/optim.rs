//! AdamW with global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ParamStore;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub grad_clip: Option<f64>,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            grad_clip: Some(1.0),
        }
    }
}

/// First/second moments per parameter of each store, plus the step count.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    moments: Vec<Vec<(Vec<f32>, Vec<f32>)>>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    /// Factor applied to every gradient (1 when unclipped).
    pub clip_scale: f64,
}

impl AdamW {
    /// Applies one update to every parameter holding a gradient in `stores`.
    /// Parameters without a gradient (frozen or unused) are left untouched.
    pub fn step(&self, state: &mut OptimizerState, stores: &mut [&mut ParamStore], lr: f64) -> Result<StepStats> {
        let mut sq = 0.0f64;
        for store in stores.iter() {
            for (name, t) in store.iter() {
                let Some(g) = &t.grad else { continue };
                for &x in g {
                    if !x.is_finite() {
                        return Err(Error::Training {
                            param: name.to_string(),
                            reason: format!("non-finite gradient {x}"),
                        });
                    }
                    sq += (x as f64) * (x as f64);
                }
            }
        }
        let grad_norm = sq.sqrt();
        let clip_scale = match self.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };

        if state.moments.len() < stores.len() {
            state.moments.resize_with(stores.len(), Vec::new);
        }
        state.step += 1;
        let n = state.step as i32;
        let bc1 = 1.0 - self.beta1.powi(n);
        let bc2 = 1.0 - self.beta2.powi(n);
        for (store, moments) in stores.iter_mut().zip(state.moments.iter_mut()) {
            if moments.len() < store.len() {
                moments.extend(
                    store
                        .iter()
                        .skip(moments.len())
                        .map(|(_, t)| (vec![0.0; t.numel()], vec![0.0; t.numel()])),
                );
            }
            for ((_, t), (m, v)) in store.iter_mut().zip(moments.iter_mut()) {
                let Some(g) = t.grad.take() else { continue };
                let decay = 1.0 - lr * self.weight_decay;
                for (i, p) in t.data_mut().iter_mut().enumerate() {
                    let gi = g[i] as f64 * clip_scale;
                    let mi = self.beta1 * m[i] as f64 + (1.0 - self.beta1) * gi;
                    let vi = self.beta2 * v[i] as f64 + (1.0 - self.beta2) * gi * gi;
                    m[i] = mi as f32;
                    v[i] = vi as f32;
                    let update = (mi / bc1) / ((vi / bc2).sqrt() + self.eps);
                    *p = (*p as f64 * decay - lr * update) as f32;
                }
            }
        }
        Ok(StepStats { grad_norm, clip_scale })
    }
}
