//! Adam optimizer with per-block freeze masking.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::model::{Gradients, PredictorModel};
use crate::error::NetError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub m: Vec<DMatrix<f64>>,
    pub v: Vec<DMatrix<f64>>,
    pub step: u64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainState {
    pub fn new(model: &PredictorModel, adam: AdamConfig, seed: u64) -> Self {
        let zeros = Gradients::zeros_like(model).0;
        TrainState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            adam,
            seed,
        }
    }
}

/// One bias-corrected Adam update. Frozen blocks keep their values and moments.
pub fn optimizer_step(model: &mut PredictorModel, grads: &Gradients, state: &mut TrainState) -> Result<(), NetError> {
    if grads.0.len() != model.blocks.len() || state.m.len() != model.blocks.len() {
        return Err(NetError::Shape {
            what: "gradient block count".into(),
            expected: model.blocks.len(),
            got: grads.0.len(),
        });
    }
    state.step += 1;
    let AdamConfig { lr, beta1, beta2, eps } = state.adam;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for (i, block) in model.blocks.iter_mut().enumerate() {
        if block.frozen {
            continue;
        }
        let g = &grads.0[i];
        if g.shape() != block.value.shape() {
            return Err(NetError::Shape {
                what: format!("{} gradient elements", block.name),
                expected: block.value.len(),
                got: g.len(),
            });
        }
        let m = &mut state.m[i];
        let v = &mut state.v[i];
        for ((w, &gj), (mj, vj)) in block.value.iter_mut().zip(g.iter()).zip(m.iter_mut().zip(v.iter_mut())) {
            *mj = beta1 * *mj + (1.0 - beta1) * gj;
            *vj = beta2 * *vj + (1.0 - beta2) * gj * gj;
            let m_hat = *mj / c1;
            let v_hat = *vj / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}
