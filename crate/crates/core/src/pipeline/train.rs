//! Mini-batch training and head-only transfer learning.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::dataset::{TargetSource, WindowRef, WindowSet};
use crate::error::{NetError, PipelineError};
use crate::net::lstm::{batch_loss_and_gradients, final_hidden, head_loss_and_gradients};
use crate::net::{AdamConfig, FreezePolicy, PredictorConfig, PredictorModel, TrainState, optimizer_step};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Keep every `stride`-th window of each episode.
    pub stride: usize,
    #[serde(default)]
    pub target: TargetSource,
    /// Epochs of head-only fine-tuning in transfer learning.
    pub tl_epochs: usize,
    /// Ratio of the last epoch's learning rate to the first; the rate decays
    /// geometrically in between.
    #[serde(default = "no_decay")]
    pub lr_decay: f64,
}

fn no_decay() -> f64 {
    1.0
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 64,
            adam: AdamConfig::default(),
            stride: 1,
            target: TargetSource::Measured,
            tl_epochs: 25,
            lr_decay: 1.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.batch_size == 0 || self.stride == 0 {
            return Err(PipelineError::Config("batch_size and stride must be at least 1".into()));
        }
        let a = &self.adam;
        if !(a.lr > 0.0 && (0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(PipelineError::Config("invalid optimizer settings".into()));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(PipelineError::Config("lr_decay must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Learning rate of `epoch` out of `epochs`.
    pub fn epoch_lr(&self, epoch: usize, epochs: usize) -> f64 {
        if epochs < 2 {
            return self.adam.lr;
        }
        self.adam.lr * self.lr_decay.powf(epoch as f64 / (epochs - 1) as f64)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PredictorModel,
    /// Mean mini-batch loss per epoch.
    pub loss_trace: Vec<f64>,
}

fn shuffled(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(rng);
    order
}

fn nonfinite(epoch: usize, trace: &[f64], err: NetError) -> PipelineError {
    match err {
        NetError::NonFiniteLoss(_) => PipelineError::NonFiniteTraining {
            epoch,
            trace: trace.to_vec(),
        },
        other => other.into(),
    }
}

/// Trains from `base` (or a fresh initialization) on the windows. A fresh
/// model gets statistics fitted on these windows; a base model keeps its own.
pub fn train_model(
    windows: &WindowSet,
    config: &PredictorConfig,
    base: Option<&PredictorModel>,
    train: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome, PipelineError> {
    train.validate()?;
    if windows.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if windows.k != config.window_k || windows.n != config.horizon_n {
        return Err(PipelineError::Config(format!(
            "windows are {}→{} but the predictor expects {}→{}",
            windows.k, windows.n, config.window_k, config.horizon_n
        )));
    }
    let mut model = match base {
        Some(b) => {
            if &b.config != config {
                return Err(PipelineError::Config(
                    "base model shape differs from the predictor config".into(),
                ));
            }
            b.clone()
        }
        None => {
            let mut m = PredictorModel::init(config, seed)?;
            m.norm = windows.fit_normalization()?;
            m
        }
    };
    model.norm.validate(config)?;
    let mut state = TrainState::new(&model, train.adam, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x005e_ed0f_7a41);
    let mut trace = Vec::with_capacity(train.epochs);
    for epoch in 0..train.epochs {
        state.adam.lr = train.epoch_lr(epoch, train.epochs);
        let order = shuffled(windows.len(), &mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let refs: Vec<WindowRef> = chunk.iter().map(|&i| windows.windows[i]).collect();
            let batch = windows.batch(&model, &refs);
            let (loss, grads) = batch_loss_and_gradients(&model, &batch).map_err(|e| nonfinite(epoch, &trace, e))?;
            optimizer_step(&mut model, &grads, &mut state)?;
            total += loss;
            batches += 1;
        }
        trace.push(total / batches as f64);
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}

/// Head-only fine-tuning: recurrent blocks are frozen and stay bit-identical.
/// Their output is computed once per window and reused across epochs.
pub fn transfer_learn(
    base: &PredictorModel,
    windows: &WindowSet,
    train: &TrainConfig,
    epochs: usize,
    seed: u64,
) -> Result<TrainOutcome, PipelineError> {
    train.validate()?;
    if windows.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let mut model = base.clone();
    model.set_freeze(FreezePolicy::FreezeRecurrent);
    let h = model.config.hidden_size;
    let out = model.config.output_size;
    let mut features = DMatrix::<f64>::zeros(h, windows.len());
    let mut targets = DMatrix::<f64>::zeros(out, windows.len());
    for (c, chunk) in windows.windows.chunks(256).enumerate() {
        let batch = windows.batch(&model, chunk);
        let hidden = final_hidden(&model, &batch.steps);
        let start = c * 256;
        features.columns_mut(start, chunk.len()).copy_from(&hidden);
        targets
            .columns_mut(start, chunk.len())
            .copy_from(batch.targets.as_ref().expect("training batch has targets"));
    }
    let mut state = TrainState::new(&model, train.adam, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7f_a115_fe12);
    let mut trace = Vec::with_capacity(epochs);
    for epoch in 0..epochs {
        state.adam.lr = train.epoch_lr(epoch, epochs);
        let order = shuffled(windows.len(), &mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train.batch_size) {
            let f = features.select_columns(chunk);
            let t = targets.select_columns(chunk);
            let (loss, grads) = head_loss_and_gradients(&model, f, &t).map_err(|e| nonfinite(epoch, &trace, e))?;
            optimizer_step(&mut model, &grads, &mut state)?;
            total += loss;
            batches += 1;
        }
        trace.push(total / batches as f64);
    }
    Ok(TrainOutcome {
        model,
        loss_trace: trace,
    })
}
