//! Recurrent intent predictor: model, training primitives, persistence.

pub mod adam;
pub mod io;
pub mod lstm;
pub mod model;

pub use adam::{AdamConfig, TrainState, optimizer_step};
pub use io::{load_model, save_model};
pub use lstm::{Batch, forward, forward_many, loss_and_gradients};
pub use model::{FreezePolicy, Gradients, Normalization, ParamBlock, PredictorConfig, PredictorModel, init_model};
