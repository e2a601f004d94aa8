//! Real-time session server. A remote client supplies the human force over a
//! WebSocket; the service steps the plant, streams state and predictions,
//! records sessions as episodes, and fine-tunes models on those recordings.

pub mod protocol;
pub mod recordings;
pub mod server;
pub mod session;
pub mod store;

use std::io;
use std::path::PathBuf;

use phri_core::error::{DynamicsError, NetError, PipelineError};
use phri_core::pipeline::{EnvConfig, TrainConfig};

pub use protocol::{Body, SCHEMA_VERSION, SessionMessage};
pub use recordings::RecordingStore;
pub use server::{AppState, router, serve};
pub use session::{Session, Status};
pub use store::ModelStore;

/// Loop rates a client may request.
pub const SUPPORTED_RATES: [f64; 2] = [125.0, 60.0];

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub env: EnvConfig,
    pub train: TrainConfig,
    pub model_dir: PathBuf,
    pub recordings_dir: PathBuf,
    /// Default loop rate (steps/s) when a session does not ask for one.
    pub rate_hz: f64,
    /// Emit a prediction update every this many steps.
    pub prediction_every: usize,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum ServiceError {
    #[error("cannot bind {0}: {1}")]
    Bind(String, #[source] io::Error),
    #[error("io error on {0}: {1}")]
    Io(PathBuf, #[source] io::Error),
    #[error("unknown model `{0}`")]
    UnknownModel(String),
    #[error("unknown recording `{0}`")]
    UnknownRecording(String),
    #[error("{0}")]
    Session(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("server failed: {0}")]
    Serve(#[source] io::Error),
}

impl ServiceError {
    pub(crate) fn session(msg: impl Into<String>) -> Self {
        ServiceError::Session(msg.into())
    }
}
