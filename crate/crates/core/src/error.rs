use std::path::PathBuf;

use thiserror::Error;

/// Failures raised while building or stepping the simulated plant.
#[derive(Debug, Error)]
pub enum DynamicsError {
    #[error("invalid plant parameters: {0}")]
    InvalidPlant(String),
    #[error("invalid trajectory: {0}")]
    InvalidTrajectory(String),
    #[error("time {0} is outside the trajectory domain")]
    NegativeTime(f64),
    #[error("invalid human model: {0}")]
    InvalidHuman(String),
    #[error("invalid obstacle: {0}")]
    InvalidObstacle(String),
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    Dimension {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("unknown trajectory kind `{0}`")]
    UnknownTrajectory(String),
    #[error("unknown controller `{0}`")]
    UnknownController(String),
    #[error("episode runs under {episode:?} but the step was requested under {step:?}")]
    ControllerSwitch {
        episode: crate::dynamics::ControllerKind,
        step: crate::dynamics::ControllerKind,
    },
    #[error("state diverged at step {step}: |state| = {value:e} exceeds the bound")]
    BlowUp { step: usize, value: f64 },
    #[error("controller: {0}")]
    Control(#[from] ControlError),
    #[error("predictor: {0}")]
    Predictor(#[from] NetError),
}

/// Failures from the game-theoretic controller construction.
#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid game weights: {0}")]
    InvalidWeights(String),
    #[error("blended state weight Q_c is singular; zero-weighted coordinates: {0:?}")]
    SingularStateWeight(Vec<usize>),
    #[error("Riccati iteration did not converge after {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("system pair is not stabilizable")]
    Unstabilizable,
    #[error("Lyapunov system is singular")]
    SingularLyapunov,
    #[error("input weight R_c is not positive definite")]
    InputWeightNotPd,
    #[error("pick index {pick} outside 1..={horizon}")]
    PickIndex { pick: usize, horizon: usize },
}

/// Failures from the recurrent predictor.
#[derive(Debug, Error)]
pub enum NetError {
    #[error("invalid predictor config: {0}")]
    InvalidConfig(String),
    #[error("shape mismatch in {what}: expected {expected}, got {got}")]
    Shape { what: String, expected: usize, got: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss for batch sample {0}")]
    NonFiniteLoss(usize),
    #[error("model file parse error at line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("model file is truncated: missing section `{0}`")]
    MissingSection(String),
    #[error("unsupported model schema version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Failures from dataset construction, training, and evaluation.
#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Control(#[from] ControlError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error("episode aborted: {0}")]
    Aborted(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("non-finite training loss at epoch {epoch} (trace {trace:?})")]
    NonFiniteTraining { epoch: usize, trace: Vec<f64> },
    #[error("prediction for step {0} is missing")]
    MissingPrediction(usize),
    #[error("horizon {n} exceeds prediction length {available}")]
    Horizon { n: usize, available: usize },
    #[error("degenerate variance in t-test samples")]
    DegenerateVariance,
    #[error("t-test needs at least two values per sample")]
    SampleTooSmall,
    #[error("not enough data: {0}")]
    Insufficient(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl PipelineError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PipelineError::Io {
            path: path.into(),
            source,
        }
    }
}
