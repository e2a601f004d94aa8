//! Datasets, training, the collect–train loop, transfer learning, and evaluation.

pub mod compare;
pub mod dataset;
pub mod env;
pub mod iterate;
pub mod metrics;
pub mod report;
pub mod train;
pub mod transfer;

pub use compare::{CompareReport, ControllerStats, PairTest, compare_controllers};
pub use dataset::{
    Dataset, Manifest, Provenance, TargetSource, WindowRef, WindowSet, fit_normalization, make_windows,
    make_windows_with, window_count,
};
pub use env::{EnvConfig, collect, derive_seed, run_game};
pub use iterate::{IterateResult, IterationRecord, evaluate_model, holdout_jobs, iterate};
pub use metrics::{PredictionWindow, WelchResult, e_max, e_rms, f_rms, welch_t_test, window_rms};
pub use report::{CSV_HEADER, EvalReport, HorizonStats, reports_csv};
pub use train::{TrainConfig, TrainOutcome, train_model, transfer_learn};
pub use transfer::{TransferContext, TransferReport, TransferSettings, context_env, fine_tune, run_transfer};
