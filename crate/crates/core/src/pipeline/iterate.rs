//! The collect–train loop: record with the current model, retrain, evaluate.

use std::time::Instant;

use super::dataset::WindowSet;
use super::env::{EnvConfig, derive_seed, run_game};
use super::report::EvalReport;
use super::train::{TrainConfig, train_model};
use crate::dynamics::{EpisodeJob, IntentPredictor, SimOutcome};
use crate::error::PipelineError;
use crate::game::GameController;
use crate::net::{PredictorConfig, PredictorModel};

const HOLDOUT_STREAM: u64 = 1;
const COLLECT_STREAM: u64 = 100;
const TRAIN_STREAM: u64 = 200;

#[derive(Debug, Clone)]
pub struct IterationRecord {
    pub index: usize,
    pub model: PredictorModel,
    pub report: EvalReport,
    pub loss_trace: Vec<f64>,
    /// Collection, training, and evaluation wall time.
    pub seconds: f64,
    pub training_episodes: Vec<SimOutcome>,
}

#[derive(Debug, Clone)]
pub struct IterateResult {
    pub iterations: Vec<IterationRecord>,
    /// Stopped because the e_RMS change fell below the tolerance.
    pub converged: bool,
    /// Set when a later iteration failed; earlier models are kept.
    pub aborted: Option<String>,
}

impl IterateResult {
    pub fn models(&self) -> impl Iterator<Item = &PredictorModel> {
        self.iterations.iter().map(|i| &i.model)
    }

    pub fn reports(&self) -> impl Iterator<Item = &EvalReport> {
        self.iterations.iter().map(|i| &i.report)
    }
}

/// Frozen held-out jobs shared by every iteration of a run.
pub fn holdout_jobs(env: &EnvConfig, seed: u64) -> Result<Vec<EpisodeJob>, PipelineError> {
    env.plan(&env.human, env.holdout_count(), seed, HOLDOUT_STREAM)
}

/// Closed-loop evaluation: runs `jobs` with `model` in the loop.
pub fn evaluate_model(
    env: &EnvConfig,
    ctrl: &GameController,
    model: &PredictorModel,
    jobs: &[EpisodeJob],
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    evaluate_on_plant(env, &env.plant, ctrl, model, jobs, seed)
}

pub fn evaluate_on_plant(
    env: &EnvConfig,
    plant: &crate::dynamics::PlantParams,
    ctrl: &GameController,
    model: &PredictorModel,
    jobs: &[EpisodeJob],
    seed: u64,
) -> Result<EvalReport, PipelineError> {
    check_horizons(env, &model.config)?;
    let outcomes = run_game(env, plant, ctrl, Some(model as &dyn IntentPredictor), jobs)?;
    EvalReport::from_outcomes(
        &model.version_tag,
        seed,
        &outcomes,
        model.config.window_k,
        model.config.horizon_n,
        &env.horizons,
    )
}

fn check_horizons(env: &EnvConfig, cfg: &PredictorConfig) -> Result<(), PipelineError> {
    if let Some(h) = env.horizons.iter().find(|h| **h > cfg.horizon_n) {
        return Err(PipelineError::Horizon {
            n: *h,
            available: cfg.horizon_n,
        });
    }
    if env.pick_index > cfg.horizon_n {
        return Err(PipelineError::Config(format!(
            "pick_index {} exceeds the prediction horizon {}",
            env.pick_index, cfg.horizon_n
        )));
    }
    Ok(())
}

/// Runs the loop. Iteration 0 records with the nominal path standing in for
/// the human reference and trains a fresh model; iteration `k` records with
/// `M_{k−1}` in the loop and fine-tunes it. Stops once the change of e_RMS at
/// the longest horizon drops below `tol`, or after `max_iters` retrainings.
pub fn iterate(
    env: &EnvConfig,
    predictor: &PredictorConfig,
    train: &TrainConfig,
    tol: f64,
    max_iters: usize,
    seed: u64,
    mut on_iteration: impl FnMut(&IterationRecord),
) -> Result<IterateResult, PipelineError> {
    env.validate()?;
    predictor.validate()?;
    train.validate()?;
    check_horizons(env, predictor)?;
    if max_iters == 0 {
        return Err(PipelineError::Config("max_iters must be at least 1".into()));
    }
    if !(tol >= 0.0) {
        return Err(PipelineError::Config("tol must be non-negative".into()));
    }
    let ctrl = env.controller()?;
    let holdout = holdout_jobs(env, seed)?;
    let mut iterations: Vec<IterationRecord> = Vec::new();
    let mut converged = false;
    let mut aborted = None;
    for k in 0..=max_iters {
        let started = Instant::now();
        let step = (|| -> Result<IterationRecord, PipelineError> {
            let jobs = env.plan(&env.human, env.episodes_per_iteration, seed, COLLECT_STREAM + k as u64)?;
            let prev = iterations.last().map(|r| &r.model);
            let outcomes = run_game(env, &env.plant, &ctrl, prev.map(|m| m as &dyn IntentPredictor), &jobs)?;
            let episodes: Vec<_> = outcomes.iter().map(|o| o.episode.clone()).collect();
            let windows = WindowSet::new(
                &episodes,
                predictor.window_k,
                predictor.horizon_n,
                train.stride,
                train.target,
            );
            let mut trained = train_model(
                &windows,
                predictor,
                prev,
                train,
                derive_seed(seed, &[TRAIN_STREAM + k as u64]),
            )?;
            trained.model.version_tag = format!("M{k}");
            let report = evaluate_model(env, &ctrl, &trained.model, &holdout, seed)?;
            Ok(IterationRecord {
                index: k,
                model: trained.model,
                report,
                loss_trace: trained.loss_trace,
                seconds: 0.0,
                training_episodes: outcomes,
            })
        })();
        let mut record = match step {
            Ok(r) => r,
            Err(e) if !iterations.is_empty() => {
                aborted = Some(format!("iteration {k}: {e}"));
                break;
            }
            Err(e) => return Err(e),
        };
        record.seconds = started.elapsed().as_secs_f64();
        on_iteration(&record);
        let change = iterations
            .last()
            .map(|prev| (record.report.longest().e_rms - prev.report.longest().e_rms).abs());
        iterations.push(record);
        if change.is_some_and(|c| c < tol) {
            converged = true;
            break;
        }
    }
    Ok(IterateResult {
        iterations,
        converged,
        aborted,
    })
}
