//! Adapting a trained predictor to a new trajectory, user, or carried object.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::dataset::WindowSet;
use super::env::{EnvConfig, derive_seed, run_game};
use super::iterate::evaluate_on_plant;
use super::report::EvalReport;
use super::train::{TrainConfig, transfer_learn};
use crate::dynamics::{Episode, IntentPredictor, TrajectoryKind};
use crate::error::PipelineError;
use crate::net::PredictorModel;

const TL_COLLECT_STREAM: u64 = 300;
const TL_HOLDOUT_STREAM: u64 = 301;
const TL_TRAIN_STREAM: u64 = 302;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferContext {
    /// Unseen evaluation trajectory.
    NewTrajectory,
    /// Human with scaled limb gains.
    NewUser,
    /// Heavy object carried jointly: extra plant mass and a stiffer grip.
    Object,
}

impl TransferContext {
    pub const ALL: [TransferContext; 3] = [
        TransferContext::NewTrajectory,
        TransferContext::NewUser,
        TransferContext::Object,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TransferContext::NewTrajectory => "new_trajectory",
            TransferContext::NewUser => "new_user",
            TransferContext::Object => "object",
        }
    }
}

impl fmt::Display for TransferContext {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransferContext {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TransferContext::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| PipelineError::Config(format!("unknown transfer context `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferSettings {
    /// Multiplier on the human stiffness and damping for a new user.
    pub user_gain_scale: f64,
    /// Extra mass per axis (kg) for the object case.
    pub object_mass: f64,
    /// Multiplier on the human damping for the object case.
    pub object_damping_scale: f64,
    /// Episodes recorded for fine-tuning.
    pub episodes: usize,
    /// Held-out episodes for the pre/post comparison.
    pub eval_episodes: usize,
}

impl Default for TransferSettings {
    fn default() -> Self {
        TransferSettings {
            user_gain_scale: 1.5,
            object_mass: 5.0,
            object_damping_scale: 2.0,
            episodes: 3,
            eval_episodes: 3,
        }
    }
}

/// The environment of a transfer context.
pub fn context_env(env: &EnvConfig, ctx: TransferContext, s: &TransferSettings) -> EnvConfig {
    let mut out = env.clone();
    match ctx {
        TransferContext::NewTrajectory => out.trajectories = vec![TrajectoryKind::Eval],
        TransferContext::NewUser => {
            out.human = env.human.scaled(s.user_gain_scale, "new-user");
        }
        TransferContext::Object => {
            out.plant = env.plant.with_added_mass(s.object_mass);
            out.human.damping.iter_mut().for_each(|c| *c *= s.object_damping_scale);
            out.human.id = format!("{}+object", env.human.id);
        }
    }
    out
}

#[derive(Debug, Clone)]
pub struct TransferReport {
    pub context: TransferContext,
    pub pre: EvalReport,
    pub post: EvalReport,
    pub model: PredictorModel,
    pub loss_trace: Vec<f64>,
    /// Recording plus fine-tuning wall time.
    pub seconds: f64,
    pub trainable_parameters: usize,
    pub total_parameters: usize,
    pub recorded: Vec<Episode>,
}

impl TransferReport {
    /// Relative e_RMS reduction at the longest horizon.
    pub fn improvement(&self) -> f64 {
        let pre = self.pre.longest().e_rms;
        (pre - self.post.longest().e_rms) / pre
    }

    pub fn csv(&self) -> String {
        let mut out = String::from("context,stage,model,horizon,e_rms,e_max,f_rms,seed\n");
        for (stage, r) in [("pre", &self.pre), ("post", &self.post)] {
            for h in &r.horizons {
                out.push_str(&format!(
                    "{},{stage},{},{},{:?},{:?},{:?},{}\n",
                    self.context, r.model_id, h.horizon, h.e_rms, h.e_max, r.f_rms, r.seed
                ));
            }
        }
        out
    }
}

/// Fine-tunes the head of `base` on episodes recorded in `episodes` with
/// `base` in the loop. Shared by the batch pipeline and the live service.
pub fn fine_tune(
    base: &PredictorModel,
    episodes: &[Episode],
    train: &TrainConfig,
    seed: u64,
) -> Result<super::train::TrainOutcome, PipelineError> {
    let cfg = &base.config;
    let windows = WindowSet::new(episodes, cfg.window_k, cfg.horizon_n, train.stride, train.target);
    if windows.is_empty() {
        let steps = cfg.window_k + cfg.horizon_n;
        return Err(PipelineError::Insufficient(format!(
            "recordings need at least {steps} samples ({:.3} s at the recorded rate) to form a window",
            steps as f64 * episodes.first().map_or(0.008, |e| e.dt())
        )));
    }
    transfer_learn(base, &windows, train, train.tl_epochs, seed)
}

/// Records a small dataset in the new context with `base` in the loop,
/// fine-tunes the head, and evaluates before and after on the same held-out jobs.
pub fn run_transfer(
    env: &EnvConfig,
    base: &PredictorModel,
    train: &TrainConfig,
    ctx: TransferContext,
    settings: &TransferSettings,
    seed: u64,
) -> Result<TransferReport, PipelineError> {
    env.validate()?;
    let cenv = context_env(env, ctx, settings);
    let ctrl = cenv.controller()?;
    let holdout = cenv.plan(&cenv.human, settings.eval_episodes, seed, TL_HOLDOUT_STREAM)?;
    let pre = evaluate_on_plant(&cenv, &cenv.plant, &ctrl, base, &holdout, seed)?;

    let started = Instant::now();
    let jobs = cenv.plan(&cenv.human, settings.episodes, seed, TL_COLLECT_STREAM)?;
    let recorded: Vec<Episode> = run_game(&cenv, &cenv.plant, &ctrl, Some(base as &dyn IntentPredictor), &jobs)?
        .into_iter()
        .map(|o| o.episode)
        .collect();
    let tuned = fine_tune(base, &recorded, train, derive_seed(seed, &[TL_TRAIN_STREAM]))?;
    let seconds = started.elapsed().as_secs_f64();

    let mut model = tuned.model;
    model.version_tag = format!("{}+tl-{}", base.version_tag, ctx);
    let post = evaluate_on_plant(&cenv, &cenv.plant, &ctrl, &model, &holdout, seed)?;
    Ok(TransferReport {
        context: ctx,
        pre,
        post,
        trainable_parameters: model.trainable_count(),
        total_parameters: model.parameter_count(),
        model,
        loss_trace: tuned.loss_trace,
        seconds,
        recorded,
    })
}
