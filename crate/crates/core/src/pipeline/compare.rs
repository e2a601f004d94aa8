//! Interaction force under manual guidance, impedance tracking, and assistance.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::env::{EnvConfig, collect};
use super::metrics::{WelchResult, f_rms, mean, welch_t_test};
use crate::dynamics::{Assist, ControllerKind, IntentPredictor};
use crate::error::PipelineError;
use crate::net::PredictorModel;

const COMPARE_STREAM: u64 = 400;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerStats {
    pub controller: ControllerKind,
    /// Per-episode f_RMS, in job order.
    pub f_rms: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairTest {
    pub a: ControllerKind,
    pub b: ControllerKind,
    pub t: f64,
    pub dof: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareReport {
    pub seed: u64,
    pub model_id: Option<String>,
    pub controllers: Vec<ControllerStats>,
    pub tests: Vec<PairTest>,
}

impl CompareReport {
    pub fn stats(&self, kind: ControllerKind) -> Option<&ControllerStats> {
        self.controllers.iter().find(|c| c.controller == kind)
    }

    pub fn test(&self, a: ControllerKind, b: ControllerKind) -> Option<&PairTest> {
        self.tests
            .iter()
            .find(|t| (t.a == a && t.b == b) || (t.a == b && t.b == a))
    }

    /// Always three controller rows and three pairs; GT cells stay empty without a model.
    pub fn csv(&self) -> String {
        const KINDS: [ControllerKind; 3] = [
            ControllerKind::ManualGuidance,
            ControllerKind::Impedance,
            ControllerKind::Game,
        ];
        let mut out = String::from("controller,mean_f_rms,std_f_rms,episodes,seed\n");
        for kind in KINDS {
            match self.stats(kind) {
                Some(c) => writeln!(out, "{kind},{:?},{:?},{},{}", c.mean, c.std, c.f_rms.len(), self.seed),
                None => writeln!(out, "{kind},,,0,{}", self.seed),
            }
            .unwrap();
        }
        out.push_str("a,b,t,dof,p\n");
        for (i, a) in KINDS.iter().enumerate() {
            for b in &KINDS[i + 1..] {
                match self.test(*a, *b) {
                    Some(t) => writeln!(out, "{a},{b},{:?},{:?},{:?}", t.t, t.dof, t.p),
                    None => writeln!(out, "{a},{b},,,"),
                }
                .unwrap();
            }
        }
        out
    }
}

fn sample_std(x: &[f64]) -> f64 {
    if x.len() < 2 {
        return 0.0;
    }
    let m = mean(x);
    (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (x.len() - 1) as f64).sqrt()
}

/// Runs the same jobs under MG, IMP, and (with a model) GT, and tests every pair.
pub fn compare_controllers(
    env: &EnvConfig,
    model: Option<&PredictorModel>,
    n_episodes: usize,
    seed: u64,
) -> Result<CompareReport, PipelineError> {
    env.validate()?;
    if n_episodes < 2 {
        return Err(PipelineError::Config("comparison needs at least two episodes".into()));
    }
    let jobs = env.plan(&env.human, n_episodes, seed, COMPARE_STREAM)?;
    let ctrl = env.controller()?;
    let imp_plant = env.impedance_plant();
    let mut runs: Vec<(ControllerKind, Vec<f64>)> = Vec::new();
    let forces = |outs: Vec<crate::dynamics::SimOutcome>| -> Result<Vec<f64>, PipelineError> {
        outs.iter().map(|o| f_rms(&o.episode)).collect()
    };
    runs.push((
        ControllerKind::ManualGuidance,
        forces(collect(&env.plant, &jobs, Assist::Manual)?)?,
    ));
    runs.push((
        ControllerKind::Impedance,
        forces(collect(&imp_plant, &jobs, Assist::Impedance)?)?,
    ));
    if let Some(m) = model {
        let assist = Assist::Game {
            ctrl: &ctrl,
            predictor: Some(m as &dyn IntentPredictor),
            pick_index: env.pick_index,
        };
        runs.push((ControllerKind::Game, forces(collect(&env.plant, &jobs, assist)?)?));
    }
    let controllers: Vec<ControllerStats> = runs
        .into_iter()
        .map(|(kind, f)| ControllerStats {
            controller: kind,
            mean: mean(&f),
            std: sample_std(&f),
            f_rms: f,
        })
        .collect();
    let mut tests = Vec::new();
    for i in 0..controllers.len() {
        for j in i + 1..controllers.len() {
            let WelchResult { t, dof, p } = welch_t_test(&controllers[i].f_rms, &controllers[j].f_rms)?;
            tests.push(PairTest {
                a: controllers[i].controller,
                b: controllers[j].controller,
                t,
                dof,
                p,
            });
        }
    }
    Ok(CompareReport {
        seed,
        model_id: model.map(|m| m.version_tag.clone()),
        controllers,
        tests,
    })
}
