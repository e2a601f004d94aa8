//! Closed-loop rollouts of the plant, the synthetic human, and a controller.
//!
//! [`Stepper`] splits every sample period in two: [`Stepper::begin`] computes
//! the human force and, when a prediction is due, hands back the predictor
//! window; [`Stepper::finish`] applies the controller and advances the plant.
//! Batched collection and the live service both drive this same engine.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::episode::{ControllerKind, EPISODE_SCHEMA_VERSION, Episode, EpisodeMeta, Record};
use super::human::{HumanModel, IntentField, Obstacle, clamp_norm, human_force};
use super::plant::{DiscretePlant, PlantParams};
use super::trajectory::TrajectorySpec;
use crate::error::{ControlError, DynamicsError, NetError};
use crate::game::{GameController, reference_from_prediction};
use crate::net::{PredictorModel, forward_many};

/// One prediction query: the current time and the `k × 4d` feature window.
#[derive(Debug, Clone, Copy)]
pub struct PredictionRequest<'a> {
    pub t: f64,
    pub window: &'a DMatrix<f64>,
}

/// Anything that maps feature windows to `N × d` future positions.
pub trait IntentPredictor: Sync {
    fn window_len(&self) -> usize;
    fn horizon(&self) -> usize;
    fn model_id(&self) -> Option<String>;
    fn predict_many(&self, requests: &[PredictionRequest<'_>]) -> Result<Vec<Vec<Vec<f64>>>, NetError>;
}

impl IntentPredictor for PredictorModel {
    fn window_len(&self) -> usize {
        self.config.window_k
    }
    fn horizon(&self) -> usize {
        self.config.horizon_n
    }
    fn model_id(&self) -> Option<String> {
        Some(self.version_tag.clone())
    }
    fn predict_many(&self, requests: &[PredictionRequest<'_>]) -> Result<Vec<Vec<Vec<f64>>>, NetError> {
        let windows: Vec<&DMatrix<f64>> = requests.iter().map(|r| r.window).collect();
        forward_many(self, &windows)
    }
}

/// Robot-side behaviour during a rollout.
#[derive(Clone, Copy)]
pub enum Assist<'a> {
    /// No assistive force. The plant is expected to have zero stiffness.
    Manual,
    /// No assistive force; the plant spring tracks the nominal path.
    Impedance,
    /// Game-theoretic assistance. Without a predictor, or before the first
    /// full window, the human reference is the nominal path.
    Game {
        ctrl: &'a GameController,
        predictor: Option<&'a dyn IntentPredictor>,
        pick_index: usize,
    },
}

impl Assist<'_> {
    pub fn kind(&self) -> ControllerKind {
        match self {
            Assist::Manual => ControllerKind::ManualGuidance,
            Assist::Impedance => ControllerKind::Impedance,
            Assist::Game { .. } => ControllerKind::Game,
        }
    }

    pub fn predictor(&self) -> Option<&dyn IntentPredictor> {
        match self {
            Assist::Game { predictor, .. } => *predictor,
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOptions {
    /// Abort when any state component exceeds this magnitude.
    pub state_bound: f64,
    /// Replaces the synthetic human force with a logged sequence, one per step.
    pub logged_forces: Option<Vec<Vec<f64>>>,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            state_bound: 1e3,
            logged_forces: None,
        }
    }
}

/// Inputs of one rollout besides the plant and controller.
#[derive(Debug, Clone)]
pub struct EpisodeJob {
    pub spec: TrajectorySpec,
    pub obstacle: Option<Obstacle>,
    pub human: HumanModel,
    pub seed: u64,
}

/// A finished rollout plus the prediction made at each step (if any).
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub episode: Episode,
    pub predictions: Vec<Option<Vec<Vec<f64>>>>,
}

#[derive(Debug, thiserror::Error)]
#[error("episode aborted at step {step}: {reason}")]
pub struct SimAbort {
    pub step: usize,
    pub reason: DynamicsError,
    /// Records collected before the failure.
    pub partial: Box<Episode>,
}

/// Number of samples in an episode of the given duration.
pub fn record_count(duration: f64, dt: f64) -> usize {
    (duration / dt - 1e-9).ceil().max(1.0) as usize
}

/// Full-state reference from the nominal path at `t + pick·dt`, velocity by backward difference.
fn nominal_reference(spec: &TrajectorySpec, t: f64, pick: usize, dt: f64) -> Result<DVector<f64>, DynamicsError> {
    let ahead = spec.nominal_position(t + pick as f64 * dt)?;
    let before = spec.nominal_position(t + (pick as f64 - 1.0).max(0.0) * dt)?;
    let d = ahead.len();
    let scale = if pick == 0 { 0.0 } else { 1.0 / dt };
    Ok(DVector::from_fn(2 * d, |i, _| {
        if i < d {
            ahead[i]
        } else {
            (ahead[i - d] - before[i - d]) * scale
        }
    }))
}

struct Pending {
    x: Vec<f64>,
    v: Vec<f64>,
    u_h: Vec<f64>,
    x_ref_r: Vec<f64>,
    x_ref_h_true: Vec<f64>,
    wants_prediction: bool,
}

/// Incremental closed-loop simulation of one episode. The robot side is
/// passed to every step, so a caller may swap predictors between steps.
pub struct Stepper {
    plant: DiscretePlant,
    spec: TrajectorySpec,
    obstacle: Option<Obstacle>,
    human: HumanModel,
    intent: IntentField,
    kind: ControllerKind,
    model_id: Option<String>,
    z: DVector<f64>,
    step: usize,
    total: usize,
    records: Vec<Record>,
    features: Vec<Vec<f64>>,
    predictions: Vec<Option<Vec<Vec<f64>>>>,
    rng: ChaCha8Rng,
    noise: Option<Normal<f64>>,
    opts: SimOptions,
    seed: u64,
    pending: Option<Pending>,
}

fn check_assist(d: usize, assist: &Assist<'_>) -> Result<(), DynamicsError> {
    if let Assist::Game {
        ctrl,
        predictor,
        pick_index,
    } = *assist
    {
        if ctrl.dof() != d {
            return Err(DynamicsError::Dimension {
                what: "controller",
                expected: d,
                got: ctrl.dof(),
            });
        }
        if let Some(p) = predictor
            && (pick_index == 0 || pick_index > p.horizon())
        {
            return Err(ControlError::PickIndex {
                pick: pick_index,
                horizon: p.horizon(),
            }
            .into());
        }
    }
    Ok(())
}

impl Stepper {
    /// Validates the job against `assist`, which every later step must match in kind.
    pub fn new(
        params: &PlantParams,
        job: &EpisodeJob,
        assist: &Assist<'_>,
        opts: SimOptions,
    ) -> Result<Self, DynamicsError> {
        let plant = DiscretePlant::new(params)?;
        job.spec.validate()?;
        job.human.validate()?;
        let d = params.dof();
        for (what, got) in [("trajectory start", job.spec.dof()), ("human gains", job.human.dof())] {
            if got != d {
                return Err(DynamicsError::Dimension { what, expected: d, got });
            }
        }
        check_assist(d, assist)?;
        let intent = IntentField::new(&job.spec, job.obstacle.as_ref(), &job.human)?;
        let x0 = job.spec.nominal_position(0.0)?;
        let z = DVector::from_fn(2 * d, |i, _| if i < d { x0[i] } else { 0.0 });
        let noise = (job.human.force_noise_std > 0.0)
            .then(|| Normal::new(0.0, job.human.force_noise_std).expect("validated std"));
        let total = record_count(job.spec.duration, params.dt);
        Ok(Stepper {
            plant,
            spec: job.spec.clone(),
            obstacle: job.obstacle.clone(),
            human: job.human.clone(),
            intent,
            kind: assist.kind(),
            model_id: assist.predictor().and_then(|p| p.model_id()),
            z,
            step: 0,
            total,
            records: Vec::with_capacity(total),
            features: Vec::with_capacity(total),
            predictions: Vec::with_capacity(total),
            rng: ChaCha8Rng::seed_from_u64(job.seed),
            noise,
            opts,
            seed: job.seed,
            pending: None,
        })
    }

    pub fn dof(&self) -> usize {
        self.plant.params().dof()
    }

    pub fn dt(&self) -> f64 {
        self.plant.dt()
    }

    /// Time of the next sample.
    pub fn t(&self) -> f64 {
        self.step as f64 * self.plant.dt()
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn total_steps(&self) -> usize {
        self.total
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total
    }

    pub fn position(&self) -> Vec<f64> {
        self.z.rows(0, self.dof()).iter().copied().collect()
    }

    pub fn velocity(&self) -> Vec<f64> {
        let d = self.dof();
        self.z.rows(d, d).iter().copied().collect()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    pub fn obstacle(&self) -> Option<&Obstacle> {
        self.obstacle.as_ref()
    }

    pub fn spec(&self) -> &TrajectorySpec {
        &self.spec
    }

    /// First half of a step. `external_force` overrides the human model.
    /// Returns the predictor window when a prediction is needed.
    pub fn begin(
        &mut self,
        assist: &Assist<'_>,
        external_force: Option<&[f64]>,
    ) -> Result<Option<DMatrix<f64>>, DynamicsError> {
        let d = self.dof();
        if assist.kind() != self.kind {
            return Err(DynamicsError::ControllerSwitch {
                episode: self.kind,
                step: assist.kind(),
            });
        }
        check_assist(d, assist)?;
        let t = self.t();
        let x = self.position();
        let v = self.velocity();
        let x_ref_h_true = self.intent.at(t)?;
        let x_ref_r = self.spec.nominal_position(t)?;
        let u_h = if let Some(f) = external_force {
            if f.len() != d {
                return Err(DynamicsError::Dimension {
                    what: "external force",
                    expected: d,
                    got: f.len(),
                });
            }
            f.to_vec()
        } else if let Some(log) = &self.opts.logged_forces {
            let f = log.get(self.step).ok_or(DynamicsError::Dimension {
                what: "logged force samples",
                expected: self.total,
                got: log.len(),
            })?;
            f.clone()
        } else {
            let mut f = human_force(&self.human, &x, &v, &x_ref_h_true);
            if let Some(n) = &self.noise {
                for c in &mut f {
                    *c += n.sample(&mut self.rng);
                }
                f = clamp_norm(f, self.human.force_cap);
            }
            f
        };
        let feat: Vec<f64> = x.iter().chain(&v).chain(&u_h).chain(&x_ref_r).copied().collect();
        self.features.push(feat);
        let window = match assist.predictor() {
            Some(p) if self.features.len() >= p.window_len() => {
                let k = p.window_len();
                let rows = &self.features[self.features.len() - k..];
                Some(DMatrix::from_fn(k, 4 * d, |i, j| rows[i][j]))
            }
            _ => None,
        };
        self.pending = Some(Pending {
            x,
            v,
            u_h,
            x_ref_r,
            x_ref_h_true,
            wants_prediction: window.is_some(),
        });
        Ok(window)
    }

    /// Second half of a step: applies the controller and advances the plant.
    pub fn finish(&mut self, assist: &Assist<'_>, prediction: Option<Vec<Vec<f64>>>) -> Result<(), DynamicsError> {
        let p = self
            .pending
            .take()
            .expect("Stepper::finish called without a matching begin");
        let d = self.dof();
        let dt = self.dt();
        let t = self.t();
        if p.wants_prediction && prediction.is_none() {
            return Err(DynamicsError::Predictor(NetError::EmptyBatch));
        }
        if prediction.is_some()
            && let Some(id) = assist.predictor().and_then(|p| p.model_id())
        {
            self.model_id = Some(id);
        }
        let u_r = match *assist {
            Assist::Manual | Assist::Impedance => vec![0.0; d],
            Assist::Game { ctrl, pick_index, .. } => {
                let z_ref_r = nominal_reference(&self.spec, t, pick_index, dt)?;
                let z_ref_h = match &prediction {
                    Some(pred) => reference_from_prediction(pred, &p.x, pick_index, dt)?,
                    None => z_ref_r.clone(),
                };
                let z_ref = ctrl.shared_reference(&z_ref_h, &z_ref_r)?;
                ctrl.robot_action(&self.z, &z_ref).iter().copied().collect()
            }
        };
        let next = self.plant.step(&self.z, &p.u_h, &u_r, &p.x_ref_r);
        self.records.push(Record {
            t,
            x: p.x,
            v: p.v,
            u_h: p.u_h,
            x_ref_r: p.x_ref_r,
            x_ref_h_true: p.x_ref_h_true,
            u_r,
            tag: self.kind,
        });
        self.predictions.push(prediction);
        let worst = next.iter().fold(
            0.0f64,
            |m, v| if v.is_finite() { m.max(v.abs()) } else { f64::INFINITY },
        );
        if worst > self.opts.state_bound {
            return Err(DynamicsError::BlowUp {
                step: self.step,
                value: worst,
            });
        }
        self.z = next;
        self.step += 1;
        Ok(())
    }

    /// Episode built from the records so far.
    pub fn episode(&self) -> Episode {
        Episode {
            meta: EpisodeMeta {
                schema_version: EPISODE_SCHEMA_VERSION,
                plant: self.plant.params().clone(),
                trajectory: self.spec.clone(),
                obstacle: self.obstacle.clone(),
                human: self.human.clone(),
                model_id: self.model_id.clone(),
                seed: self.seed,
            },
            records: self.records.clone(),
        }
    }

    pub fn into_outcome(self) -> SimOutcome {
        let episode = self.episode();
        SimOutcome {
            episode,
            predictions: self.predictions,
        }
    }

    fn abort(&self, reason: DynamicsError) -> SimAbort {
        SimAbort {
            step: self.step,
            reason,
            partial: Box::new(self.episode()),
        }
    }
}

fn empty_abort(params: &PlantParams, job: &EpisodeJob, reason: DynamicsError) -> SimAbort {
    SimAbort {
        step: 0,
        reason,
        partial: Box::new(Episode {
            meta: EpisodeMeta {
                schema_version: EPISODE_SCHEMA_VERSION,
                plant: params.clone(),
                trajectory: job.spec.clone(),
                obstacle: job.obstacle.clone(),
                human: job.human.clone(),
                model_id: None,
                seed: job.seed,
            },
            records: Vec::new(),
        }),
    }
}

/// Runs one episode to completion.
#[allow(clippy::too_many_arguments)]
pub fn simulate_episode(
    params: &PlantParams,
    spec: &TrajectorySpec,
    obstacle: Option<&Obstacle>,
    human: &HumanModel,
    assist: Assist<'_>,
    seed: u64,
    opts: SimOptions,
) -> Result<SimOutcome, SimAbort> {
    let job = EpisodeJob {
        spec: spec.clone(),
        obstacle: obstacle.cloned(),
        human: human.clone(),
        seed,
    };
    simulate_batch(params, std::slice::from_ref(&job), assist, &opts)
        .pop()
        .expect("one job in, one result out")
}

/// Runs several episodes in lockstep so that predictor calls are batched.
/// Results are in job order; each episode is independent of the others.
pub fn simulate_batch(
    params: &PlantParams,
    jobs: &[EpisodeJob],
    assist: Assist<'_>,
    opts: &SimOptions,
) -> Vec<Result<SimOutcome, SimAbort>> {
    let mut slots: Vec<Result<Stepper, SimAbort>> = jobs
        .iter()
        .map(|job| Stepper::new(params, job, &assist, opts.clone()).map_err(|e| empty_abort(params, job, e)))
        .collect();
    let predictor = assist.predictor();
    loop {
        let mut windows: Vec<(usize, f64, DMatrix<f64>)> = Vec::new();
        let mut active: Vec<usize> = Vec::new();
        for (i, slot) in slots.iter_mut().enumerate() {
            let Ok(stepper) = slot else { continue };
            if stepper.is_done() {
                continue;
            }
            let t = stepper.t();
            match stepper.begin(&assist, None) {
                Ok(Some(w)) => windows.push((i, t, w)),
                Ok(None) => {}
                Err(e) => {
                    *slot = Err(stepper.abort(e));
                    continue;
                }
            }
            active.push(i);
        }
        if active.is_empty() {
            break;
        }
        let mut preds: Vec<Option<Vec<Vec<f64>>>> = vec![None; slots.len()];
        if let (Some(p), false) = (predictor, windows.is_empty()) {
            let requests: Vec<PredictionRequest<'_>> = windows
                .iter()
                .map(|(_, t, w)| PredictionRequest { t: *t, window: w })
                .collect();
            match p.predict_many(&requests) {
                Ok(out) => {
                    for ((i, _, _), pred) in windows.iter().zip(out) {
                        preds[*i] = Some(pred);
                    }
                }
                Err(e) => {
                    let msg = e.to_string();
                    for (i, _, _) in &windows {
                        if let Ok(s) = &slots[*i] {
                            let abort = s.abort(DynamicsError::Predictor(NetError::InvalidConfig(msg.clone())));
                            slots[*i] = Err(abort);
                        }
                    }
                }
            }
        }
        for i in active {
            let slot = &mut slots[i];
            let Ok(stepper) = slot else { continue };
            if let Err(e) = stepper.finish(&assist, preds[i].take()) {
                *slot = Err(stepper.abort(e));
            }
        }
    }
    slots.into_iter().map(|s| s.map(Stepper::into_outcome)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::trajectory::TrajectoryKind;
    use crate::game::DiagonalWeights;

    fn planar() -> PlantParams {
        PlantParams::planar_default()
    }

    fn passive_human(dof: usize) -> HumanModel {
        let mut h = HumanModel::default_for(dof);
        h.stiffness = vec![0.0; dof];
        h.damping = vec![0.0; dof];
        h
    }

    #[test]
    fn manual_guidance_without_force_stays_put() {
        let spec = TrajectorySpec::new(TrajectoryKind::Curved, 2, 2.0);
        let out = simulate_episode(
            &planar(),
            &spec,
            None,
            &passive_human(2),
            Assist::Manual,
            1,
            SimOptions::default(),
        )
        .unwrap();
        let x0 = &out.episode.records[0].x;
        assert!(
            out.episode
                .records
                .iter()
                .all(|r| &r.x == x0 && r.u_r == vec![0.0, 0.0])
        );
    }

    #[test]
    fn constant_force_reaches_terminal_velocity() {
        let params = PlantParams::new(vec![10.0], vec![100.0], vec![0.0], 0.008).unwrap();
        let spec = TrajectorySpec::new(TrajectoryKind::Linear, 1, 1.0);
        let steps = record_count(1.0, 0.008);
        let opts = SimOptions {
            logged_forces: Some(vec![vec![1.0]; steps]),
            ..SimOptions::default()
        };
        let out = simulate_episode(&params, &spec, None, &passive_human(1), Assist::Manual, 0, opts).unwrap();
        // time constant M/C = 0.1 s; 0.5 s is five of them
        let idx = (0.5f64 / 0.008).ceil() as usize;
        let v = out.episode.records[idx].v[0];
        assert!((v - 0.01).abs() < 0.01 * 0.01, "{v}");
    }

    #[test]
    fn record_count_and_timestamps() {
        let spec = TrajectorySpec::new(TrajectoryKind::Linear, 2, 10.0);
        let out = simulate_episode(
            &planar(),
            &spec,
            None,
            &HumanModel::default_for(2),
            Assist::Manual,
            0,
            SimOptions::default(),
        )
        .unwrap();
        assert_eq!(out.episode.len(), 1250);
        for (n, r) in out.episode.records.iter().enumerate() {
            assert_eq!(r.t, n as f64 * 0.008);
        }
        assert_eq!(record_count(0.1, 0.03), 4);
    }

    struct NominalOracle {
        spec: TrajectorySpec,
        dt: f64,
        k: usize,
        n: usize,
    }

    impl IntentPredictor for NominalOracle {
        fn window_len(&self) -> usize {
            self.k
        }
        fn horizon(&self) -> usize {
            self.n
        }
        fn model_id(&self) -> Option<String> {
            None
        }
        fn predict_many(&self, requests: &[PredictionRequest<'_>]) -> Result<Vec<Vec<Vec<f64>>>, NetError> {
            Ok(requests
                .iter()
                .map(|r| {
                    (1..=self.n)
                        .map(|j| self.spec.nominal_position(r.t + j as f64 * self.dt).unwrap())
                        .collect()
                })
                .collect())
        }
    }

    #[test]
    fn nominal_predictions_match_no_predictor() {
        let params = planar();
        let weights = DiagonalWeights::planar_default().to_weights().unwrap();
        let ctrl = GameController::new(&params, &weights).unwrap();
        let spec = TrajectorySpec::new(TrajectoryKind::Sinusoidal, 2, 3.0);
        let human = HumanModel::default_for(2);
        let oracle = NominalOracle {
            spec: spec.clone(),
            dt: params.dt,
            k: 5,
            n: 10,
        };
        let plain = Assist::Game {
            ctrl: &ctrl,
            predictor: None,
            pick_index: 4,
        };
        let fed = Assist::Game {
            ctrl: &ctrl,
            predictor: Some(&oracle),
            pick_index: 4,
        };
        let a = simulate_episode(&params, &spec, None, &human, plain, 3, SimOptions::default()).unwrap();
        let b = simulate_episode(&params, &spec, None, &human, fed, 3, SimOptions::default()).unwrap();
        for (ra, rb) in a.episode.records.iter().zip(&b.episode.records) {
            for (u, w) in ra.x.iter().zip(&rb.x) {
                assert!((u - w).abs() < 1e-12);
            }
        }
        assert!(b.predictions[4].is_some() && b.predictions[3].is_none());
    }

    #[test]
    fn identical_seeds_are_bit_identical() {
        let params = planar();
        let spec = TrajectorySpec::new(TrajectoryKind::Curved, 2, 2.0);
        let mut human = HumanModel::default_for(2);
        human.force_noise_std = 0.5;
        let run = |seed| {
            simulate_episode(
                &params,
                &spec,
                None,
                &human,
                Assist::Manual,
                seed,
                SimOptions::default(),
            )
            .unwrap()
            .episode
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }

    #[test]
    fn blow_up_keeps_partial_records() {
        let spec = TrajectorySpec::new(TrajectoryKind::Linear, 2, 2.0);
        let opts = SimOptions {
            state_bound: 0.05,
            ..SimOptions::default()
        };
        let err = simulate_episode(
            &planar(),
            &spec,
            None,
            &HumanModel::default_for(2),
            Assist::Manual,
            0,
            opts,
        )
        .unwrap_err();
        assert!(matches!(err.reason, DynamicsError::BlowUp { .. }));
        assert!(!err.partial.records.is_empty());
        assert_eq!(err.partial.records.len(), err.step + 1);
    }

    #[test]
    fn batch_matches_single_runs() {
        let params = planar();
        let jobs: Vec<EpisodeJob> = TrajectoryKind::TRAINING
            .iter()
            .enumerate()
            .map(|(i, k)| EpisodeJob {
                spec: TrajectorySpec::new(*k, 2, 1.0 + i as f64 * 0.5),
                obstacle: None,
                human: HumanModel::default_for(2),
                seed: i as u64,
            })
            .collect();
        let batch = simulate_batch(&params, &jobs, Assist::Impedance, &SimOptions::default());
        for (job, res) in jobs.iter().zip(batch) {
            let one = simulate_episode(
                &params,
                &job.spec,
                None,
                &job.human,
                Assist::Impedance,
                job.seed,
                SimOptions::default(),
            )
            .unwrap();
            assert_eq!(res.unwrap().episode, one.episode);
        }
    }
}
