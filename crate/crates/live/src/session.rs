//! One live session: the plant, the robot side, the held human force, and
//! the recording buffer. Purely synchronous; the server drives [`Session::tick`].

use std::sync::Arc;

use phri_core::dynamics::{
    Assist, ControllerKind, Episode, EpisodeJob, IntentPredictor, Obstacle, Record, SimOptions, Stepper, TrajectorySpec,
};
use phri_core::game::GameController;
use phri_core::net::{PredictorModel, forward};
use serde::Serialize;

use crate::protocol::{Body, Configure, PredictionUpdate, StateUpdate};
use crate::store::ModelStore;
use crate::{ServiceConfig, ServiceError};

pub const MAX_RATE_HZ: f64 = 1000.0;
pub const DEFAULT_HUMAN_ID: &str = "operator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Idle,
    Running,
    Paused,
    Done,
}

pub struct Session {
    id: String,
    configure: Configure,
    kind: ControllerKind,
    ctrl: Option<GameController>,
    model: Option<Arc<PredictorModel>>,
    pick_index: usize,
    stepper: Stepper,
    status: Status,
    force: Vec<f64>,
    force_cap: f64,
    recording: bool,
    buffer: Vec<Record>,
    rate_hz: f64,
    prediction_every: usize,
}

impl Session {
    /// Builds an idle session at the start of the configured trajectory.
    pub fn new(
        id: String,
        cfg: &ServiceConfig,
        c: &Configure,
        models: &ModelStore,
        seed: u64,
    ) -> Result<Self, ServiceError> {
        let mut env = cfg.env.clone();
        let rate_hz = c.rate_hz.unwrap_or(cfg.rate_hz);
        if !(rate_hz > 0.0 && rate_hz <= MAX_RATE_HZ) {
            return Err(ServiceError::session(format!(
                "rate_hz must lie in (0, {MAX_RATE_HZ}], got {rate_hz}"
            )));
        }
        if let Some(a) = c.alpha {
            if !(a > 0.0 && a < 1.0) {
                return Err(ServiceError::session(format!(
                    "alpha must lie strictly between 0 and 1, got {a}"
                )));
            }
            env.weights.alpha = a;
        }
        let duration = c.duration.unwrap_or(env.duration);
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(ServiceError::session(format!(
                "duration must be positive, got {duration}"
            )));
        }
        let dt = 1.0 / rate_hz;
        let plant = match c.controller {
            ControllerKind::Impedance => env.impedance_plant(),
            _ => env.plant.clone(),
        }
        .with_dt(dt);
        env.plant = plant.clone();

        let ctrl = match c.controller {
            ControllerKind::Game => Some(env.controller()?),
            _ => None,
        };
        let model = match (&c.model, c.controller) {
            (None, _) => None,
            (Some(id), ControllerKind::Game) => Some(models.get(id)?),
            (Some(_), other) => {
                return Err(ServiceError::session(format!(
                    "a predictor only drives the GT controller, not {}",
                    other.tag()
                )));
            }
        };

        let spec = TrajectorySpec::new(c.trajectory, env.dof(), duration);
        let obstacle = c
            .obstacle_at
            .map(|a| Obstacle::on_path(&spec, a, env.placement.half_width, &env.placement))
            .transpose()?;
        let mut human = env.human.clone();
        human.id = c.human_id.clone().unwrap_or_else(|| DEFAULT_HUMAN_ID.into());
        human.force_noise_std = 0.0;
        let job = EpisodeJob {
            spec,
            obstacle,
            human,
            seed,
        };

        let predictor = model.as_deref().map(|m| m as &dyn IntentPredictor);
        let assist = assist_for(c.controller, ctrl.as_ref(), predictor, env.pick_index);
        let stepper = Stepper::new(&plant, &job, &assist, SimOptions::default())?;
        let mut configure = c.clone();
        configure.session = Some(id.clone());
        configure.rate_hz = Some(rate_hz);
        configure.duration = Some(duration);
        configure.alpha = Some(env.weights.alpha);
        configure.human_id = Some(job.human.id.clone());
        Ok(Session {
            id,
            configure,
            kind: c.controller,
            ctrl,
            model,
            pick_index: env.pick_index,
            force: vec![0.0; env.dof()],
            force_cap: job.human.force_cap,
            stepper,
            status: Status::Idle,
            recording: false,
            buffer: Vec::new(),
            rate_hz,
            prediction_every: cfg.prediction_every.max(1),
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    /// The configuration as applied, defaults filled in.
    pub fn configure(&self) -> &Configure {
        &self.configure
    }

    pub fn status(&self) -> Status {
        self.status
    }

    pub fn rate_hz(&self) -> f64 {
        self.rate_hz
    }

    pub fn human_id(&self) -> &str {
        self.configure.human_id.as_deref().unwrap_or(DEFAULT_HUMAN_ID)
    }

    pub fn model(&self) -> Option<&Arc<PredictorModel>> {
        self.model.as_ref()
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn buffered_records(&self) -> usize {
        self.buffer.len()
    }

    pub fn held_force(&self) -> &[f64] {
        &self.force
    }

    pub fn start(&mut self) -> Result<(), ServiceError> {
        match self.status {
            Status::Done => Err(ServiceError::session("session has finished; configure a new one")),
            _ => {
                self.status = Status::Running;
                Ok(())
            }
        }
    }

    pub fn pause(&mut self) {
        if self.status == Status::Running {
            self.status = Status::Paused;
        }
    }

    /// Replaces the held force. Rejected forces leave the previous one in place.
    pub fn set_force(&mut self, force: &[f64]) -> Result<(), ServiceError> {
        let d = self.force.len();
        if force.len() != d {
            return Err(ServiceError::session(format!(
                "force_input needs {d} components, got {}",
                force.len()
            )));
        }
        if force.iter().any(|f| !f.is_finite()) {
            return Err(ServiceError::session("force_input contains a non-finite value"));
        }
        let norm = force.iter().map(|f| f * f).sum::<f64>().sqrt();
        if norm > self.force_cap * (1.0 + 1e-12) {
            return Err(ServiceError::session(format!(
                "force magnitude {norm:.3} N exceeds the cap of {} N",
                self.force_cap
            )));
        }
        self.force = force.to_vec();
        Ok(())
    }

    /// Turns recording on or off. Resuming after a gap would break the uniform
    /// time base of the buffer, so the pending recording must be exported first.
    pub fn set_recording(&mut self, on: bool) -> Result<(), ServiceError> {
        if on && !self.recording && !self.buffer.is_empty() {
            let next = self.stepper.step_index();
            let last = (self.buffer.last().expect("non-empty").t / self.stepper.dt()).round() as usize;
            if last + 1 != next {
                return Err(ServiceError::session(
                    "the buffered recording has a gap; export it before recording again",
                ));
            }
        }
        self.recording = on;
        Ok(())
    }

    /// Advances one sample period. Returns the messages to send.
    pub fn tick(&mut self) -> Result<Vec<Body>, ServiceError> {
        if self.status != Status::Running {
            return Ok(Vec::new());
        }
        let step = self.stepper.step_index();
        let t = self.stepper.t();
        let predictor = self.model.as_deref().map(|m| m as &dyn IntentPredictor);
        let assist = assist_for(self.kind, self.ctrl.as_ref(), predictor, self.pick_index);
        let result = (|| -> Result<Option<Vec<Vec<f64>>>, ServiceError> {
            let window = self.stepper.begin(&assist, Some(&self.force))?;
            let prediction = match (window, &self.model) {
                (Some(w), Some(m)) => Some(forward(m, &w)?),
                _ => None,
            };
            self.stepper.finish(&assist, prediction.clone())?;
            Ok(prediction)
        })();
        let prediction = match result {
            Ok(p) => p,
            Err(e) => {
                self.status = Status::Done;
                return Err(e);
            }
        };
        let rec = self.stepper.records().last().expect("a step was recorded").clone();
        if self.recording {
            self.buffer.push(rec.clone());
        }
        let done = self.stepper.is_done();
        if done {
            self.status = Status::Done;
        }
        let mut out = vec![Body::StateUpdate(StateUpdate {
            step,
            t,
            x: rec.x,
            v: rec.v,
            u_h: rec.u_h,
            u_r: rec.u_r,
            x_ref_r: rec.x_ref_r,
            obstacle: self.stepper.obstacle().cloned(),
            recording: self.recording,
            done,
        })];
        if let (Some(positions), Some(m)) = (prediction, &self.model)
            && step.is_multiple_of(self.prediction_every)
        {
            out.push(Body::PredictionUpdate(PredictionUpdate {
                step,
                t,
                model: m.version_tag.clone(),
                positions,
            }));
        }
        Ok(out)
    }

    /// Takes the recording buffer as an episode in the dataset format. Time
    /// restarts at zero for recordings begun mid-session.
    pub fn take_recording(&mut self) -> Result<Episode, ServiceError> {
        if self.buffer.is_empty() {
            return Err(ServiceError::session(
                "nothing recorded; send record_toggle before exporting",
            ));
        }
        let mut records = std::mem::take(&mut self.buffer);
        let t0 = records[0].t;
        if t0 != 0.0 {
            let dt = self.stepper.dt();
            for (i, r) in records.iter_mut().enumerate() {
                r.t = i as f64 * dt;
            }
        }
        let meta = self.stepper.episode().meta;
        Ok(Episode { meta, records })
    }

    /// Switches to another predictor of the same shape.
    pub fn swap_model(&mut self, model: Arc<PredictorModel>) -> Result<(), ServiceError> {
        let current = self
            .model
            .as_ref()
            .ok_or_else(|| ServiceError::session("session runs without a predictor"))?;
        if current.config != model.config {
            return Err(ServiceError::session(format!(
                "model {} has a different shape than {}",
                model.version_tag, current.version_tag
            )));
        }
        self.configure.model = Some(model.version_tag.clone());
        self.model = Some(model);
        Ok(())
    }
}

fn assist_for<'a>(
    kind: ControllerKind,
    ctrl: Option<&'a GameController>,
    predictor: Option<&'a dyn IntentPredictor>,
    pick_index: usize,
) -> Assist<'a> {
    match (kind, ctrl) {
        (ControllerKind::Game, Some(ctrl)) => Assist::Game {
            ctrl,
            predictor,
            pick_index,
        },
        (ControllerKind::Impedance, _) => Assist::Impedance,
        _ => Assist::Manual,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use phri_core::dynamics::{TrajectoryKind, simulate_episode};
    use phri_core::net::PredictorConfig;
    use phri_core::pipeline::{EnvConfig, TrainConfig};

    fn service(dir: &std::path::Path) -> ServiceConfig {
        ServiceConfig {
            env: EnvConfig::desk(),
            train: TrainConfig::default(),
            model_dir: dir.join("models"),
            recordings_dir: dir.join("recordings"),
            rate_hz: 125.0,
            prediction_every: 5,
            seed: 0,
        }
    }

    fn run(s: &mut Session, steps: usize) -> Vec<Body> {
        (0..steps).flat_map(|_| s.tick().unwrap()).collect()
    }

    fn states(msgs: &[Body]) -> Vec<&StateUpdate> {
        msgs.iter()
            .filter_map(|b| match b {
                Body::StateUpdate(s) => Some(s),
                _ => None,
            })
            .collect()
    }

    #[test]
    fn manual_guidance_without_force_holds_still() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = service(dir.path());
        let store = ModelStore::new(&cfg.model_dir);
        let c = Configure::new(TrajectoryKind::Curved, ControllerKind::ManualGuidance);
        let mut s = Session::new("s1".into(), &cfg, &c, &store, 0).unwrap();
        assert!(s.tick().unwrap().is_empty(), "idle sessions do not step");
        s.start().unwrap();
        let msgs = run(&mut s, 50);
        let st = states(&msgs);
        assert_eq!(st.len(), 50);
        for w in st.windows(2) {
            assert_eq!(w[0].x, w[1].x);
            assert!((w[1].t - w[0].t - 1.0 / 125.0).abs() < 1e-12);
        }
    }

    #[test]
    fn held_force_and_rate() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = service(dir.path());
        let store = ModelStore::new(&cfg.model_dir);
        let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::ManualGuidance);
        c.rate_hz = Some(60.0);
        let mut s = Session::new("s1".into(), &cfg, &c, &store, 0).unwrap();
        s.start().unwrap();
        s.set_force(&[3.0, 0.0]).unwrap();
        let st_msgs = run(&mut s, 10);
        let st = states(&st_msgs);
        assert!(st.iter().all(|u| u.u_h == vec![3.0, 0.0]));
        assert!((st[1].t - 1.0 / 60.0).abs() < 1e-12);
        assert!(st[9].x[0] > st[0].x[0]);

        assert!(s.set_force(&[1.0]).is_err());
        assert!(s.set_force(&[40.0, 0.0]).is_err());
        assert!(s.set_force(&[f64::NAN, 0.0]).is_err());
        assert_eq!(s.held_force(), &[3.0, 0.0]);
    }

    #[test]
    fn rejects_bad_configuration() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = service(dir.path());
        let store = ModelStore::new(&cfg.model_dir);
        let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
        c.model = Some("M7".into());
        assert!(matches!(
            Session::new("s".into(), &cfg, &c, &store, 0),
            Err(ServiceError::UnknownModel(_))
        ));
        let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
        c.alpha = Some(1.0);
        assert!(Session::new("s".into(), &cfg, &c, &store, 0).is_err());
        let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
        c.obstacle_at = Some(0.99);
        assert!(Session::new("s".into(), &cfg, &c, &store, 0).is_err());
        let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Game);
        c.rate_hz = Some(0.0);
        assert!(Session::new("s".into(), &cfg, &c, &store, 0).is_err());
    }

    #[test]
    fn predictions_flow_at_the_refresh_interval() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = service(dir.path());
        let store = ModelStore::new(&cfg.model_dir);
        let pc = PredictorConfig::new(2, 5, 4, 1, 6, 6).unwrap();
        let mut m = PredictorModel::init(&pc, 3).unwrap();
        m.version_tag = "tiny".into();
        store.insert(m).unwrap();
        let mut c = Configure::new(TrajectoryKind::Curved, ControllerKind::Game);
        c.model = Some("tiny".into());
        c.obstacle_at = Some(0.5);
        let mut s = Session::new("s1".into(), &cfg, &c, &store, 0).unwrap();
        s.start().unwrap();
        let msgs = run(&mut s, 30);
        let preds: Vec<&PredictionUpdate> = msgs
            .iter()
            .filter_map(|b| match b {
                Body::PredictionUpdate(p) => Some(p),
                _ => None,
            })
            .collect();
        // First full window ends at step 4; updates every 5 steps from there.
        let steps: Vec<usize> = preds.iter().map(|p| p.step).collect();
        assert_eq!(steps, vec![5, 10, 15, 20, 25]);
        assert!(preds.iter().all(|p| p.positions.len() == 4 && p.model == "tiny"));
        assert!(states(&msgs).iter().all(|u| u.obstacle.is_some()));
    }

    #[test]
    fn recording_replays_offline() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = service(dir.path());
        let store = ModelStore::new(&cfg.model_dir);
        let mut c = Configure::new(TrajectoryKind::Linear, ControllerKind::Impedance);
        c.duration = Some(0.4);
        let mut s = Session::new("s1".into(), &cfg, &c, &store, 9).unwrap();
        assert!(s.take_recording().is_err());
        s.set_recording(true).unwrap();
        s.start().unwrap();
        for i in 0..60 {
            s.set_force(&[(i as f64 * 0.3).sin() * 5.0, 2.0]).unwrap();
            s.tick().unwrap();
        }
        assert_eq!(s.status(), Status::Done);
        let ep = s.take_recording().unwrap();
        assert_eq!(ep.len(), 50);
        ep.validate().unwrap();

        let forces: Vec<Vec<f64>> = ep.records.iter().map(|r| r.u_h.clone()).collect();
        let replay = simulate_episode(
            &ep.meta.plant,
            &ep.meta.trajectory,
            ep.meta.obstacle.as_ref(),
            &ep.meta.human,
            Assist::Impedance,
            ep.meta.seed,
            SimOptions {
                logged_forces: Some(forces),
                ..SimOptions::default()
            },
        )
        .unwrap();
        for (a, b) in replay.episode.records.iter().zip(&ep.records) {
            for (p, q) in a.x.iter().chain(&a.v).zip(b.x.iter().chain(&b.v)) {
                assert!((p - q).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn gaps_in_recording_need_an_export() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = service(dir.path());
        let store = ModelStore::new(&cfg.model_dir);
        let c = Configure::new(TrajectoryKind::Linear, ControllerKind::ManualGuidance);
        let mut s = Session::new("s1".into(), &cfg, &c, &store, 0).unwrap();
        s.start().unwrap();
        run(&mut s, 3);
        s.set_recording(true).unwrap();
        run(&mut s, 5);
        s.set_recording(false).unwrap();
        s.set_recording(true).unwrap();
        run(&mut s, 2);
        s.set_recording(false).unwrap();
        run(&mut s, 1);
        assert!(s.set_recording(true).is_err());
        let ep = s.take_recording().unwrap();
        assert_eq!(ep.len(), 7);
        ep.validate().unwrap();
        s.set_recording(true).unwrap();
    }
}
