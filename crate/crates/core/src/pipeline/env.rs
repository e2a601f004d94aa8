//! Experiment environment: plant, weights, synthetic humans, and episode plans.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{
    Assist, EpisodeJob, HumanModel, IntentPredictor, Obstacle, ObstaclePlacement, PlantParams, SimOptions, SimOutcome,
    TrajectoryKind, TrajectorySpec, simulate_batch,
};
use crate::error::PipelineError;
use crate::game::{DiagonalWeights, GameController};

/// Derives an independent 64-bit seed from a master seed and a label path.
pub fn derive_seed(master: u64, labels: &[u64]) -> u64 {
    // splitmix64 folding
    let mut z = master;
    for &l in labels {
        z = z
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(l.wrapping_mul(0xD6E8_FEB8_6659_FD93));
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub plant: PlantParams,
    pub weights: DiagonalWeights,
    pub human: HumanModel,
    pub trajectories: Vec<TrajectoryKind>,
    /// Seconds per episode.
    pub duration: f64,
    pub placement: ObstaclePlacement,
    /// 1-based index of the prediction point used as the human reference.
    pub pick_index: usize,
    /// Training episodes collected per iteration.
    pub episodes_per_iteration: usize,
    /// Episodes per trajectory kind written by dataset generation.
    pub episodes_per_kind: usize,
    /// Held-out episodes as a fraction of the training episodes.
    pub holdout_fraction: f64,
    /// Impedance baseline stiffness (N/m) and damping ratio.
    pub impedance_stiffness: f64,
    pub impedance_damping_ratio: f64,
    /// Prediction horizons used in reports.
    pub horizons: Vec<usize>,
}

impl EnvConfig {
    pub fn desk() -> Self {
        EnvConfig {
            plant: PlantParams::planar_default(),
            weights: DiagonalWeights::planar_default(),
            human: HumanModel::default_for(2),
            trajectories: TrajectoryKind::TRAINING.to_vec(),
            duration: 10.0,
            placement: ObstaclePlacement::default(),
            pick_index: 4,
            episodes_per_iteration: 10,
            episodes_per_kind: 10,
            holdout_fraction: 0.2,
            impedance_stiffness: 200.0,
            impedance_damping_ratio: 0.9,
            horizons: vec![2, 5, 10],
        }
    }

    pub fn paper() -> Self {
        EnvConfig {
            pick_index: 20,
            episodes_per_iteration: 60,
            episodes_per_kind: 20,
            horizons: vec![5, 10, 20, 50],
            ..EnvConfig::desk()
        }
    }

    pub fn dof(&self) -> usize {
        self.plant.dof()
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.plant.validate()?;
        self.human.validate()?;
        self.weights.to_weights()?.validate()?;
        if self.trajectories.is_empty() {
            return Err(PipelineError::Config("at least one trajectory kind is required".into()));
        }
        if !(self.duration > 0.0) {
            return Err(PipelineError::Config("duration must be positive".into()));
        }
        if self.pick_index == 0 {
            return Err(PipelineError::Config("pick_index is 1-based".into()));
        }
        if !(0.0..=1.0).contains(&self.holdout_fraction) {
            return Err(PipelineError::Config("holdout_fraction must lie in [0, 1]".into()));
        }
        if self.horizons.is_empty() || self.horizons.contains(&0) {
            return Err(PipelineError::Config("horizons must be non-empty and positive".into()));
        }
        let p = &self.placement;
        if !(0.0 <= p.arc_min && p.arc_min <= p.arc_max && p.arc_max <= 1.0 && p.half_width > 0.0) {
            return Err(PipelineError::Config("invalid obstacle placement band".into()));
        }
        Ok(())
    }

    pub fn controller(&self) -> Result<GameController, PipelineError> {
        Ok(GameController::new(&self.plant, &self.weights.to_weights()?)?)
    }

    pub fn impedance_plant(&self) -> PlantParams {
        self.plant
            .impedance_baseline(self.impedance_stiffness, self.impedance_damping_ratio)
    }

    /// Held-out episode count: the configured fraction, at least one per trajectory kind.
    pub fn holdout_count(&self) -> usize {
        let frac = (self.holdout_fraction * self.episodes_per_iteration as f64 - 1e-9).ceil() as usize;
        frac.max(self.trajectories.len())
    }

    /// One job: trajectory kind cycles with the index, obstacle drawn from the job seed.
    pub fn job(&self, human: &HumanModel, index: usize, seed: u64) -> Result<EpisodeJob, PipelineError> {
        let kind = self.trajectories[index % self.trajectories.len()];
        let spec = TrajectorySpec::new(kind, self.dof(), self.duration);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let obstacle = Obstacle::random(&spec, &self.placement, &mut rng)?;
        Ok(EpisodeJob {
            spec,
            obstacle: Some(obstacle),
            human: human.clone(),
            seed,
        })
    }

    /// `count` jobs whose seeds derive from `(master, stream, index)`.
    pub fn plan(
        &self,
        human: &HumanModel,
        count: usize,
        master: u64,
        stream: u64,
    ) -> Result<Vec<EpisodeJob>, PipelineError> {
        (0..count)
            .map(|i| self.job(human, i, derive_seed(master, &[stream, i as u64])))
            .collect()
    }
}

/// Runs jobs in lockstep under game assistance; any aborted episode fails the batch.
pub fn run_game(
    env: &EnvConfig,
    plant: &PlantParams,
    ctrl: &GameController,
    predictor: Option<&dyn IntentPredictor>,
    jobs: &[EpisodeJob],
) -> Result<Vec<SimOutcome>, PipelineError> {
    let assist = Assist::Game {
        ctrl,
        predictor,
        pick_index: env.pick_index,
    };
    collect(plant, jobs, assist)
}

pub fn collect(plant: &PlantParams, jobs: &[EpisodeJob], assist: Assist<'_>) -> Result<Vec<SimOutcome>, PipelineError> {
    simulate_batch(plant, jobs, assist, &SimOptions::default())
        .into_iter()
        .map(|r| r.map_err(|e| PipelineError::Aborted(e.to_string())))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_are_distinct_and_stable() {
        let a = derive_seed(1, &[0, 0]);
        assert_eq!(a, derive_seed(1, &[0, 0]));
        assert_ne!(a, derive_seed(1, &[0, 1]));
        assert_ne!(a, derive_seed(1, &[1, 0]));
        assert_ne!(a, derive_seed(2, &[0, 0]));
    }

    #[test]
    fn desk_profile_is_consistent() {
        let env = EnvConfig::desk();
        env.validate().unwrap();
        assert_eq!(env.holdout_count(), 3);
        let plan = env.plan(&env.human, 6, 0, 0).unwrap();
        let kinds: Vec<_> = plan.iter().map(|j| j.spec.kind).collect();
        assert_eq!(kinds[..3], TrajectoryKind::TRAINING);
        assert_eq!(kinds[3..], TrajectoryKind::TRAINING);
        let imp = env.impedance_plant();
        assert_eq!(imp.stiffness, vec![200.0, 200.0]);
        assert!((imp.damping[0] - 80.49844718999243).abs() < 1e-9);
    }
}
