//! Plant, synthetic human, nominal trajectories, and episode rollouts.

pub mod episode;
pub mod human;
pub mod plant;
pub mod sim;
#[cfg(test)]
pub(crate) mod tests_support;
pub mod trajectory;

pub use episode::{ControllerKind, EPISODE_SCHEMA_VERSION, Episode, EpisodeMeta, Record};
pub use human::{HumanModel, IntentField, Obstacle, ObstaclePlacement, human_force, human_intent};
pub use plant::{DiscretePlant, PlantParams, PlantState, StateSpace, build_state_space, discretize};
pub use sim::{
    Assist, EpisodeJob, IntentPredictor, PredictionRequest, SimAbort, SimOptions, SimOutcome, Stepper, record_count,
    simulate_batch, simulate_episode,
};
pub use trajectory::{PathGeometry, ShapeParams, TrajectoryKind, TrajectorySpec, nominal_position};
