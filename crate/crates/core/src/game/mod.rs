//! Cooperative two-player LQ game solved as a single LQR.

pub mod care;
pub mod controller;
pub mod cost;

pub use care::{CareSolution, solve_care, solve_lyapunov};
pub use controller::{
    CostBlend, DEFAULT_PICK_INDEX, DiagonalWeights, GameController, GameWeights, combine_costs, feedback_gain,
    reference_from_prediction, robot_action, shared_reference,
};
pub use cost::{Rollout, evaluate_game_cost, regulate};
