//! Finite-horizon evaluation of the shared quadratic cost.

use nalgebra::{DMatrix, DVector};

/// Uniformly sampled states and inputs.
#[derive(Debug, Clone)]
pub struct Rollout {
    pub dt: f64,
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
}

/// Trapezoidal quadrature of `z̃ᵀ Q_c z̃ + uᵀ R_c u` over `[0, horizon]`.
pub fn evaluate_game_cost(
    rollout: &Rollout,
    q_c: &DMatrix<f64>,
    r_c: &DMatrix<f64>,
    z_ref: &[DVector<f64>],
    horizon: f64,
) -> f64 {
    let n = rollout.states.len().min(rollout.inputs.len()).min(z_ref.len());
    let last = ((horizon / rollout.dt).round() as usize).min(n.saturating_sub(1));
    let integrand = |i: usize| {
        let e = &rollout.states[i] - &z_ref[i];
        let u = &rollout.inputs[i];
        e.dot(&(q_c * &e)) + u.dot(&(r_c * u))
    };
    if last == 0 {
        return 0.0;
    }
    let mut sum = 0.5 * (integrand(0) + integrand(last));
    for i in 1..last {
        sum += integrand(i);
    }
    sum * rollout.dt
}

/// Regulation to the origin under `u = −K z`, propagated with the exact
/// closed-loop transition `exp((A − B K) dt)`.
pub fn regulate(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    k: &DMatrix<f64>,
    z0: &DVector<f64>,
    dt: f64,
    horizon: f64,
) -> Rollout {
    let phi = ((a - b * k) * dt).exp();
    let steps = (horizon / dt).round() as usize;
    let mut states = Vec::with_capacity(steps + 1);
    let mut inputs = Vec::with_capacity(steps + 1);
    let mut z = z0.clone();
    for _ in 0..=steps {
        inputs.push(-(k * &z));
        let next = &phi * &z;
        states.push(z);
        z = next;
    }
    Rollout { dt, states, inputs }
}
