//! Cartesian impedance plant `M ẍ + C ẋ + K x = u_h + u_r` in state-space form.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;

/// Diagonal impedance parameters of a `d`-DoF translational plant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    /// Diagonal of the inertia matrix (kg).
    pub mass: Vec<f64>,
    /// Diagonal of the damping matrix (N·s/m).
    pub damping: Vec<f64>,
    /// Diagonal of the stiffness matrix (N/m).
    pub stiffness: Vec<f64>,
    /// Sample time (s).
    pub dt: f64,
}

impl PlantParams {
    pub fn new(mass: Vec<f64>, damping: Vec<f64>, stiffness: Vec<f64>, dt: f64) -> Result<Self, DynamicsError> {
        let p = PlantParams {
            mass,
            damping,
            stiffness,
            dt,
        };
        p.validate()?;
        Ok(p)
    }

    /// Planar manual-guidance plant: M = 10 kg, C = 100 N·s/m, K = 0, 8 ms.
    pub fn planar_default() -> Self {
        PlantParams {
            mass: vec![10.0; 2],
            damping: vec![100.0; 2],
            stiffness: vec![0.0; 2],
            dt: 0.008,
        }
    }

    pub fn dof(&self) -> usize {
        self.mass.len()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        let d = self.mass.len();
        if d == 0 {
            return Err(DynamicsError::InvalidPlant("dof must be at least 1".into()));
        }
        if self.damping.len() != d || self.stiffness.len() != d {
            return Err(DynamicsError::InvalidPlant(format!(
                "diagonal lengths differ: mass {d}, damping {}, stiffness {}",
                self.damping.len(),
                self.stiffness.len()
            )));
        }
        if let Some(m) = self.mass.iter().find(|m| !(m.is_finite() && **m > 0.0)) {
            return Err(DynamicsError::InvalidPlant(format!(
                "mass entries must be positive, got {m}"
            )));
        }
        if self
            .damping
            .iter()
            .chain(&self.stiffness)
            .any(|c| !(c.is_finite() && *c >= 0.0))
        {
            return Err(DynamicsError::InvalidPlant(
                "damping and stiffness entries must be non-negative".into(),
            ));
        }
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(DynamicsError::InvalidPlant(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        Ok(())
    }

    /// Same plant carrying an extra rigid payload.
    pub fn with_added_mass(&self, extra: f64) -> Self {
        let mut p = self.clone();
        p.mass.iter_mut().for_each(|m| *m += extra);
        p
    }

    /// Impedance baseline: stiffness `k` on every axis, same mass, damping at
    /// `ratio` of critical (`C = ratio · 2 √(K M)`).
    pub fn impedance_baseline(&self, k: f64, ratio: f64) -> Self {
        let mut p = self.clone();
        p.stiffness = vec![k; self.dof()];
        p.damping = self.mass.iter().map(|m| ratio * 2.0 * (k * m).sqrt()).collect();
        p
    }

    /// Same plant sampled at a different period.
    pub fn with_dt(&self, dt: f64) -> Self {
        PlantParams { dt, ..self.clone() }
    }
}

/// Continuous-time matrices `ż = A z + B_h u_h + B_r u_r` with `z = [x, ẋ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    pub a: DMatrix<f64>,
    pub b_h: DMatrix<f64>,
    pub b_r: DMatrix<f64>,
}

impl StateSpace {
    /// Stacked input matrix `[B_h B_r]`.
    pub fn b(&self) -> DMatrix<f64> {
        let n = self.a.nrows();
        let d = self.b_h.ncols();
        let mut b = DMatrix::zeros(n, 2 * d);
        b.view_mut((0, 0), (n, d)).copy_from(&self.b_h);
        b.view_mut((0, d), (n, d)).copy_from(&self.b_r);
        b
    }
}

pub fn build_state_space(p: &PlantParams) -> StateSpace {
    let d = p.dof();
    let mut a = DMatrix::zeros(2 * d, 2 * d);
    let mut b = DMatrix::zeros(2 * d, d);
    for i in 0..d {
        a[(i, d + i)] = 1.0;
        a[(d + i, i)] = -p.stiffness[i] / p.mass[i];
        a[(d + i, d + i)] = -p.damping[i] / p.mass[i];
        b[(d + i, i)] = 1.0 / p.mass[i];
    }
    StateSpace {
        a,
        b_h: b.clone(),
        b_r: b,
    }
}

/// Zero-order-hold discretization through the exponential of the augmented
/// matrix `[[A, B], [0, 0]]·dt`.
pub fn discretize(a: &DMatrix<f64>, b: &DMatrix<f64>, dt: f64) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let m = b.ncols();
    let mut aug = DMatrix::zeros(n + m, n + m);
    aug.view_mut((0, 0), (n, n)).copy_from(&(a * dt));
    aug.view_mut((0, n), (n, m)).copy_from(&(b * dt));
    let e = aug.exp();
    (e.view((0, 0), (n, n)).into_owned(), e.view((0, n), (n, m)).into_owned())
}

/// Position and velocity at a sample instant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn at_rest(x: Vec<f64>) -> Self {
        let d = x.len();
        PlantState {
            x,
            v: vec![0.0; d],
            t: 0.0,
        }
    }

    pub fn z(&self) -> DVector<f64> {
        DVector::from_iterator(2 * self.x.len(), self.x.iter().chain(&self.v).copied())
    }
}

/// Exact ZOH stepper. The spring term `K x_anchor` enters as a held input force,
/// which is how the impedance baseline tracks a moving equilibrium.
#[derive(Debug, Clone)]
pub struct DiscretePlant {
    params: PlantParams,
    ad: DMatrix<f64>,
    bd: DMatrix<f64>,
}

impl DiscretePlant {
    pub fn new(params: &PlantParams) -> Result<Self, DynamicsError> {
        params.validate()?;
        let ss = build_state_space(params);
        let (ad, bd) = discretize(&ss.a, &ss.b_h, params.dt);
        Ok(DiscretePlant {
            params: params.clone(),
            ad,
            bd,
        })
    }

    pub fn params(&self) -> &PlantParams {
        &self.params
    }

    pub fn dt(&self) -> f64 {
        self.params.dt
    }

    /// Advances `z` by one period with total held force `u_h + u_r + K·anchor`.
    pub fn step(&self, z: &DVector<f64>, u_h: &[f64], u_r: &[f64], anchor: &[f64]) -> DVector<f64> {
        let d = self.params.dof();
        let force = DVector::from_fn(d, |i, _| u_h[i] + u_r[i] + self.params.stiffness[i] * anchor[i]);
        &self.ad * z + &self.bd * force
    }
}
