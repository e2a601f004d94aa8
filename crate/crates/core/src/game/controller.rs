use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::care::{is_hurwitz, solve_care, spectral_abscissa};
use crate::dynamics::plant::{PlantParams, build_state_space};
use crate::error::ControlError;

const SYMMETRY_TOL: f64 = 1e-12;

/// Quadratic cost weights of the two players and the assistance level `alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct GameWeights {
    pub q_hh: DMatrix<f64>,
    pub q_hr: DMatrix<f64>,
    pub q_rh: DMatrix<f64>,
    pub q_rr: DMatrix<f64>,
    pub r_h: DMatrix<f64>,
    pub r_r: DMatrix<f64>,
    pub alpha: f64,
}

/// Diagonal description of [`GameWeights`], as stored in configuration files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagonalWeights {
    pub q_hh: Vec<f64>,
    pub q_hr: Vec<f64>,
    pub q_rh: Vec<f64>,
    pub q_rr: Vec<f64>,
    pub r_h: Vec<f64>,
    pub r_r: Vec<f64>,
    pub alpha: f64,
}

impl DiagonalWeights {
    /// Experimental planar values: position weight 1, velocity weight 1e-4,
    /// input weight 5e-4, no cross weights, alpha 0.8.
    pub fn planar_default() -> Self {
        DiagonalWeights {
            q_hh: vec![1.0, 1.0, 1e-4, 1e-4],
            q_hr: vec![0.0; 4],
            q_rh: vec![0.0; 4],
            q_rr: vec![1.0, 1.0, 1e-4, 1e-4],
            r_h: vec![5e-4, 5e-4],
            r_r: vec![5e-4, 5e-4],
            alpha: 0.8,
        }
    }

    pub fn to_weights(&self) -> Result<GameWeights, ControlError> {
        let diag = |v: &Vec<f64>| DMatrix::from_diagonal(&DVector::from_vec(v.clone()));
        let w = GameWeights {
            q_hh: diag(&self.q_hh),
            q_hr: diag(&self.q_hr),
            q_rh: diag(&self.q_rh),
            q_rr: diag(&self.q_rr),
            r_h: diag(&self.r_h),
            r_r: diag(&self.r_r),
            alpha: self.alpha,
        };
        w.validate()?;
        Ok(w)
    }
}

fn check_symmetric(name: &str, m: &DMatrix<f64>, n: usize, definite: bool) -> Result<(), ControlError> {
    if m.nrows() != n || m.ncols() != n {
        return Err(ControlError::InvalidWeights(format!(
            "{name} is {}×{}, expected {n}×{n}",
            m.nrows(),
            m.ncols()
        )));
    }
    if (m - m.transpose()).abs().max() > SYMMETRY_TOL {
        return Err(ControlError::InvalidWeights(format!("{name} is not symmetric")));
    }
    let min_eig = m.symmetric_eigenvalues().min();
    let scale = m.abs().max().max(1.0);
    if definite && min_eig <= 0.0 {
        return Err(ControlError::InvalidWeights(format!(
            "{name} is not positive definite (min eigenvalue {min_eig:e})"
        )));
    }
    if !definite && min_eig < -1e-12 * scale {
        return Err(ControlError::InvalidWeights(format!(
            "{name} is not positive semidefinite (min eigenvalue {min_eig:e})"
        )));
    }
    Ok(())
}

impl GameWeights {
    pub fn dof(&self) -> usize {
        self.r_h.nrows()
    }

    pub fn validate(&self) -> Result<(), ControlError> {
        let d = self.r_h.nrows();
        if d == 0 {
            return Err(ControlError::InvalidWeights("empty input weights".into()));
        }
        for (name, q) in [
            ("Q_hh", &self.q_hh),
            ("Q_hr", &self.q_hr),
            ("Q_rh", &self.q_rh),
            ("Q_rr", &self.q_rr),
        ] {
            check_symmetric(name, q, 2 * d, false)?;
        }
        check_symmetric("R_h", &self.r_h, d, true)?;
        check_symmetric("R_r", &self.r_r, d, true)?;
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(ControlError::InvalidWeights(format!(
                "alpha must lie in (0, 1), got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

/// Blended weights of the shared cost.
#[derive(Debug, Clone, PartialEq)]
pub struct CostBlend {
    pub q_c: DMatrix<f64>,
    pub r_c: DMatrix<f64>,
    pub q_h: DMatrix<f64>,
    pub q_r: DMatrix<f64>,
}

pub fn combine_costs(w: &GameWeights) -> CostBlend {
    let a = w.alpha;
    let d = w.dof();
    let q_c = (&w.q_hh + &w.q_hr) * a + (&w.q_rh + &w.q_rr) * (1.0 - a);
    let mut r_c = DMatrix::zeros(2 * d, 2 * d);
    r_c.view_mut((0, 0), (d, d)).copy_from(&(&w.r_h * a));
    r_c.view_mut((d, d), (d, d)).copy_from(&(&w.r_r * (1.0 - a)));
    // each player's reference weight pairs its own block with the matching cross block
    let q_h = &w.q_hh * a + &w.q_hr * (1.0 - a);
    let q_r = &w.q_rh * a + &w.q_rr * (1.0 - a);
    CostBlend { q_c, r_c, q_h, q_r }
}

/// `K = R_c⁻¹ Bᵀ P`.
pub fn feedback_gain(p: &DMatrix<f64>, b: &DMatrix<f64>, r_c: &DMatrix<f64>) -> Result<DMatrix<f64>, ControlError> {
    let chol = r_c.clone().cholesky().ok_or(ControlError::InputWeightNotPd)?;
    Ok(chol.solve(&(b.transpose() * p)))
}

/// The assembled cooperative LQR. Immutable once built.
#[derive(Debug, Clone)]
pub struct GameController {
    dof: usize,
    a: DMatrix<f64>,
    b: DMatrix<f64>,
    blend: CostBlend,
    q_c_inv: Option<DMatrix<f64>>,
    p: DMatrix<f64>,
    k_gt: DMatrix<f64>,
    care_residual: f64,
}

impl GameController {
    pub fn new(plant: &PlantParams, weights: &GameWeights) -> Result<Self, ControlError> {
        plant
            .validate()
            .map_err(|e| ControlError::InvalidWeights(e.to_string()))?;
        weights.validate()?;
        if weights.dof() != plant.dof() {
            return Err(ControlError::InvalidWeights(format!(
                "weights are for {} DoF, plant has {}",
                weights.dof(),
                plant.dof()
            )));
        }
        let ss = build_state_space(plant);
        let b = ss.b();
        let blend = combine_costs(weights);
        let sol = solve_care(&ss.a, &b, &blend.q_c, &blend.r_c)?;
        let k_gt = feedback_gain(&sol.p, &b, &blend.r_c)?;
        if !is_hurwitz(&(&ss.a - &b * &k_gt)) {
            return Err(ControlError::Unstabilizable);
        }
        let q_c_inv = blend.q_c.clone().try_inverse();
        Ok(GameController {
            dof: plant.dof(),
            a: ss.a,
            b,
            blend,
            q_c_inv,
            p: sol.p,
            k_gt,
            care_residual: sol.residual,
        })
    }

    pub fn dof(&self) -> usize {
        self.dof
    }
    pub fn a(&self) -> &DMatrix<f64> {
        &self.a
    }
    pub fn b(&self) -> &DMatrix<f64> {
        &self.b
    }
    pub fn q_c(&self) -> &DMatrix<f64> {
        &self.blend.q_c
    }
    pub fn r_c(&self) -> &DMatrix<f64> {
        &self.blend.r_c
    }
    pub fn q_h(&self) -> &DMatrix<f64> {
        &self.blend.q_h
    }
    pub fn q_r(&self) -> &DMatrix<f64> {
        &self.blend.q_r
    }
    pub fn p(&self) -> &DMatrix<f64> {
        &self.p
    }
    pub fn k_gt(&self) -> &DMatrix<f64> {
        &self.k_gt
    }
    pub fn care_residual(&self) -> f64 {
        self.care_residual
    }

    pub fn closed_loop(&self) -> DMatrix<f64> {
        &self.a - &self.b * &self.k_gt
    }

    pub fn closed_loop_abscissa(&self) -> f64 {
        spectral_abscissa(&self.closed_loop())
    }

    /// `z_ref = Q_c⁻¹ (Q_h z_ref,h + Q_r z_ref,r)`.
    pub fn shared_reference(
        &self,
        z_ref_h: &DVector<f64>,
        z_ref_r: &DVector<f64>,
    ) -> Result<DVector<f64>, ControlError> {
        let inv = self.q_c_inv.as_ref().ok_or_else(|| {
            let q = &self.blend.q_c;
            let zero: Vec<usize> = (0..q.nrows()).filter(|&i| q.row(i).iter().all(|v| *v == 0.0)).collect();
            ControlError::SingularStateWeight(zero)
        })?;
        Ok(inv * (&self.blend.q_h * z_ref_h + &self.blend.q_r * z_ref_r))
    }

    /// Full game input `u = −K_gt (z − z_ref)`, human rows first.
    pub fn game_input(&self, z: &DVector<f64>, z_ref: &DVector<f64>) -> DVector<f64> {
        -(&self.k_gt * (z - z_ref))
    }

    /// Robot slice of the game input.
    pub fn robot_action(&self, z: &DVector<f64>, z_ref: &DVector<f64>) -> DVector<f64> {
        self.game_input(z, z_ref).rows(self.dof, self.dof).into_owned()
    }

    /// Plain-text dump of every matrix at full precision.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (name, m) in [
            ("A", &self.a),
            ("B", &self.b),
            ("Q_c", &self.blend.q_c),
            ("R_c", &self.blend.r_c),
            ("P", &self.p),
            ("K_gt", &self.k_gt),
        ] {
            out.push_str(&format!("{name} {} {}\n", m.nrows(), m.ncols()));
            for i in 0..m.nrows() {
                let row: Vec<String> = (0..m.ncols()).map(|j| format!("{:?}", m[(i, j)])).collect();
                out.push_str(&row.join(" "));
                out.push('\n');
            }
        }
        out
    }
}

/// Free-function form of [`GameController::shared_reference`].
pub fn shared_reference(
    z_ref_h: &DVector<f64>,
    z_ref_r: &DVector<f64>,
    ctrl: &GameController,
) -> Result<DVector<f64>, ControlError> {
    ctrl.shared_reference(z_ref_h, z_ref_r)
}

pub fn robot_action(ctrl: &GameController, z: &DVector<f64>, z_ref: &DVector<f64>) -> DVector<f64> {
    ctrl.robot_action(z, z_ref)
}

/// Builds a full-state reference from the `pick_index`-th (1-based) predicted
/// position; the velocity is the backward difference to the preceding point,
/// or to the measured position when `pick_index == 1`.
pub fn reference_from_prediction(
    prediction: &[Vec<f64>],
    current_x: &[f64],
    pick_index: usize,
    dt: f64,
) -> Result<DVector<f64>, ControlError> {
    if pick_index == 0 || pick_index > prediction.len() {
        return Err(ControlError::PickIndex {
            pick: pick_index,
            horizon: prediction.len(),
        });
    }
    let cur = &prediction[pick_index - 1];
    let prev = if pick_index == 1 {
        current_x
    } else {
        &prediction[pick_index - 2]
    };
    let d = cur.len();
    Ok(DVector::from_fn(2 * d, |i, _| {
        if i < d { cur[i] } else { (cur[i - d] - prev[i - d]) / dt }
    }))
}

/// Default pick index: the 20th point of the horizon.
pub const DEFAULT_PICK_INDEX: usize = 20;
