//! Synthetic human partner: an obstacle-avoiding intent generator and a
//! spring-damper limb that pulls the end-effector toward that intent.

use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use super::trajectory::{PathGeometry, TrajectorySpec};
use crate::error::DynamicsError;

/// Obstacle sitting on the nominal path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Obstacle {
    pub center: Vec<f64>,
    pub half_width: f64,
    /// Fraction of the path arc length at which the obstacle sits.
    pub arc_fraction: f64,
}

/// Obstacle placement band and size.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObstaclePlacement {
    pub arc_min: f64,
    pub arc_max: f64,
    pub half_width: f64,
}

impl Default for ObstaclePlacement {
    fn default() -> Self {
        ObstaclePlacement {
            arc_min: 0.25,
            arc_max: 0.75,
            half_width: 0.02,
        }
    }
}

impl Obstacle {
    /// Places an obstacle on the path at the given arc fraction.
    pub fn on_path(
        spec: &TrajectorySpec,
        arc_fraction: f64,
        half_width: f64,
        placement: &ObstaclePlacement,
    ) -> Result<Self, DynamicsError> {
        if !(half_width > 0.0) {
            return Err(DynamicsError::InvalidObstacle(format!(
                "half_width must be positive, got {half_width}"
            )));
        }
        if !(placement.arc_min..=placement.arc_max).contains(&arc_fraction) {
            return Err(DynamicsError::InvalidObstacle(format!(
                "arc fraction {arc_fraction} outside [{}, {}]",
                placement.arc_min, placement.arc_max
            )));
        }
        let geom = PathGeometry::new(spec);
        let s = geom.fraction_at_arc(arc_fraction * geom.total_length());
        Ok(Obstacle {
            center: spec.position_at_fraction(s),
            half_width,
            arc_fraction,
        })
    }

    pub fn random<R: Rng + ?Sized>(
        spec: &TrajectorySpec,
        placement: &ObstaclePlacement,
        rng: &mut R,
    ) -> Result<Self, DynamicsError> {
        let frac = rng.random_range(placement.arc_min..=placement.arc_max);
        Obstacle::on_path(spec, frac, placement.half_width, placement)
    }
}

/// Spring-damper limb model plus the shape of its obstacle detour.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanModel {
    pub id: String,
    /// Diagonal limb stiffness (N/m).
    pub stiffness: Vec<f64>,
    /// Diagonal limb damping (N·s/m).
    pub damping: Vec<f64>,
    pub detour_amplitude: f64,
    /// Width of the detour bump in meters of arc length.
    pub detour_sigma: f64,
    pub force_cap: f64,
    /// Standard deviation of additive Gaussian noise on the applied force (N).
    #[serde(default)]
    pub force_noise_std: f64,
}

impl HumanModel {
    pub fn default_for(dof: usize) -> Self {
        HumanModel {
            id: "operator-0".into(),
            stiffness: vec![300.0; dof],
            damping: vec![30.0; dof],
            detour_amplitude: 0.02 + 0.03,
            detour_sigma: 0.05,
            force_cap: 30.0,
            force_noise_std: 0.0,
        }
    }

    pub fn dof(&self) -> usize {
        self.stiffness.len()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.damping.len() != self.stiffness.len() {
            return Err(DynamicsError::InvalidHuman("gain lengths differ".into()));
        }
        if self
            .stiffness
            .iter()
            .chain(&self.damping)
            .any(|g| !(g.is_finite() && *g >= 0.0))
        {
            return Err(DynamicsError::InvalidHuman("gains must be non-negative".into()));
        }
        if !(self.force_cap > 0.0) {
            return Err(DynamicsError::InvalidHuman("force_cap must be positive".into()));
        }
        if !(self.detour_sigma > 0.0) || !(self.detour_amplitude >= 0.0) {
            return Err(DynamicsError::InvalidHuman("invalid detour shape".into()));
        }
        if !(self.force_noise_std >= 0.0) {
            return Err(DynamicsError::InvalidHuman("noise std must be non-negative".into()));
        }
        Ok(())
    }

    /// A different operator: both gains multiplied by `factor`.
    pub fn scaled(&self, factor: f64, id: impl Into<String>) -> Self {
        HumanModel {
            id: id.into(),
            stiffness: self.stiffness.iter().map(|k| k * factor).collect(),
            damping: self.damping.iter().map(|c| c * factor).collect(),
            ..self.clone()
        }
    }

    /// Random new operator with independent per-gain factors drawn from `[lo, hi]`.
    pub fn perturbed<R: Rng + ?Sized>(&self, lo: f64, hi: f64, rng: &mut R, id: impl Into<String>) -> Self {
        let ks = rng.random_range(lo..=hi);
        let cs = rng.random_range(lo..=hi);
        HumanModel {
            id: id.into(),
            stiffness: self.stiffness.iter().map(|k| k * ks).collect(),
            damping: self.damping.iter().map(|c| c * cs).collect(),
            ..self.clone()
        }
    }
}

/// Time-indexed intent `x_ref,h(t)`: the nominal path plus a Gaussian lateral
/// bump centered on the obstacle.
#[derive(Debug, Clone)]
pub struct IntentField {
    spec: TrajectorySpec,
    geometry: PathGeometry,
    bump: Option<(f64, f64, f64)>,
}

impl IntentField {
    pub fn new(spec: &TrajectorySpec, obstacle: Option<&Obstacle>, human: &HumanModel) -> Result<Self, DynamicsError> {
        spec.validate()?;
        let geometry = PathGeometry::new(spec);
        let bump = match obstacle {
            Some(o) if human.detour_amplitude > 0.0 => {
                if spec.dof() < 2 {
                    return Err(DynamicsError::InvalidObstacle(
                        "obstacle detours need at least two axes".into(),
                    ));
                }
                Some((
                    o.arc_fraction * geometry.total_length(),
                    human.detour_amplitude,
                    human.detour_sigma,
                ))
            }
            _ => None,
        };
        Ok(IntentField {
            spec: spec.clone(),
            geometry,
            bump,
        })
    }

    pub fn at(&self, t: f64) -> Result<Vec<f64>, DynamicsError> {
        let mut p = self.spec.nominal_position(t)?;
        if let Some((center, amp, sigma)) = self.bump {
            let s = (t / self.spec.duration).clamp(0.0, 1.0);
            let arc = self.geometry.arc_at(s);
            let mag = amp * (-(arc - center).powi(2) / (2.0 * sigma * sigma)).exp();
            let [tx, ty] = self.geometry.tangent_at(s);
            // left normal of the direction of travel
            p[0] += -ty * mag;
            p[1] += tx * mag;
        }
        Ok(p)
    }

    /// Arc position of the bump peak, if any.
    pub fn bump_center_arc(&self) -> Option<f64> {
        self.bump.map(|b| b.0)
    }

    pub fn geometry(&self) -> &PathGeometry {
        &self.geometry
    }
}

pub fn human_intent(
    spec: &TrajectorySpec,
    obstacle: Option<&Obstacle>,
    human: &HumanModel,
    t: f64,
) -> Result<Vec<f64>, DynamicsError> {
    IntentField::new(spec, obstacle, human)?.at(t)
}

/// Attractive spring-damper: `clamp(K_h (x_ref,h − x) − C_h v, cap)`, clamped in norm.
pub fn human_force(human: &HumanModel, x: &[f64], v: &[f64], x_ref_h: &[f64]) -> Vec<f64> {
    let f: Vec<f64> = (0..x.len())
        .map(|i| human.stiffness[i] * (x_ref_h[i] - x[i]) - human.damping[i] * v[i])
        .collect();
    clamp_norm(f, human.force_cap)
}

pub(crate) fn clamp_norm(mut f: Vec<f64>, cap: f64) -> Vec<f64> {
    let n = f.iter().map(|c| c * c).sum::<f64>().sqrt();
    if n > cap {
        let s = cap / n;
        f.iter_mut().for_each(|c| *c *= s);
    }
    f
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::trajectory::TrajectoryKind;

    fn norm(v: &[f64]) -> f64 {
        v.iter().map(|c| c * c).sum::<f64>().sqrt()
    }

    fn setup(kind: TrajectoryKind) -> (TrajectorySpec, Obstacle, HumanModel) {
        let spec = TrajectorySpec::new(kind, 2, 10.0);
        let obs = Obstacle::on_path(&spec, 0.5, 0.02, &ObstaclePlacement::default()).unwrap();
        (spec, obs, HumanModel::default_for(2))
    }

    #[test]
    fn force_at_equilibrium_is_zero() {
        let h = HumanModel::default_for(2);
        assert_eq!(human_force(&h, &[0.1, 0.2], &[0.0, 0.0], &[0.1, 0.2]), vec![0.0, 0.0]);
    }

    #[test]
    fn force_pd_arithmetic() {
        let h = HumanModel::default_for(1);
        let f = human_force(&h, &[0.0], &[0.0], &[0.01]);
        assert!((f[0] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn force_is_capped() {
        let h = HumanModel::default_for(2);
        let f = human_force(&h, &[0.0, 0.0], &[-3.0, 1.0], &[1.0, -2.0]);
        assert!((norm(&f) - 30.0).abs() < 1e-9);
    }

    #[test]
    fn detour_peaks_at_obstacle() {
        for kind in TrajectoryKind::TRAINING.into_iter().chain([TrajectoryKind::Eval]) {
            let (spec, obs, human) = setup(kind);
            let field = IntentField::new(&spec, Some(&obs), &human).unwrap();
            let geom = field.geometry();
            let s = geom.fraction_at_arc(field.bump_center_arc().unwrap());
            let t = s * spec.duration;
            let offset: Vec<f64> = field
                .at(t)
                .unwrap()
                .iter()
                .zip(spec.nominal_position(t).unwrap())
                .map(|(a, b)| a - b)
                .collect();
            assert!(
                (norm(&offset) - human.detour_amplitude).abs() < 1e-6,
                "{kind}: {}",
                norm(&offset)
            );
        }
    }

    #[test]
    fn detour_vanishes_far_from_obstacle() {
        let (spec, obs, human) = setup(TrajectoryKind::Linear);
        let field = IntentField::new(&spec, Some(&obs), &human).unwrap();
        let center = field.bump_center_arc().unwrap();
        for i in 0..=1000 {
            let t = spec.duration * i as f64 / 1000.0;
            let arc = field.geometry().arc_at(t / spec.duration);
            if (arc - center).abs() >= 4.0 * human.detour_sigma {
                let nominal = spec.nominal_position(t).unwrap();
                let off: Vec<f64> = field.at(t).unwrap().iter().zip(&nominal).map(|(a, b)| a - b).collect();
                assert!(norm(&off) < 1e-3 * human.detour_amplitude);
            }
        }
    }

    #[test]
    fn no_obstacle_means_nominal() {
        let (spec, _, human) = setup(TrajectoryKind::Sinusoidal);
        for t in [0.0, 1.3, 5.0, 9.9] {
            assert_eq!(
                human_intent(&spec, None, &human, t).unwrap(),
                spec.nominal_position(t).unwrap()
            );
        }
    }

    #[test]
    fn obstacle_placement_band_enforced() {
        let spec = TrajectorySpec::new(TrajectoryKind::Linear, 2, 10.0);
        let band = ObstaclePlacement::default();
        assert!(Obstacle::on_path(&spec, 0.1, 0.02, &band).is_err());
        assert!(Obstacle::on_path(&spec, 0.5, 0.0, &band).is_err());
        let o = Obstacle::on_path(&spec, 0.5, 0.02, &band).unwrap();
        assert!((o.center[0] - 0.2).abs() < 1e-9);
    }

    #[test]
    fn intent_is_continuous() {
        // nominal speed ≤ 0.07 m/s on these paths; the bump adds ≤ A/σ·e^{-1/2}·speed
        let v_max = 0.2;
        let dt = 0.008;
        for kind in TrajectoryKind::TRAINING.into_iter().chain([TrajectoryKind::Eval]) {
            let (spec, obs, human) = setup(kind);
            let field = IntentField::new(&spec, Some(&obs), &human).unwrap();
            let mut prev = field.at(0.0).unwrap();
            for n in 1..1250 {
                let cur = field.at(n as f64 * dt).unwrap();
                let step: Vec<f64> = cur.iter().zip(&prev).map(|(a, b)| a - b).collect();
                assert!(norm(&step) < v_max * dt, "{kind} at step {n}");
                prev = cur;
            }
        }
    }
}
