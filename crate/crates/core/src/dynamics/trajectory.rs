//! Nominal robot trajectories in the x-y plane.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::DynamicsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Linear,
    Curved,
    Sinusoidal,
    /// S-curve held out from training.
    Eval,
}

impl TrajectoryKind {
    pub const TRAINING: [TrajectoryKind; 3] = [
        TrajectoryKind::Linear,
        TrajectoryKind::Curved,
        TrajectoryKind::Sinusoidal,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TrajectoryKind::Linear => "linear",
            TrajectoryKind::Curved => "curved",
            TrajectoryKind::Sinusoidal => "sinusoidal",
            TrajectoryKind::Eval => "eval",
        }
    }
}

impl fmt::Display for TrajectoryKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrajectoryKind {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "linear" => Ok(TrajectoryKind::Linear),
            "curved" => Ok(TrajectoryKind::Curved),
            "sinusoidal" => Ok(TrajectoryKind::Sinusoidal),
            "eval" => Ok(TrajectoryKind::Eval),
            other => Err(DynamicsError::UnknownTrajectory(other.to_string())),
        }
    }
}

/// Shape parameters in meters. Which fields matter depends on the kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeParams {
    /// Chord length for linear and sinusoidal paths.
    pub length: f64,
    /// Arc radius for the curved path and for each quarter-arc of the S-curve.
    pub radius: f64,
    pub amplitude: f64,
    pub wavelength: f64,
}

impl ShapeParams {
    pub fn default_for(kind: TrajectoryKind) -> Self {
        ShapeParams {
            length: 0.4,
            radius: match kind {
                TrajectoryKind::Eval => 0.1,
                _ => 0.2,
            },
            amplitude: 0.05,
            wavelength: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub start: Vec<f64>,
    pub params: ShapeParams,
    pub duration: f64,
}

impl TrajectorySpec {
    pub fn new(kind: TrajectoryKind, dof: usize, duration: f64) -> Self {
        TrajectorySpec {
            kind,
            start: vec![0.0; dof],
            params: ShapeParams::default_for(kind),
            duration,
        }
    }

    pub fn dof(&self) -> usize {
        self.start.len()
    }

    pub fn validate(&self) -> Result<(), DynamicsError> {
        if self.start.is_empty() {
            return Err(DynamicsError::InvalidTrajectory("empty start point".into()));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            return Err(DynamicsError::InvalidTrajectory(format!(
                "duration must be positive, got {}",
                self.duration
            )));
        }
        let p = &self.params;
        if [p.length, p.radius, p.wavelength]
            .iter()
            .any(|v| !(v.is_finite() && *v > 0.0))
            || !p.amplitude.is_finite()
        {
            return Err(DynamicsError::InvalidTrajectory(
                "shape parameters must be positive and finite".into(),
            ));
        }
        Ok(())
    }

    /// In-plane offset from `start` at path fraction `s ∈ [0, 1]`.
    pub fn planar_offset(&self, s: f64) -> [f64; 2] {
        let s = s.clamp(0.0, 1.0);
        let p = &self.params;
        match self.kind {
            TrajectoryKind::Linear => [p.length * s, 0.0],
            TrajectoryKind::Curved => {
                let theta = PI * (1.0 - s);
                [p.radius + p.radius * theta.cos(), p.radius * theta.sin()]
            }
            TrajectoryKind::Sinusoidal => {
                let x = p.length * s;
                [x, p.amplitude * (2.0 * PI * x / p.wavelength).sin()]
            }
            TrajectoryKind::Eval => {
                // two opposite quarter-arcs, uniform in arc length
                let r = p.radius;
                if s <= 0.5 {
                    let phi = PI * s;
                    [r * phi.sin(), r - r * phi.cos()]
                } else {
                    let phi = PI * (s - 0.5);
                    [2.0 * r - r * phi.cos(), r + r * phi.sin()]
                }
            }
        }
    }

    fn embed(&self, offset: [f64; 2]) -> Vec<f64> {
        let mut out = self.start.clone();
        for (o, v) in out.iter_mut().zip(offset) {
            *o += v;
        }
        out
    }

    /// Position at time `t`; clamps to the endpoint once `t ≥ duration`.
    pub fn nominal_position(&self, t: f64) -> Result<Vec<f64>, DynamicsError> {
        if !(t >= 0.0) {
            return Err(DynamicsError::NegativeTime(t));
        }
        Ok(self.embed(self.planar_offset(t / self.duration)))
    }

    /// Position at path fraction `s`.
    pub fn position_at_fraction(&self, s: f64) -> Vec<f64> {
        self.embed(self.planar_offset(s))
    }
}

/// Free-function form of [`TrajectorySpec::nominal_position`].
pub fn nominal_position(spec: &TrajectorySpec, t: f64) -> Result<Vec<f64>, DynamicsError> {
    spec.nominal_position(t)
}

const ARC_SAMPLES: usize = 4000;

/// Arc-length table and tangents of a trajectory, sampled uniformly in path fraction.
#[derive(Debug, Clone)]
pub struct PathGeometry {
    points: Vec<[f64; 2]>,
    arc: Vec<f64>,
}

impl PathGeometry {
    pub fn new(spec: &TrajectorySpec) -> Self {
        let points: Vec<[f64; 2]> = (0..=ARC_SAMPLES)
            .map(|i| spec.planar_offset(i as f64 / ARC_SAMPLES as f64))
            .collect();
        let mut arc = Vec::with_capacity(points.len());
        arc.push(0.0);
        for w in points.windows(2) {
            let ds = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
            arc.push(arc.last().unwrap() + ds);
        }
        PathGeometry { points, arc }
    }

    pub fn total_length(&self) -> f64 {
        *self.arc.last().unwrap()
    }

    fn locate(&self, s: f64) -> (usize, f64) {
        let u = s.clamp(0.0, 1.0) * ARC_SAMPLES as f64;
        let i = (u.floor() as usize).min(ARC_SAMPLES - 1);
        (i, u - i as f64)
    }

    /// Arc length travelled at path fraction `s`.
    pub fn arc_at(&self, s: f64) -> f64 {
        let (i, frac) = self.locate(s);
        self.arc[i] + frac * (self.arc[i + 1] - self.arc[i])
    }

    /// Path fraction at which `arc` meters have been travelled.
    pub fn fraction_at_arc(&self, arc: f64) -> f64 {
        let arc = arc.clamp(0.0, self.total_length());
        let i = self.arc.partition_point(|a| *a < arc).clamp(1, ARC_SAMPLES);
        let (a0, a1) = (self.arc[i - 1], self.arc[i]);
        let frac = if a1 > a0 { (arc - a0) / (a1 - a0) } else { 0.0 };
        ((i - 1) as f64 + frac) / ARC_SAMPLES as f64
    }

    /// Unit tangent at path fraction `s`. Zero-speed samples fall back to the
    /// nearest earlier non-degenerate segment.
    pub fn tangent_at(&self, s: f64) -> [f64; 2] {
        let (mut i, _) = self.locate(s);
        loop {
            let (p0, p1) = (self.points[i], self.points[i + 1]);
            let (dx, dy) = (p1[0] - p0[0], p1[1] - p0[1]);
            let n = (dx * dx + dy * dy).sqrt();
            if n > 1e-15 {
                return [dx / n, dy / n];
            }
            if i == 0 {
                return [1.0, 0.0];
            }
            i -= 1;
        }
    }
}
