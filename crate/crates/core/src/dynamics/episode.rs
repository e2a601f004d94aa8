//! Recorded rollouts and their on-disk format.
//!
//! An episode is stored as two files: `<stem>.jsonl` holds one JSON record per
//! line, `<stem>.meta.json` holds the metadata document. `to_csv` produces a
//! flat table for plotting.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::human::{HumanModel, Obstacle};
use super::plant::PlantParams;
use super::trajectory::TrajectorySpec;
use crate::error::{DynamicsError, PipelineError};

pub const EPISODE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ControllerKind {
    /// Manual guidance: zero stiffness, no assistance.
    #[serde(rename = "MG")]
    ManualGuidance,
    /// Impedance tracking of the nominal path, no assistance.
    #[serde(rename = "IMP")]
    Impedance,
    /// Cooperative game-theoretic assistance.
    #[serde(rename = "GT")]
    Game,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::ManualGuidance,
        ControllerKind::Impedance,
        ControllerKind::Game,
    ];

    pub fn tag(&self) -> &'static str {
        match self {
            ControllerKind::ManualGuidance => "MG",
            ControllerKind::Impedance => "IMP",
            ControllerKind::Game => "GT",
        }
    }
}

impl fmt::Display for ControllerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ControllerKind {
    type Err = DynamicsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "MG" => Ok(ControllerKind::ManualGuidance),
            "IMP" => Ok(ControllerKind::Impedance),
            "GT" => Ok(ControllerKind::Game),
            _ => Err(DynamicsError::UnknownController(s.to_string())),
        }
    }
}

/// One sample of a rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub t: f64,
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub u_h: Vec<f64>,
    pub x_ref_r: Vec<f64>,
    pub x_ref_h_true: Vec<f64>,
    pub u_r: Vec<f64>,
    pub tag: ControllerKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMeta {
    pub schema_version: u32,
    pub plant: PlantParams,
    pub trajectory: TrajectorySpec,
    pub obstacle: Option<Obstacle>,
    pub human: HumanModel,
    /// Identifier of the predictor in the loop during collection, if any.
    pub model_id: Option<String>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub meta: EpisodeMeta,
    pub records: Vec<Record>,
}

impl Episode {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dof(&self) -> usize {
        self.meta.plant.dof()
    }

    pub fn dt(&self) -> f64 {
        self.meta.plant.dt
    }

    /// Predictor input features of record `i`: `[x, v, u_h, x_ref_r]`.
    pub fn features(&self, i: usize) -> impl Iterator<Item = f64> + '_ {
        let r = &self.records[i];
        r.x.iter().chain(&r.v).chain(&r.u_h).chain(&r.x_ref_r).copied()
    }

    pub fn positions(&self) -> Vec<Vec<f64>> {
        self.records.iter().map(|r| r.x.clone()).collect()
    }

    /// Checks the structural invariants: uniform time step, consistent widths.
    pub fn validate(&self) -> Result<(), String> {
        if self.records.is_empty() {
            return Err("episode has no records".into());
        }
        let d = self.dof();
        let dt = self.dt();
        for (i, r) in self.records.iter().enumerate() {
            let widths = [
                r.x.len(),
                r.v.len(),
                r.u_h.len(),
                r.x_ref_r.len(),
                r.x_ref_h_true.len(),
                r.u_r.len(),
            ];
            if widths.iter().any(|w| *w != d) {
                return Err(format!("record {i} has vectors of width {widths:?}, expected {d}"));
            }
            let expected = i as f64 * dt;
            if (r.t - expected).abs() > 1e-9 * expected.max(1.0) {
                return Err(format!("record {i} at t={} but expected {expected}", r.t));
            }
        }
        Ok(())
    }

    pub fn record_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join(format!("{stem}.jsonl"))
    }

    pub fn meta_path(dir: &Path, stem: &str) -> PathBuf {
        dir.join(format!("{stem}.meta.json"))
    }

    /// Writes `<stem>.jsonl` and `<stem>.meta.json` into `dir`.
    pub fn save(&self, dir: &Path, stem: &str) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let rec_path = Self::record_path(dir, stem);
        let file = fs::File::create(&rec_path).map_err(|e| PipelineError::io(&rec_path, e))?;
        let mut w = BufWriter::new(file);
        for r in &self.records {
            serde_json::to_writer(&mut w, r).map_err(|e| PipelineError::Format {
                path: rec_path.clone(),
                message: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(|e| PipelineError::io(&rec_path, e))?;
        }
        w.flush().map_err(|e| PipelineError::io(&rec_path, e))?;

        let meta_path = Self::meta_path(dir, stem);
        let meta = serde_json::to_string_pretty(&self.meta).map_err(|e| PipelineError::Format {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        fs::write(&meta_path, meta).map_err(|e| PipelineError::io(&meta_path, e))
    }

    pub fn load(dir: &Path, stem: &str) -> Result<Self, PipelineError> {
        let meta_path = Self::meta_path(dir, stem);
        let text = fs::read_to_string(&meta_path).map_err(|e| PipelineError::io(&meta_path, e))?;
        let meta: EpisodeMeta = serde_json::from_str(&text).map_err(|e| PipelineError::Format {
            path: meta_path.clone(),
            message: e.to_string(),
        })?;
        if meta.schema_version != EPISODE_SCHEMA_VERSION {
            return Err(PipelineError::Format {
                path: meta_path,
                message: format!("unsupported schema_version {}", meta.schema_version),
            });
        }

        let rec_path = Self::record_path(dir, stem);
        let file = fs::File::open(&rec_path).map_err(|e| PipelineError::io(&rec_path, e))?;
        let mut records = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| PipelineError::io(&rec_path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let r: Record = serde_json::from_str(&line).map_err(|e| PipelineError::Format {
                path: rec_path.clone(),
                message: format!("line {}: {e}", i + 1),
            })?;
            records.push(r);
        }
        let ep = Episode { meta, records };
        ep.validate().map_err(|message| PipelineError::Format {
            path: rec_path,
            message,
        })?;
        Ok(ep)
    }

    /// Flat CSV: `t,x0..,v0..,u_h0..,x_ref_r0..,x_ref_h0..,u_r0..,tag`.
    pub fn to_csv(&self) -> String {
        let d = self.dof();
        let mut out = String::from("t");
        for group in ["x", "v", "u_h", "x_ref_r", "x_ref_h", "u_r"] {
            for i in 0..d {
                out.push_str(&format!(",{group}{i}"));
            }
        }
        out.push_str(",tag\n");
        for r in &self.records {
            out.push_str(&r.t.to_string());
            for v in
                r.x.iter()
                    .chain(&r.v)
                    .chain(&r.u_h)
                    .chain(&r.x_ref_r)
                    .chain(&r.x_ref_h_true)
                    .chain(&r.u_r)
            {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push(',');
            out.push_str(r.tag.tag());
            out.push('\n');
        }
        out
    }
}
