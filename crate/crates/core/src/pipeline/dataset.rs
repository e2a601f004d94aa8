//! Sliding windows over episodes and the normalization fitted on them.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::dynamics::Episode;
use crate::error::PipelineError;
use crate::net::{Batch, Normalization, PredictorModel};

/// What the predictor is trained to output.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSource {
    /// Future measured positions.
    #[default]
    Measured,
    /// Future synthetic intent, available only in simulation.
    Intent,
}

/// Number of complete windows in an episode of length `len`.
pub fn window_count(len: usize, k: usize, n: usize) -> usize {
    (len + 1).saturating_sub(k + n)
}

/// All `(input k × 4d, target N × d)` pairs of an episode. The input holds
/// rows `e−k+1..=e` and the target the positions at `e+1..=e+N`.
pub fn make_windows(episode: &Episode, k: usize, n: usize) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    make_windows_with(episode, k, n, TargetSource::Measured)
}

pub fn make_windows_with(
    episode: &Episode,
    k: usize,
    n: usize,
    target: TargetSource,
) -> Vec<(DMatrix<f64>, DMatrix<f64>)> {
    let table = FeatureTable::new(episode, target);
    (0..window_count(episode.len(), k, n))
        .map(|w| {
            let end = w + k - 1;
            (table.window(end, k), table.target(end, n))
        })
        .collect()
}

/// Per-episode feature rows and target rows, flattened for fast window assembly.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub dof: usize,
    /// `len × 4d`, row-major.
    pub features: Vec<f64>,
    /// `len × d`, row-major.
    pub targets: Vec<f64>,
    pub len: usize,
}

impl FeatureTable {
    pub fn new(episode: &Episode, target: TargetSource) -> Self {
        let d = episode.dof();
        let mut features = Vec::with_capacity(episode.len() * 4 * d);
        let mut targets = Vec::with_capacity(episode.len() * d);
        for (i, r) in episode.records.iter().enumerate() {
            features.extend(episode.features(i));
            match target {
                TargetSource::Measured => targets.extend(&r.x),
                TargetSource::Intent => targets.extend(&r.x_ref_h_true),
            }
        }
        FeatureTable {
            dof: d,
            features,
            targets,
            len: episode.len(),
        }
    }

    fn feature(&self, row: usize, j: usize) -> f64 {
        self.features[row * 4 * self.dof + j]
    }

    fn target_value(&self, row: usize, axis: usize) -> f64 {
        self.targets[row * self.dof + axis]
    }

    pub fn window(&self, end: usize, k: usize) -> DMatrix<f64> {
        let f = 4 * self.dof;
        DMatrix::from_fn(k, f, |i, j| self.feature(end + 1 + i - k, j))
    }

    pub fn target(&self, end: usize, n: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, self.dof, |i, a| self.target_value(end + 1 + i, a))
    }
}

/// A window identified by episode index and the index of its last input row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowRef {
    pub episode: usize,
    pub end: usize,
}

/// Episodes prepared for training: feature tables plus the selected windows.
#[derive(Debug, Clone)]
pub struct WindowSet {
    pub k: usize,
    pub n: usize,
    pub tables: Vec<FeatureTable>,
    pub windows: Vec<WindowRef>,
}

impl WindowSet {
    /// Every `stride`-th window of every episode.
    pub fn new(episodes: &[Episode], k: usize, n: usize, stride: usize, target: TargetSource) -> Self {
        let stride = stride.max(1);
        let tables: Vec<FeatureTable> = episodes.iter().map(|e| FeatureTable::new(e, target)).collect();
        let mut windows = Vec::new();
        for (ei, t) in tables.iter().enumerate() {
            let count = window_count(t.len, k, n);
            windows.extend((0..count).step_by(stride).map(|w| WindowRef {
                episode: ei,
                end: w + k - 1,
            }));
        }
        WindowSet { k, n, tables, windows }
    }

    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// Normalized batch of the given windows, built without per-window allocation.
    pub fn batch(&self, model: &PredictorModel, refs: &[WindowRef]) -> Batch {
        let norm = &model.norm;
        let d = self.tables.first().map_or(model.config.dof, |t| t.dof);
        let f = 4 * d;
        let b = refs.len();
        let steps = (0..self.k)
            .map(|i| {
                DMatrix::from_fn(f, b, |j, s| {
                    let r = refs[s];
                    let row = r.end + 1 + i - self.k;
                    (self.tables[r.episode].feature(row, j) - norm.input_mean[j]) / norm.input_scale[j]
                })
            })
            .collect();
        let targets = DMatrix::from_fn(self.n * d, b, |o, s| {
            let r = refs[s];
            let axis = o % d;
            let row = r.end + 1 + o / d;
            (self.tables[r.episode].target_value(row, axis) - norm.output_mean[axis]) / norm.output_scale[axis]
        });
        Batch {
            steps,
            targets: Some(targets),
        }
    }

    /// Population statistics over every input row and target row of every
    /// selected window, counting overlaps with multiplicity.
    pub fn fit_normalization(&self) -> Result<Normalization, PipelineError> {
        if self.windows.is_empty() {
            return Err(PipelineError::EmptyDataset);
        }
        let d = self.tables[0].dof;
        let f = 4 * d;
        let mut in_count: Vec<Vec<u32>> = self.tables.iter().map(|t| vec![0; t.len]).collect();
        let mut out_count = in_count.clone();
        for w in &self.windows {
            in_count[w.episode][w.end + 1 - self.k..=w.end]
                .iter_mut()
                .for_each(|c| *c += 1);
            out_count[w.episode][w.end + 1..=w.end + self.n]
                .iter_mut()
                .for_each(|c| *c += 1);
        }
        let input = weighted_moments(
            f,
            self.tables
                .iter()
                .zip(&in_count)
                .flat_map(|(t, c)| (0..t.len).map(move |r| (c[r], &t.features[r * f..(r + 1) * f]))),
        );
        let output = weighted_moments(
            d,
            self.tables
                .iter()
                .zip(&out_count)
                .flat_map(|(t, c)| (0..t.len).map(move |r| (c[r], &t.targets[r * d..(r + 1) * d]))),
        );
        Ok(Normalization {
            input_mean: input.0,
            input_scale: input.1,
            output_mean: output.0,
            output_scale: output.1,
        })
    }
}

/// Weighted mean and population standard deviation per column (two-pass);
/// zero-variance columns get scale 1.
fn weighted_moments<'a>(width: usize, rows: impl Iterator<Item = (u32, &'a [f64])> + Clone) -> (Vec<f64>, Vec<f64>) {
    let mut total = 0.0;
    let mut mean = vec![0.0; width];
    for (c, r) in rows.clone() {
        if c == 0 {
            continue;
        }
        total += c as f64;
        for (m, v) in mean.iter_mut().zip(r) {
            *m += c as f64 * v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= total);
    let mut var = vec![0.0; width];
    for (c, r) in rows {
        if c == 0 {
            continue;
        }
        for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
            *s += c as f64 * (v - m).powi(2);
        }
    }
    let scale = var
        .iter()
        .map(|s| {
            let sd = (s / total).sqrt();
            if sd > 1e-12 { sd } else { 1.0 }
        })
        .collect();
    (mean, scale)
}

/// Normalization fitted on explicit window pairs.
pub fn fit_normalization(windows: &[(DMatrix<f64>, DMatrix<f64>)]) -> Result<Normalization, PipelineError> {
    let (first_in, first_out) = windows.first().ok_or(PipelineError::EmptyDataset)?;
    let (f, d) = (first_in.ncols(), first_out.ncols());
    let inputs: Vec<Vec<f64>> = windows
        .iter()
        .flat_map(|(w, _)| w.row_iter().map(|r| r.iter().copied().collect()).collect::<Vec<_>>())
        .collect();
    let outputs: Vec<Vec<f64>> = windows
        .iter()
        .flat_map(|(_, t)| t.row_iter().map(|r| r.iter().copied().collect()).collect::<Vec<_>>())
        .collect();
    let input = weighted_moments(f, inputs.iter().map(|r| (1, r.as_slice())));
    let output = weighted_moments(d, outputs.iter().map(|r| (1, r.as_slice())));
    Ok(Normalization {
        input_mean: input.0,
        input_scale: input.1,
        output_mean: output.0,
        output_scale: output.1,
    })
}

/// Where a set of episodes came from.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub collected_with: Option<String>,
    pub iteration: Option<usize>,
    /// User or object identifier, e.g. `operator-0` or `new_user`.
    pub context: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub episodes: Vec<String>,
}

/// A collection of episodes with provenance.
#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub episodes: Vec<Episode>,
    pub provenance: Provenance,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    /// Writes one file pair per episode plus `manifest.json`.
    pub fn save(&self, dir: &Path) -> Result<(), PipelineError> {
        fs::create_dir_all(dir).map_err(|e| PipelineError::io(dir, e))?;
        let mut names = Vec::with_capacity(self.episodes.len());
        for (i, ep) in self.episodes.iter().enumerate() {
            let stem = format!("episode_{i:04}");
            ep.save(dir, &stem)?;
            names.push(stem);
        }
        let manifest = Manifest {
            schema_version: crate::dynamics::EPISODE_SCHEMA_VERSION,
            provenance: self.provenance.clone(),
            episodes: names,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
        fs::write(&path, text).map_err(|e| PipelineError::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self, PipelineError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| PipelineError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| PipelineError::Format {
            path: path.clone(),
            message: e.to_string(),
        })?;
        let episodes = manifest
            .episodes
            .iter()
            .map(|stem| Episode::load(dir, stem))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Dataset {
            episodes,
            provenance: manifest.provenance,
        })
    }
}
