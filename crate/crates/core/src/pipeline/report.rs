//! Evaluation reports and their CSV form.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::{PredictionWindow, e_max, e_rms, f_rms, outcome_windows};
use crate::dynamics::{SimOutcome, TrajectoryKind};
use crate::error::PipelineError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonStats {
    pub horizon: usize,
    pub e_rms: f64,
    pub e_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeEval {
    pub index: usize,
    pub kind: TrajectoryKind,
    pub f_rms: f64,
    /// Per-horizon e_RMS of this episode alone.
    pub e_rms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model_id: String,
    pub seed: u64,
    pub horizons: Vec<HorizonStats>,
    /// Mean over episodes of the per-episode f_RMS.
    pub f_rms: f64,
    pub episodes: Vec<EpisodeEval>,
}

pub const CSV_HEADER: &str = "model,horizon,e_rms,e_max,f_rms,seed";

impl EvalReport {
    /// Pools the prediction windows of all episodes; e_RMS and e_MAX are over the pooled set.
    pub fn from_outcomes(
        model_id: &str,
        seed: u64,
        outcomes: &[SimOutcome],
        window_k: usize,
        horizon_n: usize,
        horizons: &[usize],
    ) -> Result<Self, PipelineError> {
        let mut pooled: Vec<PredictionWindow> = Vec::new();
        let mut episodes = Vec::with_capacity(outcomes.len());
        for (i, o) in outcomes.iter().enumerate() {
            let ws = outcome_windows(o, window_k, horizon_n)?;
            let per = horizons.iter().map(|&h| e_rms(&ws, h)).collect::<Result<Vec<_>, _>>()?;
            episodes.push(EpisodeEval {
                index: i,
                kind: o.episode.meta.trajectory.kind,
                f_rms: f_rms(&o.episode)?,
                e_rms: per,
            });
            pooled.extend(ws);
        }
        let stats = horizons
            .iter()
            .map(|&h| {
                Ok(HorizonStats {
                    horizon: h,
                    e_rms: e_rms(&pooled, h)?,
                    e_max: e_max(&pooled, h)?,
                })
            })
            .collect::<Result<Vec<_>, PipelineError>>()?;
        let f = episodes.iter().map(|e| e.f_rms).sum::<f64>() / episodes.len().max(1) as f64;
        Ok(EvalReport {
            model_id: model_id.to_string(),
            seed,
            horizons: stats,
            f_rms: f,
            episodes,
        })
    }

    pub fn at(&self, horizon: usize) -> Option<&HorizonStats> {
        self.horizons.iter().find(|h| h.horizon == horizon)
    }

    /// Stats at the longest reported horizon.
    pub fn longest(&self) -> &HorizonStats {
        self.horizons
            .iter()
            .max_by_key(|h| h.horizon)
            .expect("report has at least one horizon")
    }

    pub fn shortest(&self) -> &HorizonStats {
        self.horizons
            .iter()
            .min_by_key(|h| h.horizon)
            .expect("report has at least one horizon")
    }

    /// CSV rows without the header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for h in &self.horizons {
            writeln!(
                out,
                "{},{},{:?},{:?},{:?},{}",
                self.model_id, h.horizon, h.e_rms, h.e_max, self.f_rms, self.seed
            )
            .unwrap();
        }
        out
    }
}

/// Header plus the rows of every report.
pub fn reports_csv<'a>(reports: impl IntoIterator<Item = &'a EvalReport>) -> String {
    let mut out = format!("{CSV_HEADER}\n");
    for r in reports {
        out.push_str(&r.csv_rows());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_shape() {
        let r = EvalReport {
            model_id: "M0".into(),
            seed: 3,
            horizons: [2, 5, 10]
                .iter()
                .map(|&h| HorizonStats {
                    horizon: h,
                    e_rms: 0.001,
                    e_max: 0.002,
                })
                .collect(),
            f_rms: 1.5,
            episodes: vec![],
        };
        let csv = reports_csv([&r, &r]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], CSV_HEADER);
        assert_eq!(lines[1], "M0,2,0.001,0.002,1.5,3");
        assert_eq!(r.longest().horizon, 10);
        assert_eq!(r.shortest().horizon, 2);
    }
}
