//! Prediction error, interaction force, and the two-sample test.

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::dynamics::{Episode, SimOutcome};
use crate::error::PipelineError;

/// One stored prediction and the measured positions at the predicted instants.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionWindow {
    pub step: usize,
    pub predicted: Vec<Vec<f64>>,
    pub measured: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(u, v)| (u - v).powi(2)).sum()
}

/// RMS of the point errors over the first `n` horizon steps of one window.
pub fn window_rms(w: &PredictionWindow, n: usize) -> Result<f64, PipelineError> {
    let available = w.predicted.len().min(w.measured.len());
    if n == 0 || n > available {
        return Err(PipelineError::Horizon { n, available });
    }
    let sum: f64 = (0..n).map(|j| sq_dist(&w.predicted[j], &w.measured[j])).sum();
    Ok((sum / n as f64).sqrt())
}

/// Mean over windows of the per-window RMS, truncated to `n` steps.
pub fn e_rms(windows: &[PredictionWindow], n: usize) -> Result<f64, PipelineError> {
    if windows.is_empty() {
        return Err(PipelineError::Insufficient("no prediction windows".into()));
    }
    let mut sum = 0.0;
    for w in windows {
        sum += window_rms(w, n)?;
    }
    Ok(sum / windows.len() as f64)
}

/// Largest per-window RMS, truncated to `n` steps.
pub fn e_max(windows: &[PredictionWindow], n: usize) -> Result<f64, PipelineError> {
    if windows.is_empty() {
        return Err(PipelineError::Insufficient("no prediction windows".into()));
    }
    windows.iter().try_fold(0.0f64, |m, w| Ok(m.max(window_rms(w, n)?)))
}

/// Pairs every stored prediction with the measured positions it refers to.
/// Steps without a full horizon inside the episode are skipped; steps from
/// `first_step` on that lack a prediction are an error.
pub fn prediction_windows(
    episode: &Episode,
    predictions: &[Option<Vec<Vec<f64>>>],
    first_step: usize,
    horizon: usize,
) -> Result<Vec<PredictionWindow>, PipelineError> {
    let len = episode.len();
    let mut out = Vec::new();
    for step in first_step..len.saturating_sub(horizon) {
        let pred = predictions
            .get(step)
            .and_then(|p| p.as_ref())
            .ok_or(PipelineError::MissingPrediction(step))?;
        if pred.len() < horizon {
            return Err(PipelineError::Horizon {
                n: horizon,
                available: pred.len(),
            });
        }
        out.push(PredictionWindow {
            step,
            predicted: pred[..horizon].to_vec(),
            measured: (1..=horizon).map(|j| episode.records[step + j].x.clone()).collect(),
        });
    }
    Ok(out)
}

/// Windows of a closed-loop outcome whose predictor has window `k` and horizon `n`.
pub fn outcome_windows(outcome: &SimOutcome, k: usize, n: usize) -> Result<Vec<PredictionWindow>, PipelineError> {
    prediction_windows(&outcome.episode, &outcome.predictions, k - 1, n)
}

/// RMS norm of the human force over an episode.
pub fn f_rms(episode: &Episode) -> Result<f64, PipelineError> {
    if episode.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    let sum: f64 = episode
        .records
        .iter()
        .map(|r| r.u_h.iter().map(|f| f * f).sum::<f64>())
        .sum();
    Ok((sum / episode.len() as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub dof: f64,
    /// Two-sided p-value.
    pub p: f64,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Unequal-variance two-sample t-test with Welch–Satterthwaite degrees of freedom.
pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult, PipelineError> {
    if a.len() < 2 || b.len() < 2 {
        return Err(PipelineError::SampleTooSmall);
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    let (sa, sb) = (va / a.len() as f64, vb / b.len() as f64);
    let se2 = sa + sb;
    if !(se2 > 0.0) || !se2.is_finite() {
        return Err(PipelineError::DegenerateVariance);
    }
    let t = (ma - mb) / se2.sqrt();
    let dof = se2 * se2 / (sa * sa / (a.len() as f64 - 1.0) + sb * sb / (b.len() as f64 - 1.0));
    let dist = StudentsT::new(0.0, 1.0, dof).map_err(|_| PipelineError::DegenerateVariance)?;
    let p = (2.0 * dist.sf(t.abs())).min(1.0);
    Ok(WelchResult { t, dof, p })
}

pub fn mean(x: &[f64]) -> f64 {
    if x.is_empty() {
        return f64::NAN;
    }
    x.iter().sum::<f64>() / x.len() as f64
}
