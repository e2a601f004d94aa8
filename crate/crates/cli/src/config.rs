//! Run configuration: a profile's defaults with a TOML document layered on top.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use phri_core::net::PredictorConfig;
use phri_core::pipeline::{EnvConfig, TrainConfig, TransferSettings};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    /// Small network and short windows; a full run fits on a laptop core.
    Desk,
    /// Full-size network and windows.
    Paper,
}

impl FromStr for Profile {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(format!("unknown profile `{other}` (expected desk or paper)")),
        }
    }
}

impl fmt::Display for Profile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Profile::Desk => "desk",
            Profile::Paper => "paper",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterateSettings {
    /// Stop once the longest-horizon e_RMS moves by less than this (m).
    pub tol: f64,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareSettings {
    pub episodes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServeSettings {
    pub address: String,
    /// Loop rate in steps per second.
    pub rate_hz: f64,
    /// Emit a prediction update every this many steps.
    pub prediction_every: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: Profile,
    pub seed: u64,
    pub out: PathBuf,
    pub env: EnvConfig,
    pub predictor: PredictorConfig,
    pub train: TrainConfig,
    pub iterate: IterateSettings,
    pub transfer: TransferSettings,
    pub compare: CompareSettings,
    pub serve: ServeSettings,
}

impl RunConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let dof = 2;
        let serve = ServeSettings {
            address: "127.0.0.1:8700".into(),
            rate_hz: 125.0,
            prediction_every: 5,
        };
        match profile {
            Profile::Desk => {
                let mut train = TrainConfig {
                    stride: 4,
                    lr_decay: 0.05,
                    ..TrainConfig::default()
                };
                train.adam.lr = 2e-3;
                RunConfig {
                    profile,
                    seed: 0,
                    out: PathBuf::from("runs/desk"),
                    env: EnvConfig::desk(),
                    predictor: PredictorConfig::desk(dof),
                    train,
                    iterate: IterateSettings {
                        tol: 1e-4,
                        max_iters: 3,
                    },
                    transfer: TransferSettings::default(),
                    compare: CompareSettings { episodes: 10 },
                    serve,
                }
            }
            Profile::Paper => RunConfig {
                profile,
                seed: 0,
                out: PathBuf::from("runs/paper"),
                env: EnvConfig::paper(),
                predictor: PredictorConfig::paper(dof),
                train: TrainConfig::default(),
                iterate: IterateSettings {
                    tol: 1e-4,
                    max_iters: 3,
                },
                transfer: TransferSettings::default(),
                compare: CompareSettings { episodes: 10 },
                serve,
            },
        }
    }

    /// Parses `text` over the defaults of its profile, or of `profile` when given.
    pub fn from_toml(text: &str, profile: Option<Profile>) -> Result<Self, CliError> {
        let overlay: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let profile = match (profile, overlay.get("profile")) {
            (Some(p), _) => p,
            (None, Some(v)) => v
                .as_str()
                .ok_or_else(|| CliError::Config("`profile` must be a string".into()))?
                .parse()
                .map_err(CliError::Config)?,
            (None, None) => Profile::Desk,
        };
        let mut base =
            toml::Table::try_from(RunConfig::for_profile(profile)).map_err(|e| CliError::Config(e.to_string()))?;
        merge(&mut base, overlay);
        base.insert("profile".into(), toml::Value::String(profile.to_string()));
        let cfg: RunConfig = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, profile: Option<Profile>) -> Result<Self, CliError> {
        match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::from_toml(&text, profile)
            }
            None => {
                let cfg = Self::for_profile(profile.unwrap_or(Profile::Desk));
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |e: &dyn fmt::Display| CliError::Config(e.to_string());
        self.env.validate().map_err(|e| bad(&e))?;
        self.predictor.validate().map_err(|e| bad(&e))?;
        self.train.validate().map_err(|e| bad(&e))?;
        if self.predictor.dof != self.env.dof() {
            return Err(CliError::Config(format!(
                "predictor is built for {} coordinates but the plant has {}",
                self.predictor.dof,
                self.env.dof()
            )));
        }
        let n = self.predictor.horizon_n;
        if let Some(h) = self.env.horizons.iter().find(|h| **h > n) {
            return Err(CliError::Config(format!(
                "report horizon {h} exceeds the predictor horizon {n}"
            )));
        }
        if self.env.pick_index > n {
            return Err(CliError::Config(format!(
                "pick_index {} exceeds the predictor horizon {n}",
                self.env.pick_index
            )));
        }
        if !(self.iterate.tol >= 0.0) {
            return Err(CliError::Config("iterate.tol must be non-negative".into()));
        }
        if self.iterate.max_iters == 0 {
            return Err(CliError::Config("iterate.max_iters must be at least 1".into()));
        }
        if !(self.serve.rate_hz > 0.0) || self.serve.prediction_every == 0 {
            return Err(CliError::Config(
                "serve.rate_hz and serve.prediction_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Tables merge key by key; any other value replaces the base.
fn merge(base: &mut toml::Table, overlay: toml::Table) {
    for (key, value) in overlay {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
