use nalgebra::DMatrix;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::NetError;

/// Shape of the recurrent predictor.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorConfig {
    pub dof: usize,
    /// Features per time step, `4·dof`: position, velocity, human force, nominal reference.
    pub input_features: usize,
    pub window_k: usize,
    pub horizon_n: usize,
    pub recurrent_layers: usize,
    pub hidden_size: usize,
    pub fc_hidden: usize,
    /// `horizon_n · dof`.
    pub output_size: usize,
}

impl PredictorConfig {
    pub fn new(
        dof: usize,
        window_k: usize,
        horizon_n: usize,
        recurrent_layers: usize,
        hidden_size: usize,
        fc_hidden: usize,
    ) -> Result<Self, NetError> {
        let cfg = PredictorConfig {
            dof,
            input_features: 4 * dof,
            window_k,
            horizon_n,
            recurrent_layers,
            hidden_size,
            fc_hidden,
            output_size: horizon_n * dof,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Three recurrent layers of 250 units over a 125-step window, 50-step horizon.
    pub fn paper(dof: usize) -> Self {
        PredictorConfig::new(dof, 125, 50, 3, 250, 128).expect("static config")
    }

    /// Reduced shape for desk-scale runs.
    pub fn desk(dof: usize) -> Self {
        PredictorConfig::new(dof, 25, 10, 2, 32, 128).expect("static config")
    }

    pub fn validate(&self) -> Result<(), NetError> {
        let counts = [
            ("dof", self.dof),
            ("window_k", self.window_k),
            ("horizon_n", self.horizon_n),
            ("recurrent_layers", self.recurrent_layers),
            ("hidden_size", self.hidden_size),
            ("fc_hidden", self.fc_hidden),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(NetError::InvalidConfig(format!("{name} must be at least 1")));
        }
        if self.input_features != 4 * self.dof {
            return Err(NetError::InvalidConfig(format!(
                "input_features {} != 4·dof",
                self.input_features
            )));
        }
        if self.output_size != self.horizon_n * self.dof {
            return Err(NetError::InvalidConfig(format!(
                "output_size {} != horizon_n·dof",
                self.output_size
            )));
        }
        Ok(())
    }

    /// Expected `(name, rows, cols)` of every parameter block, recurrent layers first.
    pub fn block_shapes(&self) -> Vec<(String, usize, usize)> {
        let h = self.hidden_size;
        let mut shapes = Vec::new();
        for l in 0..self.recurrent_layers {
            let fan_in = if l == 0 { self.input_features } else { h };
            shapes.push((format!("lstm{l}.w_in"), 4 * h, fan_in));
            shapes.push((format!("lstm{l}.w_rec"), 4 * h, h));
            shapes.push((format!("lstm{l}.bias"), 4 * h, 1));
        }
        shapes.push(("fc1.weight".into(), self.fc_hidden, h));
        shapes.push(("fc1.bias".into(), self.fc_hidden, 1));
        shapes.push(("fc2.weight".into(), self.output_size, self.fc_hidden));
        shapes.push(("fc2.bias".into(), self.output_size, 1));
        shapes
    }

    pub fn recurrent_block_count(&self) -> usize {
        3 * self.recurrent_layers
    }
}

/// One named parameter tensor with its freeze flag.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub value: DMatrix<f64>,
    pub frozen: bool,
}

impl ParamBlock {
    pub fn is_recurrent(&self) -> bool {
        self.name.starts_with("lstm")
    }
}

/// Per-feature affine normalization of inputs and outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
    /// Per position axis; shared by every horizon step.
    pub output_mean: Vec<f64>,
    pub output_scale: Vec<f64>,
}

impl Normalization {
    pub fn identity(input_features: usize, dof: usize) -> Self {
        Normalization {
            input_mean: vec![0.0; input_features],
            input_scale: vec![1.0; input_features],
            output_mean: vec![0.0; dof],
            output_scale: vec![1.0; dof],
        }
    }

    pub fn validate(&self, cfg: &PredictorConfig) -> Result<(), NetError> {
        for (what, v, n) in [
            ("input_mean", &self.input_mean, cfg.input_features),
            ("input_scale", &self.input_scale, cfg.input_features),
            ("output_mean", &self.output_mean, cfg.dof),
            ("output_scale", &self.output_scale, cfg.dof),
        ] {
            if v.len() != n {
                return Err(NetError::Shape {
                    what: what.into(),
                    expected: n,
                    got: v.len(),
                });
            }
        }
        if self
            .input_scale
            .iter()
            .chain(&self.output_scale)
            .any(|s| !(s.is_finite() && *s > 0.0))
        {
            return Err(NetError::InvalidConfig("normalization scales must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FreezePolicy {
    None,
    FreezeRecurrent,
}

/// Stacked gated recurrent layers followed by a two-layer head.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictorModel {
    pub config: PredictorConfig,
    pub blocks: Vec<ParamBlock>,
    pub norm: Normalization,
    pub version_tag: String,
}

impl PredictorModel {
    /// Uniform `±√(1/fan_in)` weights, zero biases, forget-gate biases at 1.
    pub fn init(config: &PredictorConfig, seed: u64) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden_size;
        let blocks = config
            .block_shapes()
            .into_iter()
            .map(|(name, rows, cols)| {
                let value = if cols == 1 {
                    let mut b = DMatrix::zeros(rows, 1);
                    if name.starts_with("lstm") {
                        b.rows_mut(h, h).fill(1.0);
                    }
                    b
                } else {
                    let bound = (1.0 / cols as f64).sqrt();
                    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
                };
                ParamBlock {
                    name,
                    value,
                    frozen: false,
                }
            })
            .collect();
        Ok(PredictorModel {
            config: config.clone(),
            blocks,
            norm: Normalization::identity(config.input_features, config.dof),
            version_tag: format!("init-{seed}"),
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(|b| b.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.blocks.iter().filter(|b| !b.frozen).map(|b| b.value.len()).sum()
    }

    pub fn head_parameter_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| !b.is_recurrent())
            .map(|b| b.value.len())
            .sum()
    }

    /// Applies a freeze policy and returns the resulting trainable parameter count.
    pub fn set_freeze(&mut self, policy: FreezePolicy) -> usize {
        for b in &mut self.blocks {
            b.frozen = match policy {
                FreezePolicy::None => false,
                FreezePolicy::FreezeRecurrent => b.is_recurrent(),
            };
        }
        self.trainable_count()
    }

    pub(crate) fn layer(&self, l: usize) -> (&DMatrix<f64>, &DMatrix<f64>, &DMatrix<f64>) {
        (
            &self.blocks[3 * l].value,
            &self.blocks[3 * l + 1].value,
            &self.blocks[3 * l + 2].value,
        )
    }

    pub(crate) fn head(&self) -> [&DMatrix<f64>; 4] {
        let o = self.config.recurrent_block_count();
        [
            &self.blocks[o].value,
            &self.blocks[o + 1].value,
            &self.blocks[o + 2].value,
            &self.blocks[o + 3].value,
        ]
    }

    /// Checks block names, shapes, and normalization against the config.
    pub fn validate(&self) -> Result<(), NetError> {
        self.config.validate()?;
        let shapes = self.config.block_shapes();
        if shapes.len() != self.blocks.len() {
            return Err(NetError::Shape {
                what: "parameter block count".into(),
                expected: shapes.len(),
                got: self.blocks.len(),
            });
        }
        for ((name, rows, cols), b) in shapes.iter().zip(&self.blocks) {
            if &b.name != name {
                return Err(NetError::InvalidConfig(format!(
                    "expected block {name}, found {}",
                    b.name
                )));
            }
            if b.value.nrows() != *rows {
                return Err(NetError::Shape {
                    what: format!("{name} rows"),
                    expected: *rows,
                    got: b.value.nrows(),
                });
            }
            if b.value.ncols() != *cols {
                return Err(NetError::Shape {
                    what: format!("{name} cols"),
                    expected: *cols,
                    got: b.value.ncols(),
                });
            }
        }
        self.norm.validate(&self.config)
    }
}

/// Free-function form of [`PredictorModel::init`].
pub fn init_model(config: &PredictorConfig, seed: u64) -> Result<PredictorModel, NetError> {
    PredictorModel::init(config, seed)
}

/// Gradients with the same block layout as the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients(pub Vec<DMatrix<f64>>);

impl Gradients {
    pub fn zeros_like(model: &PredictorModel) -> Self {
        Gradients(
            model
                .blocks
                .iter()
                .map(|b| DMatrix::zeros(b.value.nrows(), b.value.ncols()))
                .collect(),
        )
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().map(|g| g.abs().max()).fold(0.0, f64::max)
    }
}
