//! Model, ablation and training configuration.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generative::LossConfig;
use crate::graph::GraphConfig;
use crate::kinematics::BicycleParams;
use crate::nn::OptimizerConfig;

/// Model variants compared in the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ablation {
    /// Trajectories only; context embeddings are zeros.
    #[serde(rename = "T")]
    T,
    /// Context on, attention coefficients forced uniform.
    #[serde(rename = "T+C-ATT")]
    TcNoAtt,
    /// Context and attention; displacement outputs for every type.
    #[serde(rename = "T+C")]
    Tc,
    /// Full model with the kinematic layer for vehicles.
    #[serde(rename = "T+C+K")]
    Tck,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::T, Ablation::TcNoAtt, Ablation::Tc, Ablation::Tck];

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::T => "T",
            Ablation::TcNoAtt => "T+C-ATT",
            Ablation::Tc => "T+C",
            Ablation::Tck => "T+C+K",
        }
    }

    pub fn uses_context(self) -> bool {
        self != Ablation::T
    }

    pub fn uniform_attention(self) -> bool {
        self == Ablation::TcNoAtt
    }

    pub fn kinematic(self) -> bool {
        self == Ablation::Tck
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().replace('−', "-").as_str() {
            "T" => Ok(Ablation::T),
            "T+C-ATT" => Ok(Ablation::TcNoAtt),
            "T+C" => Ok(Ablation::Tc),
            "T+C+K" => Ok(Ablation::Tck),
            other => Err(Error::Config(format!(
                "unknown ablation `{other}` (expected T, T+C-ATT, T+C or T+C+K)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub ablation: Ablation,
    /// History steps.
    pub t_h: usize,
    /// Prediction steps.
    pub t_f: usize,
    /// Seconds per step.
    pub dt: f64,
    pub graph: GraphConfig,
    pub state_dim: usize,
    pub context_dim: usize,
    pub edge_dim: usize,
    pub state_hidden: usize,
    pub state_layers: usize,
    pub relation_hidden: usize,
    /// Crop side in cells.
    pub crop: usize,
    /// Context map cell size, meters.
    pub cell_size: f64,
    pub cnn_channels: Vec<usize>,
    pub heads: usize,
    pub rounds: usize,
    pub edge_hidden: usize,
    pub encoder_hidden: usize,
    pub latent_dim: usize,
    pub decoder_hidden: usize,
    /// Meters per unit of network position input.
    pub position_scale: f64,
    /// m/s per unit of network speed input.
    pub speed_scale: f64,
    pub bicycle: BicycleParams,
    /// Initial control standard deviations `[m/s², rad/s]`.
    pub control_std: [f64; 2],
    /// Bound on the initial slip angle estimate, radians.
    pub max_slip: f64,
    pub loss: LossConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            ablation: Ablation::Tck,
            t_h: 10,
            t_f: 10,
            dt: 0.1,
            graph: GraphConfig::default(),
            state_dim: 32,
            context_dim: 32,
            edge_dim: 16,
            state_hidden: 128,
            state_layers: 3,
            relation_hidden: 128,
            crop: 32,
            cell_size: 1.0,
            cnn_channels: vec![16, 32, 32],
            heads: 4,
            rounds: 2,
            edge_hidden: 64,
            encoder_hidden: 128,
            latent_dim: 32,
            decoder_hidden: 128,
            position_scale: 10.0,
            speed_scale: 10.0,
            bicycle: BicycleParams::default(),
            control_std: [0.5, 0.05],
            max_slip: 0.4,
            loss: LossConfig::default(),
        }
    }
}

impl ModelConfig {
    /// Reduced widths that train in minutes on one CPU core.
    pub fn compact() -> Self {
        Self {
            state_dim: 12,
            context_dim: 4,
            edge_dim: 8,
            state_hidden: 24,
            state_layers: 2,
            relation_hidden: 16,
            crop: 8,
            cell_size: 2.0,
            cnn_channels: vec![4, 8],
            heads: 2,
            rounds: 2,
            edge_hidden: 16,
            encoder_hidden: 32,
            latent_dim: 4,
            decoder_hidden: 32,
            ..Self::default()
        }
    }

    /// Minimal widths for finite-difference checks on toy scenes.
    pub fn toy(ablation: Ablation) -> Self {
        Self {
            ablation,
            t_h: 4,
            t_f: 5,
            state_dim: 4,
            context_dim: 2,
            edge_dim: 3,
            state_hidden: 6,
            state_layers: 2,
            relation_hidden: 5,
            crop: 4,
            cell_size: 2.0,
            cnn_channels: vec![2],
            heads: 2,
            rounds: 2,
            edge_hidden: 5,
            encoder_hidden: 6,
            latent_dim: 2,
            decoder_hidden: 6,
            ..Self::default()
        }
    }

    pub fn node_dim(&self) -> usize {
        self.state_dim + self.context_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_h < 2 || self.t_f == 0 {
            return Err(Error::Config(format!(
                "need t_h >= 2 and t_f >= 1 steps, got t_h = {}, t_f = {}",
                self.t_h, self.t_f
            )));
        }
        if !(self.dt > 0.0) {
            return Err(Error::Config(format!("dt must be > 0 s, got {}", self.dt)));
        }
        if (self.dt - self.bicycle.dt).abs() > 1e-12 {
            return Err(Error::Config(format!(
                "bicycle dt {} s differs from sample dt {} s",
                self.bicycle.dt, self.dt
            )));
        }
        self.graph.validate()?;
        self.bicycle.validate()?;
        self.loss.validate()?;
        let widths = [
            ("state_dim", self.state_dim),
            ("context_dim", self.context_dim),
            ("edge_dim", self.edge_dim),
            ("state_hidden", self.state_hidden),
            ("relation_hidden", self.relation_hidden),
            ("crop", self.crop),
            ("heads", self.heads),
            ("rounds", self.rounds),
            ("edge_hidden", self.edge_hidden),
            ("encoder_hidden", self.encoder_hidden),
            ("latent_dim", self.latent_dim),
            ("decoder_hidden", self.decoder_hidden),
        ];
        if let Some((name, _)) = widths.iter().find(|w| w.1 == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.node_dim() % self.heads != 0 {
            return Err(Error::Config(format!(
                "{} heads must divide node width {}",
                self.heads,
                self.node_dim()
            )));
        }
        if self.cnn_channels.is_empty() || self.cnn_channels.contains(&0) {
            return Err(Error::Config("cnn_channels needs at least one positive width".into()));
        }
        for (name, v) in [
            ("cell_size", self.cell_size),
            ("position_scale", self.position_scale),
            ("speed_scale", self.speed_scale),
            ("control_std[0]", self.control_std[0]),
            ("control_std[1]", self.control_std[1]),
            ("max_slip", self.max_slip),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Epochs without validation ADE improvement before stopping.
    pub patience: usize,
    /// Global gradient norm bound.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            patience: 10,
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    /// Optimizer settings that suit [`ModelConfig::compact`].
    pub fn compact() -> Self {
        let mut c = Self::default();
        c.optimizer.learning_rate = 3e-3;
        c.optimizer.batch_size = 16;
        c
    }

    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm must be > 0, got {}", self.clip_norm)));
        }
        Ok(())
    }
}

/// Everything a training run needs, as read from a JSON config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let c: Self = serde_json::from_str(s).map_err(|e| Error::Config(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }
}
