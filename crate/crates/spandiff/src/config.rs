//! One flat configuration drives every knob: diffusion shape, network
//! ablations, optimization, and decoding. Values resolve with precedence
//! CLI flag > `SPANDIFF_*` environment variable > config file > default.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Result, SpandiffError};
use crate::schedule::ScheduleKind;

/// How the timestep embedding is combined with the slot representations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    Add,
    ScaleShift,
}

/// Boundary supervision: positions as classes, or one Bernoulli per position.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryLoss {
    Categorical,
    Binary,
}

/// How intermediate boundary distributions become coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum X0Decode {
    SoftArgmax,
    HardArgmax,
}

/// Which contextual encoder backs the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum EncoderKind {
    /// Trainable embedding + local mixer; the desk-scale default.
    Toy,
    /// Frozen vectors precomputed offline by an external language model,
    /// served from a sidecar file.
    Pretrained(String),
}

impl From<EncoderKind> for String {
    fn from(e: EncoderKind) -> String {
        match e {
            EncoderKind::Toy => "toy".into(),
            EncoderKind::Pretrained(p) => format!("pretrained:{p}"),
        }
    }
}

impl TryFrom<String> for EncoderKind {
    type Error = SpandiffError;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for EncoderKind {
    type Err = SpandiffError;

    fn from_str(s: &str) -> Result<Self> {
        if s == "toy" {
            Ok(EncoderKind::Toy)
        } else if let Some(path) = s.strip_prefix("pretrained:") {
            if path.is_empty() {
                return Err(SpandiffError::Config(
                    "pretrained encoder needs a sidecar path: pretrained:<path>".into(),
                ));
            }
            Ok(EncoderKind::Pretrained(path.to_string()))
        } else {
            Err(SpandiffError::Config(format!(
                "unknown encoder {s:?}; expected \"toy\" or \"pretrained:<path>\""
            )))
        }
    }
}

/// Every run-level knob. Field names are the config-file keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Slot count N; `null` derives the max gold count from the training set.
    #[serde(rename = "N")]
    pub slots: Option<usize>,
    #[serde(rename = "T")]
    pub t_total: usize,
    pub gamma: usize,
    pub lambda: f64,
    /// "cosine" or "linear"; linear reads `beta_start`/`beta_end`.
    pub schedule_kind: String,
    pub beta_start: f64,
    pub beta_end: f64,

    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub weight_decay: f64,
    pub grad_clip: f64,

    pub hidden_dim: usize,
    pub gcn_layers: usize,
    pub synta_layers: usize,
    pub time_mode: TimeMode,
    pub boundary_loss: BoundaryLoss,
    pub x0_decode: X0Decode,
    pub encoder: EncoderKind,

    pub threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            slots: None,
            t_total: 1000,
            gamma: 5,
            lambda: 1.0,
            schedule_kind: "cosine".into(),
            beta_start: 1e-4,
            beta_end: 0.02,
            learning_rate: 0.0002,
            batch_size: 16,
            epochs: 100,
            weight_decay: 0.01,
            grad_clip: 1.0,
            hidden_dim: 64,
            gcn_layers: 2,
            synta_layers: 2,
            time_mode: TimeMode::ScaleShift,
            boundary_loss: BoundaryLoss::Categorical,
            x0_decode: X0Decode::SoftArgmax,
            encoder: EncoderKind::Toy,
            threshold: 0.0,
            seed: 42,
        }
    }
}

pub const ENV_PREFIX: &str = "SPANDIFF_";

impl TrainConfig {
    pub fn schedule(&self) -> Result<ScheduleKind> {
        match self.schedule_kind.as_str() {
            "cosine" => Ok(ScheduleKind::Cosine),
            "linear" => Ok(ScheduleKind::Linear {
                beta_start: self.beta_start,
                beta_end: self.beta_end,
            }),
            other => Err(SpandiffError::Config(format!(
                "unknown schedule_kind {other:?}; expected \"cosine\" or \"linear\""
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_total < 1 {
            return Err(SpandiffError::Config("T must be >= 1".into()));
        }
        if self.gamma < 1 || self.gamma > self.t_total {
            return Err(SpandiffError::Config(format!(
                "gamma must lie in [1, T], got {}",
                self.gamma
            )));
        }
        if self.lambda <= 0.0 {
            return Err(SpandiffError::Config("lambda must be positive".into()));
        }
        if self.batch_size < 1 {
            return Err(SpandiffError::Config("batch_size must be >= 1".into()));
        }
        if self.hidden_dim < 1 || self.gcn_layers < 1 || self.synta_layers < 1 {
            return Err(SpandiffError::Config(
                "hidden_dim, gcn_layers, synta_layers must be >= 1".into(),
            ));
        }
        if let Some(n) = self.slots {
            if n < 1 {
                return Err(SpandiffError::Config("N must be >= 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(SpandiffError::Config(
                "threshold must lie in [0, 1)".into(),
            ));
        }
        self.schedule()?;
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            SpandiffError::Config(format!("cannot read {}: {e}", path.display()))
        })?;
        let cfg: TrainConfig = serde_json::from_str(&text)
            .map_err(|e| SpandiffError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Overlay `SPANDIFF_*` variables onto this config. Keys match field
    /// names case-insensitively (`SPANDIFF_N`, `SPANDIFF_LEARNING_RATE`,
    /// ...); values are parsed as JSON first and fall back to strings.
    pub fn apply_env(&self, vars: impl Iterator<Item = (String, String)>) -> Result<Self> {
        let mut value = serde_json::to_value(self)?;
        let obj = value.as_object_mut().expect("config serializes to object");
        for (key, raw) in vars {
            let Some(field) = key.strip_prefix(ENV_PREFIX) else {
                continue;
            };
            let field = if field == "N" || field == "T" {
                field.to_string()
            } else {
                field.to_lowercase()
            };
            if !obj.contains_key(&field) {
                return Err(SpandiffError::Config(format!(
                    "environment override {key} does not match any config key"
                )));
            }
            let parsed = serde_json::from_str::<serde_json::Value>(&raw)
                .unwrap_or(serde_json::Value::String(raw));
            obj.insert(field, parsed);
        }
        let cfg: TrainConfig = serde_json::from_value(value)
            .map_err(|e| SpandiffError::Config(format!("environment override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
