//! Run configuration: one JSON document with `data`, `model`, `loss`, `train`
//! and `io` sections. Unknown keys are rejected and missing keys take the
//! defaults below.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::Ablation;
use crate::trainer::LossWeights;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Spatial slot counts for L, V, A.
    pub s_l: usize,
    pub s_v: usize,
    pub s_a: usize,
    pub factor_specific_qkv: bool,
    /// Ablation switches, e.g. `["no_fcca", "fusion_sum"]`.
    pub switches: Vec<String>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            s_l: 4,
            s_v: 4,
            s_a: 4,
            factor_specific_qkv: false,
            switches: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn slots(&self) -> [usize; 3] {
        [self.s_l, self.s_v, self.s_a]
    }

    pub fn ablation(&self) -> Result<Ablation> {
        Ablation::from_switches(&self.switches)
    }
}

/// HSIC kernel bandwidth: the median pairwise distance, or a fixed value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Median,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => s.serialize_str("median"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Name(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Name(n) if n == "median" => Ok(Bandwidth::Median),
            Raw::Name(n) => Err(serde::de::Error::custom(format!(
                "hsic_bandwidth must be \"median\" or a positive number, got {n:?}"
            ))),
            Raw::Value(v) if v > 0.0 && v.is_finite() => Ok(Bandwidth::Fixed(v)),
            Raw::Value(v) => Err(serde::de::Error::custom(format!(
                "hsic_bandwidth must be positive, got {v}"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta_cal: f64,
    pub lambda_c: f64,
    pub lambda_h: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub lambda_prior: f64,
    pub hsic_bandwidth: Bandwidth,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.5,
            gamma: 0.5,
            delta_cal: 0.1,
            lambda_c: 1.0,
            lambda_h: 1.0,
            kappa1: 1.0,
            kappa2: 1.0,
            lambda_prior: 0.5,
            hsic_bandwidth: Bandwidth::Median,
        }
    }
}

impl LossConfig {
    pub fn weights(&self) -> LossWeights {
        LossWeights {
            alpha: self.alpha,
            beta: self.beta,
            gamma: self.gamma,
            lambda_c: self.lambda_c,
            lambda_h: self.lambda_h,
            delta_cal: self.delta_cal,
            kappa1: self.kappa1,
            kappa2: self.kappa2,
            lambda_prior: self.lambda_prior,
            bandwidth: self.hsic_bandwidth,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-5,
            batch_size: 16,
            max_epochs: 50,
            patience: 5,
            seed: 42,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoConfig {
    pub out_dir: String,
}

impl Default for IoConfig {
    fn default() -> Self {
        Self {
            out_dir: "out".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("config serializes");
        s.push('\n');
        s
    }

    /// Uses one seed for both data generation and training.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.data.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        let m = &self.model;
        if m.d_model == 0 || m.s_l == 0 || m.s_v == 0 || m.s_a == 0 {
            return Err(Error::config("model sizes must be positive"));
        }
        m.ablation()?;
        self.loss.weights().validate()?;
        let t = &self.train;
        if !(t.lr >= 0.0) || !(t.weight_decay >= 0.0) {
            return Err(Error::config("lr and weight_decay must be non-negative"));
        }
        if t.batch_size == 0 || t.max_epochs == 0 {
            return Err(Error::config("batch_size and max_epochs must be positive"));
        }
        Ok(())
    }
}
