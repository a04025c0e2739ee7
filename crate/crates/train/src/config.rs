//! Training configuration and the method selector.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use hff_core::model::ModelConfig;
use hff_data::Method;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TrainError};

/// Everything that determines a training run besides the data.
///
/// Input size, loss scale and margin, DCMA placements and RSA scales live in
/// `model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            batch_size: 8,
            epochs: 20,
            seed: 0,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::invalid(format!("lr must be positive and finite, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::invalid("batch_size must be positive"));
        }
        if self.epochs == 0 {
            return Err(TrainError::invalid("epochs must be positive"));
        }
        let m = &self.model;
        if !(m.loss_s > 0.0 && m.loss_m >= 0.0) {
            return Err(TrainError::invalid(format!(
                "loss scale must be positive and margin non-negative, got s={} m={}",
                m.loss_s, m.loss_m
            )));
        }
        m.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serialization cannot fail")
    }

    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| TrainError::io(path, e))?;
        let config = Self::from_json(&text).map_err(|source| TrainError::Json {
            path: path.display().to_string(),
            source,
        })?;
        config.validate()?;
        Ok(config)
    }
}

/// The fake family a model is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum TrainMethod {
    All,
    Only(Method),
}

impl TrainMethod {
    pub fn includes(self, method: Method) -> bool {
        match self {
            TrainMethod::All => method != Method::None,
            TrainMethod::Only(m) => m == method,
        }
    }
}

impl fmt::Display for TrainMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainMethod::All => f.write_str("all"),
            TrainMethod::Only(m) => m.fmt(f),
        }
    }
}

impl FromStr for TrainMethod {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(TrainMethod::All);
        }
        match s.parse::<Method>() {
            Ok(Method::None) | Err(_) => Err(TrainError::invalid(format!(
                "unknown train method `{s}` (expected A, B, C, D or all)"
            ))),
            Ok(m) => Ok(TrainMethod::Only(m)),
        }
    }
}

impl Serialize for TrainMethod {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TrainMethod {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}
