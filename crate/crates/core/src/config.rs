//! Run configuration: one TOML file with `[model]`, `[train]`, `[data]` and
//! `[metrics]` sections. Every field has a default and unknown keys are errors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{JitterSpec, MAX_VIEWS};
use crate::metrics::MetricsConfig;
use crate::network::ModelConfig;
use crate::training::TrainConfig;

/// Synthetic dataset generation and splitting.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Side of the square procedural scenes.
    pub image_size: usize,
    pub views_min: usize,
    pub views_max: usize,
    /// Per-channel attenuation drawn uniformly from `[beta_min, beta_max]` per scene.
    pub beta_min: [f64; 3],
    pub beta_max: [f64; 3],
    pub ambient_min: [f64; 3],
    pub ambient_max: [f64; 3],
    pub jitter: JitterSpec,
    /// Trailing scenes (in directory order) held out by `ablate`.
    pub holdout_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            views_min: 2,
            views_max: 5,
            beta_min: [0.8, 0.3, 0.2],
            beta_max: [2.5, 1.0, 0.6],
            ambient_min: [0.0, 0.35, 0.45],
            ambient_max: [0.2, 0.7, 0.85],
            jitter: JitterSpec::default(),
            holdout_scenes: 8,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_size < 8 || !self.image_size.is_multiple_of(4) {
            return bad(format!("image_size {} must be a multiple of 4 and at least 8", self.image_size));
        }
        if self.views_min == 0 || self.views_min > self.views_max || self.views_max > MAX_VIEWS {
            return bad(format!("views range [{}, {}] must lie in [1, {MAX_VIEWS}]", self.views_min, self.views_max));
        }
        for c in 0..3 {
            if !(self.beta_min[c] > 0.0 && self.beta_min[c] <= self.beta_max[c] && self.beta_max[c] <= 10.0) {
                return bad(format!(
                    "beta range {:?}..{:?} must satisfy 0 < min ≤ max ≤ 10",
                    self.beta_min, self.beta_max
                ));
            }
            if !(0.0 <= self.ambient_min[c] && self.ambient_min[c] <= self.ambient_max[c] && self.ambient_max[c] <= 1.0)
            {
                return bad(format!("ambient range {:?}..{:?} must lie in [0, 1]", self.ambient_min, self.ambient_max));
            }
        }
        self.jitter.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub metrics: MetricsConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        self.metrics.validate()
    }

    /// JSON snapshot embedded in checkpoints and manifests.
    pub fn snapshot(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}
