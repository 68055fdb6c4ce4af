//! Strict JSON run configuration: model, data, train, analysis and paths.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::analysis::Roi;
use crate::decoder::Vocab;
use crate::error::{path_err, Error, Result};
use crate::model::ModelConfig;
use crate::synthdata::DataConfig;
use crate::training::{fnv1a64, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    pub roi: Roi,
    /// Fractional depths to render.
    pub depths: Vec<f64>,
    /// Scene rendered for similarity maps.
    pub scene_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    /// Default output directory of `train`.
    pub out_dir: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub paths: PathsConfig,
}

impl RunConfig {
    pub fn toy() -> Self {
        Self {
            model: ModelConfig::toy(Vocab::toy().len()),
            data: DataConfig::toy(),
            train: TrainConfig::toy(),
            analysis: AnalysisConfig {
                roi: Roi::new(1, 1, 1, 1),
                depths: vec![0.5, 0.75, 1.0],
                scene_seed: 0,
            },
            paths: PathsConfig {
                out_dir: "runs/toy".into(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.data.validate()?;
        self.train.validate()?;
        if self.model.decoder.vocab_size != Vocab::toy().len() {
            return Err(Error::Config(format!(
                "decoder vocab_size {} differs from the task vocabulary ({})",
                self.model.decoder.vocab_size,
                Vocab::toy().len()
            )));
        }
        let spec = self
            .data
            .render_spec(self.model.patch(), self.model.merge())?;
        let (h, w) = spec.size();
        let p = self.model.patch();
        if h / p > self.model.max_grid || w / p > self.model.max_grid {
            return Err(Error::Config(format!(
                "{h}×{w} frames exceed max_grid {}",
                self.model.max_grid
            )));
        }
        if spec.frames.count > self.model.max_views {
            return Err(Error::Config(format!(
                "{} frames exceed max_views",
                spec.frames.count
            )));
        }
        if self.analysis.depths.iter().any(|&d| !(d > 0.0 && d <= 1.0)) {
            return Err(Error::Config("analysis depths must lie in (0, 1]".into()));
        }
        Ok(())
    }

    /// Strict parse: unknown keys and missing fields are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path).map_err(|e| path_err(path, e))?)
    }

    pub fn emit(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// FNV-1a of the compact JSON encoding, as 16 hex digits.
    pub fn hash(&self) -> Result<String> {
        Ok(format!("{:016x}", fnv1a64(&serde_json::to_vec(self)?)))
    }
}
