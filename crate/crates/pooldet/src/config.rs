//! Run configuration: one file that fixes every knob of an experiment.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregation::InferenceConfig;
use crate::assignment::PyramidSpec;
use crate::data::SceneConfig;
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PyramidConfig {
    pub min_level: usize,
    pub max_level: usize,
    pub base_scale: f64,
}

impl Default for PyramidConfig {
    fn default() -> Self {
        // strides 4/8/16 with base 10: an object lands on the level where its
        // side is 2.5-5 strides, so a shrink-0.4 positive area always spans at
        // least one feature center
        Self {
            min_level: 2,
            max_level: 4,
            base_scale: 10.0,
        }
    }
}

impl PyramidConfig {
    pub fn build(&self, image_width: usize, image_height: usize) -> Result<PyramidSpec> {
        PyramidSpec::for_image(
            image_width,
            image_height,
            self.min_level,
            self.max_level,
            self.base_scale,
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Epochs at which the learning rate drops tenfold.
    pub milestones: Vec<usize>,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            milestones: vec![12, 16],
        }
    }
}

/// Union of all component configurations plus the experiment schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub pyramid: PyramidConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub inference: InferenceConfig,
    pub optim: OptimConfig,
    /// Positive-area shrink factor used for labeling.
    pub shrink: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            pyramid: PyramidConfig::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            inference: InferenceConfig::default(),
            optim: OptimConfig::default(),
            shrink: 0.4,
            epochs: 18,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.model.validate()?;
        self.loss.validate()?;
        self.inference.validate()?;
        if self.model.num_classes != self.scene.num_classes {
            return Err(Error::InvalidParameter(format!(
                "model.num_classes ({}) must match scene.num_classes ({})",
                self.model.num_classes, self.scene.num_classes
            )));
        }
        if !(self.shrink > 0.0 && self.shrink <= 1.0) {
            return Err(Error::InvalidParameter(format!(
                "shrink must be in (0, 1], got {}",
                self.shrink
            )));
        }
        if self.pyramid.min_level > self.pyramid.max_level {
            return Err(Error::InvalidParameter(format!(
                "pyramid.min_level ({}) exceeds pyramid.max_level ({})",
                self.pyramid.min_level, self.pyramid.max_level
            )));
        }
        if self.pyramid.base_scale <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "pyramid.base_scale must be positive, got {}",
                self.pyramid.base_scale
            )));
        }
        if self.optim.learning_rate <= 0.0 {
            return Err(Error::InvalidParameter(format!(
                "optim.learning_rate must be positive, got {}",
                self.optim.learning_rate
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidParameter(
                "epochs and batch_size must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)
            .map_err(|e| Error::Format(format!("cannot read config {}: {e}", path.display())))?;
        let config: RunConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Format(format!("malformed config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    /// Hash of everything that determines checkpoint compatibility: the model
    /// architecture and the pyramid geometry parameters.
    pub fn arch_hash(&self) -> String {
        #[derive(Serialize)]
        struct ArchKey<'a> {
            model: &'a ModelConfig,
            pyramid: &'a PyramidConfig,
        }
        let canonical = serde_json::to_string(&ArchKey {
            model: &self.model,
            pyramid: &self.pyramid,
        })
        .expect("arch key serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        let digest = hasher.finalize();
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
