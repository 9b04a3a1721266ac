use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::imaging::AugmentationConfig;
use crate::severity::{ForestConfig, GradeThresholds};
use crate::vit::{DefectClass, OptimizerConfig, Trainable, ViTConfig};

/// Run-level training settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of each class assigned to the training partition.
    pub split_fraction: f64,
    pub seed: u64,
    pub trainable: Trainable,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            split_fraction: 0.7,
            seed: 0,
            trainable: Trainable::HeadOnly,
        }
    }
}

/// Every tunable of the pipeline, read from one TOML file. Missing sections
/// and keys take their defaults.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub training: TrainingConfig,
    pub vit: ViTConfig,
    pub optimizer: OptimizerConfig,
    pub augmentation: AugmentationConfig,
    pub features: FeatureConfig,
    pub forest: ForestConfig,
    pub grading: GradeThresholds,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.vit.validate()?;
        self.optimizer.validate()?;
        self.augmentation.validate()?;
        self.forest.validate()?;
        if self.vit.num_classes != DefectClass::COUNT {
            return Err(Error::Config(format!(
                "vit.num_classes must be {}, got {}",
                DefectClass::COUNT,
                self.vit.num_classes
            )));
        }
        if self.augmentation.output_size != self.vit.image_size {
            return Err(Error::Config(format!(
                "augmentation.output_size {} must equal vit.image_size {}",
                self.augmentation.output_size, self.vit.image_size
            )));
        }
        let t = &self.training;
        if t.batch_size == 0 {
            return Err(Error::Config("training.batch_size must be positive".into()));
        }
        if !(t.split_fraction > 0.0 && t.split_fraction < 1.0) {
            return Err(Error::Config(format!(
                "training.split_fraction must lie in (0, 1), got {}",
                t.split_fraction
            )));
        }
        if !(self.grading.nil_below < self.grading.major_from) {
            return Err(Error::Config(
                "grading.nil_below must be below grading.major_from".into(),
            ));
        }
        if self.features.histogram_bins == 0 || self.features.glcm_levels < 2 {
            return Err(Error::Config(
                "features need histogram_bins >= 1 and glcm_levels >= 2".into(),
            ));
        }
        Ok(())
    }
}
