use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::{DEFAULT_MEAN, DEFAULT_STD};

/// Shape and regularization of the classifier. The default is the ViT-B/16 layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_dim: usize,
    pub num_classes: usize,
    pub dropout_hidden: f64,
    pub dropout_attention: f64,
    pub norm_mean: [f64; 3],
    pub norm_std: [f64; 3],
}

impl Default for ViTConfig {
    fn default() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            hidden_dim: 768,
            num_layers: 12,
            num_heads: 12,
            mlp_dim: 3072,
            num_classes: 9,
            dropout_hidden: 0.3,
            dropout_attention: 0.3,
            norm_mean: DEFAULT_MEAN,
            norm_std: DEFAULT_STD,
        }
    }
}

impl ViTConfig {
    /// Small layout for CPU experiments: 32px images, 8px patches, width 64, two blocks.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            hidden_dim: 64,
            num_layers: 2,
            num_heads: 4,
            mlp_dim: 128,
            dropout_hidden: 0.1,
            dropout_attention: 0.1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_heads == 0 || self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.num_heads) {
            return bad(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            ));
        }
        if self.mlp_dim == 0 {
            return bad("mlp_dim must be positive".into());
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes must be at least 2, got {}", self.num_classes));
        }
        for (name, p) in [
            ("dropout_hidden", self.dropout_hidden),
            ("dropout_attention", self.dropout_attention),
        ] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("{name} = {p} must lie in [0, 1)"));
            }
        }
        if self.norm_std.iter().any(|s| !(*s > 0.0)) {
            return bad("norm_std components must be positive".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn seq_len(&self) -> usize {
        1 + self.num_patches()
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }
}

/// AdamW hyperparameters; defaults are the fine-tuning recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-5,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("betas must lie in [0, 1)".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ViTConfig::default().validate().unwrap();
        ViTConfig::toy().validate().unwrap();
        OptimizerConfig::default().validate().unwrap();
        assert_eq!(ViTConfig::default().seq_len(), 197);
        assert_eq!(ViTConfig::toy().seq_len(), 17);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let cfg = ViTConfig {
            hidden_dim: 65,
            num_heads: 4,
            ..ViTConfig::toy()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn rejects_bad_values() {
        assert!(ViTConfig {
            image_size: 30,
            ..ViTConfig::toy()
        }
        .validate()
        .is_err());
        assert!(ViTConfig {
            num_classes: 1,
            ..ViTConfig::toy()
        }
        .validate()
        .is_err());
        assert!(ViTConfig {
            dropout_hidden: 1.0,
            ..ViTConfig::toy()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            beta2: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
