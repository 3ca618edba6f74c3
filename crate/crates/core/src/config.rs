use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How image features are produced before the per-concept heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum BackboneMode {
    /// Four stride/conv blocks plus a projection, trained end to end.
    #[default]
    SmallCnnTrainable,
    /// Features come from a caller-supplied frozen extractor.
    FrozenExternal,
}

/// Layer widths. Everything not fixed by the method itself lives here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Output channels of the four backbone conv blocks.
    pub backbone_channels: [usize; 4],
    /// Width of the flat feature vector fed to the concept heads.
    pub feature_dim: usize,
    /// Feature width produced by a frozen external extractor.
    pub external_feature_dim: Option<usize>,
    /// Hidden width of the shared weight predictor.
    pub classifier_hidden: usize,
    /// Channels of the decoder seed grid followed by the outputs of the
    /// first four transposed convolutions (the fifth emits image channels).
    pub decoder_channels: [usize; 5],
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            backbone_channels: [32, 64, 64, 64],
            feature_dim: 256,
            external_feature_dim: None,
            classifier_hidden: 64,
            decoder_channels: [32, 32, 32, 16, 8],
        }
    }
}

/// Every model hyperparameter. Serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Number of concepts.
    #[serde(alias = "k")]
    pub n_concepts: usize,
    /// Concept embedding width.
    #[serde(alias = "d", default = "default_embedding_dim")]
    pub embedding_dim: usize,
    /// Bernoulli prior activation probability.
    #[serde(alias = "alpha", default = "default_prior")]
    pub prior: f64,
    /// Binary-concrete relaxation temperature.
    #[serde(alias = "tau", default = "one")]
    pub temperature: f64,
    /// Train on hard Bernoulli samples (the relaxed score thresholded at 0.5)
    /// while passing gradients through the relaxation.
    #[serde(default)]
    pub straight_through: bool,
    #[serde(default = "one")]
    pub w_rec: f64,
    #[serde(default = "one")]
    pub w_task: f64,
    #[serde(default = "one")]
    pub w_kl: f64,
    pub n_classes: usize,
    /// `(channels, height, width)`.
    pub image_shape: [usize; 3],
    #[serde(default)]
    pub backbone_mode: BackboneMode,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub arch: ArchConfig,
}

fn default_embedding_dim() -> usize {
    128
}

fn default_prior() -> f64 {
    0.2
}

fn one() -> f64 {
    1.0
}

impl ModelConfig {
    /// Defaults for a task: d = 128, prior 0.2, unit temperature and weights.
    pub fn new(n_concepts: usize, n_classes: usize, image_shape: [usize; 3]) -> Self {
        Self {
            n_concepts,
            embedding_dim: default_embedding_dim(),
            prior: default_prior(),
            temperature: 1.0,
            straight_through: false,
            w_rec: 1.0,
            w_task: 1.0,
            w_kl: 1.0,
            n_classes,
            image_shape,
            backbone_mode: BackboneMode::SmallCnnTrainable,
            seed: 0,
            arch: ArchConfig::default(),
        }
    }

    pub fn mnist_even_odd() -> Self {
        Self::new(10, 2, [3, 28, 28])
    }

    pub fn mnist_addition() -> Self {
        Self::new(10, 19, [3, 28, 56])
    }

    /// A model small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            embedding_dim: 4,
            arch: ArchConfig {
                backbone_channels: [2, 3, 3, 2],
                feature_dim: 5,
                external_feature_dim: None,
                classifier_hidden: 3,
                decoder_channels: [2, 2, 2, 2, 2],
            },
            ..Self::new(2, 2, [3, 8, 8])
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_concepts == 0 {
            return fail("number of concepts must be at least 1".into());
        }
        if self.embedding_dim == 0 {
            return fail("embedding dimension must be at least 1".into());
        }
        if !(self.prior > 0.0 && self.prior < 1.0) {
            return fail(format!("prior must lie in (0, 1), got {}", self.prior));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail(format!(
                "temperature must be positive, got {}",
                self.temperature
            ));
        }
        for (name, w) in [
            ("w_rec", self.w_rec),
            ("w_task", self.w_task),
            ("w_kl", self.w_kl),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return fail(format!(
                    "{name} must be a non-negative finite weight, got {w}"
                ));
            }
        }
        if self.n_classes == 0 {
            return fail("n_classes must be at least 1".into());
        }
        let [c, h, w] = self.image_shape;
        if c == 0 || h == 0 || w == 0 {
            return fail(format!(
                "image_shape {:?} has an empty axis",
                self.image_shape
            ));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return fail(format!(
                "image height and width must be multiples of 4 for the decoder, got {h}x{w}"
            ));
        }
        let a = &self.arch;
        if a.backbone_channels.contains(&0)
            || a.decoder_channels.contains(&0)
            || a.feature_dim == 0
            || a.classifier_hidden == 0
        {
            return fail("architecture widths must be positive".into());
        }
        if self.backbone_mode == BackboneMode::FrozenExternal
            && a.external_feature_dim.is_none_or(|d| d == 0)
        {
            return fail("frozen_external backbone requires arch.external_feature_dim".into());
        }
        Ok(())
    }

    /// Width of the flattened decoder input (concept-major).
    pub fn decoder_input_dim(&self) -> usize {
        self.n_concepts * self.embedding_dim
    }
}
