//! Run configuration, loaded from TOML and echoed into every checkpoint.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::AdamConfig;
use crate::vocab::Vocab;

/// Model dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Dims {
    /// LM embedding width.
    pub e: usize,
    /// Visual embedding width.
    pub d: usize,
    /// Visual prefix length.
    pub k: usize,
    /// Number of [IMG] tokens.
    pub m: usize,
    /// Conditioning sequence length of the image decoder.
    #[serde(rename = "L")]
    pub l: usize,
    /// Query / conditioning width.
    pub r: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    #[serde(rename = "C")]
    pub c: usize,
    /// Base vocabulary size, specials included, [IMG] tokens excluded.
    #[serde(rename = "V")]
    pub v: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            e: 64,
            d: 32,
            k: 4,
            m: 8,
            l: 16,
            r: 32,
            h: 16,
            w: 16,
            c: 3,
            v: Vocab::grammar_size(),
        }
    }
}

impl Dims {
    /// The small configuration used for gradient checks.
    pub fn tiny() -> Self {
        Self {
            e: 8,
            d: 4,
            k: 2,
            m: 2,
            l: 2,
            r: 4,
            h: 4,
            w: 4,
            c: 3,
            v: Vocab::grammar_size(),
        }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.h, self.w, self.c]
    }

    pub fn pixels(&self) -> usize {
        self.h * self.w * self.c
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            ("e", self.e),
            ("d", self.d),
            ("k", self.k),
            ("m", self.m),
            ("L", self.l),
            ("r", self.r),
            ("H", self.h),
            ("W", self.w),
            ("C", self.c),
            ("V", self.v),
        ];
        if let Some((name, _)) = all.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("dimension {name} must be >= 1")));
        }
        if self.v != Vocab::grammar_size() {
            return Err(Error::Config(format!(
                "V = {} but the recipe grammar has {} base tokens",
                self.v,
                Vocab::grammar_size()
            )));
        }
        Ok(())
    }
}

/// Frozen backbone construction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub lm_layers: usize,
    pub lm_heads: usize,
    pub text_encoder_heads: usize,
    pub max_positions: usize,
    /// Steps of language-model pretraining before freezing.
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    /// Synthetic pairs used to fit the image decoder.
    pub decoder_fit_samples: usize,
    pub decoder_ridge: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            lm_layers: 2,
            lm_heads: 4,
            text_encoder_heads: 4,
            max_positions: 128,
            pretrain_steps: 2000,
            pretrain_batch: 8,
            pretrain_lr: 3e-3,
            decoder_fit_samples: 2048,
            decoder_ridge: 1.0,
        }
    }
}

/// The query transformer f_w.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BridgeConfig {
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub steps: usize,
    pub batch_size: usize,
    /// The one seed every random choice derives from.
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub dims: Dims,
    pub backbone: BackboneConfig,
    pub bridge: BridgeConfig,
    pub optim: AdamConfig,
    pub training: TrainingConfig,
    pub paths: Paths,
}

impl Config {
    /// Tiny dims with short pretraining; for tests and gradient checks.
    pub fn tiny() -> Self {
        Self {
            dims: Dims::tiny(),
            backbone: BackboneConfig {
                lm_heads: 2,
                text_encoder_heads: 2,
                max_positions: 64,
                pretrain_steps: 20,
                pretrain_batch: 2,
                decoder_fit_samples: 64,
                ..BackboneConfig::default()
            },
            bridge: BridgeConfig {
                encoder_layers: 1,
                decoder_layers: 1,
                heads: 2,
            },
            training: TrainingConfig {
                steps: 10,
                batch_size: 2,
                seed: 3,
            },
            ..Config::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.backbone.lm_layers == 0 || self.bridge.encoder_layers == 0 || self.bridge.decoder_layers == 0 {
            return Err(Error::Config("layer counts must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_reported_hyperparameters() {
        let c = Config::default();
        assert_eq!((c.dims.k, c.dims.m), (4, 8));
        assert_eq!(c.training.batch_size, 16);
        assert_eq!(c.optim.lr, 0.001);
        assert_eq!((c.optim.beta1, c.optim.beta2), (0.9, 0.95));
        assert_eq!(c.bridge.encoder_layers + c.bridge.decoder_layers, 8);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = Config::tiny();
        assert_eq!(Config::from_toml_str(&c.to_toml()).unwrap(), c);

        let partial = "[training]\nsteps = 5\nbatch_size = 4\nseed = 9\n";
        let p = Config::from_toml_str(partial).unwrap();
        assert_eq!(p.training.steps, 5);
        assert_eq!(p.dims, Dims::default());
    }

    #[test]
    fn rejects_zero_dims_and_unknown_keys() {
        let mut c = Config::default();
        c.dims.r = 0;
        assert!(c.validate().is_err());
        assert!(Config::from_toml_str("[dims]\nbogus = 1\n").is_err());
    }
}
