//! JSON run configuration shared by all subcommands.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use fovdit_core::bench::MIN_REPS;
use fovdit_core::generate::SampleConfig;
use fovdit_core::mask::{FoveationMask, MaskSpec};
use fovdit_core::model::DiTConfig;
use fovdit_core::tokenizer::CodecConfig;
use fovdit_core::train::TrainConfig;

pub const SEED_ENV: &str = "FOVDIT_SEED";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskSection {
    pub frames: usize,
    pub spec: MaskSpec,
}

impl Default for MaskSection {
    fn default() -> Self {
        Self { frames: 1, spec: MaskSpec::Full }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub ratios: Vec<f64>,
    pub reps: usize,
    /// Latent grid side used for the sweep.
    pub grid: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self { ratios: vec![1.0, 0.75, 0.5, 0.44, 0.3, 0.25], reps: MIN_REPS, grid: 16 }
    }
}

/// Every section and field has a default, so `{}` is a valid config.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Tokenizer settings; they take precedence over `model.codec`.
    pub codec: CodecConfig,
    pub model: DiTConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub mask: MaskSection,
    pub bench: BenchSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text)
    }

    /// Parses, applies `FOVDIT_SEED` and the codec section, then validates.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config: RunConfig = serde_json::from_str(text).map_err(fovdit_core::Error::from).context("parsing run config")?;
        if config.model.codec != CodecConfig::default() && config.model.codec != config.codec {
            bail!(fovdit_core::Error::Validation("model.codec disagrees with the codec section".into()));
        }
        config.model.codec = config.codec;
        if let Some(seed) = env_seed()? {
            config.train.seed = seed;
            config.sample.seed = seed;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.sample.validate()?;
        self.codec.latent_extents(self.train.data.height, self.train.data.width)?;
        if self.mask.frames == 0 {
            bail!(fovdit_core::Error::Validation("mask.frames must be positive".into()));
        }
        if self.bench.ratios.iter().any(|r| !(0.25..=1.0).contains(r)) {
            bail!(fovdit_core::Error::Validation("bench ratios must lie in [0.25, 1]".into()));
        }
        Ok(())
    }

    pub fn build_mask(&self) -> Result<FoveationMask> {
        let (h, w) = self.codec.latent_extents(self.train.data.height, self.train.data.width)?;
        Ok(self.mask.spec.build(self.mask.frames, h, w)?)
    }
}

pub fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .map_err(|_| fovdit_core::Error::Validation(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?,
        )),
        Err(_) => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        let c = RunConfig::parse("{}").unwrap();
        assert_eq!(c.train, TrainConfig { seed: c.train.seed, ..TrainConfig::default() });
        assert_eq!(c.model.depth, 6);
        assert_eq!(c.build_mask().unwrap().sequence_length().ratio, 1.0);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::parse(r#"{"trian": {}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"stepz": 3}}"#).is_err());
    }

    #[test]
    fn conflicting_codec_rejected() {
        assert!(RunConfig::parse(r#"{"codec": {"patch": 2}, "model": {"codec": {"patch": 8}}}"#).is_err());
        let c = RunConfig::parse(r#"{"codec": {"patch": 2}}"#).unwrap();
        assert_eq!(c.model.codec.patch, 2);
    }

    #[test]
    fn invalid_values_rejected() {
        assert!(RunConfig::parse(r#"{"mask": {"frames": 0}}"#).is_err());
        assert!(RunConfig::parse(r#"{"bench": {"ratios": [0.1]}}"#).is_err());
        assert!(RunConfig::parse(r#"{"train": {"batch": 0}}"#).is_err());
        // 64 px images with patch 4 give 16 latents; 30 px does not divide
        assert!(RunConfig::parse(r#"{"train": {"data": {"height": 30, "width": 64}}}"#).is_err());
    }
}
