use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use geofuse_core::fusion::Variant;
use geofuse_core::synthdata::SceneConfig;
use geofuse_core::train::{ModelConfig, TrainConfig};
use geofuse_core::NumericsConfig;

pub const SEED_ENV: &str = "GEOFUSE_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            n_train: 12800,
            n_test: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Variant every cell trains; must mask.
    pub variant: Variant,
    /// Also run gamma = 0 and beta = 0 alongside the unmasked variant (d).
    pub controls: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            gammas: vec![0.4, 0.6, 0.8],
            betas: vec![0.3, 0.5, 0.7],
            variant: Variant::A,
            controls: true,
        }
    }
}

/// Everything one invocation of `run` needs.
///
/// `train.variant` and `train.seed` are overwritten per run from
/// `variants` and `seeds`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Test samples used for the gate and relevance summaries.
    pub diagnostic_samples: usize,
    pub scene: SceneConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub numerics: NumericsConfig,
    pub sweep: Option<SweepConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![1, 2, 3, 4, 5],
            output_dir: PathBuf::from("runs"),
            diagnostic_samples: 100,
            scene: SceneConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            numerics: NumericsConfig::default(),
            sweep: None,
        }
    }
}

fn field(path: &str, r: geofuse_core::Result<()>) -> Result<()> {
    r.map_err(|e| anyhow::anyhow!("invalid config field `{path}`: {e}"))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).context("config does not parse")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Reads, applies the seed override from the environment, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg: Self = toml::from_str(&text).with_context(|| format!("config {} does not parse", path.display()))?;
        if let Ok(v) = std::env::var(SEED_ENV) {
            cfg.seeds = parse_seeds(&v).with_context(|| format!("invalid {SEED_ENV}"))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            bail!("invalid config field `variants`: at least one variant is required");
        }
        if self.seeds.is_empty() {
            bail!("invalid config field `seeds`: at least one seed is required");
        }
        if self.data.n_train == 0 || self.data.n_test == 0 {
            bail!("invalid config field `data`: n_train and n_test must be positive");
        }
        field("scene", self.scene.validate())?;
        field("train", self.train.validate())?;
        field("numerics", self.numerics.validate())?;
        let m = &self.model;
        if m.heads == 0 || !self.scene.channels.model.is_multiple_of(m.heads) {
            bail!("invalid config field `model.heads`: must divide scene.channels.model");
        }
        if m.n_layers == 0 || m.bottleneck_len == 0 {
            bail!("invalid config field `model`: n_layers and bottleneck_len must be positive");
        }
        if let Some(s) = &self.sweep {
            if s.gammas.is_empty() || s.betas.is_empty() {
                bail!("invalid config field `sweep`: gammas and betas must be nonempty");
            }
            if !s.variant.masks() {
                bail!("invalid config field `sweep.variant`: variant {} does not mask", s.variant);
            }
            for &v in s.gammas.iter().chain(&s.betas) {
                if !(0.0..=1.0).contains(&v) {
                    bail!("invalid config field `sweep`: {v} is outside [0, 1]");
                }
            }
        }
        Ok(())
    }
}

pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let seeds = s
        .split(',')
        .map(|p| p.trim().parse::<u64>().with_context(|| format!("`{p}` is not a seed")))
        .collect::<Result<Vec<_>>>()?;
    if seeds.is_empty() {
        bail!("empty seed list");
    }
    Ok(seeds)
}

pub fn parse_variants(s: &str) -> Result<Vec<Variant>> {
    s.split(',')
        .map(|p| Variant::parse(p).with_context(|| format!("`{p}` is not a variant (a-f)")))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let cfg = ExperimentConfig {
            sweep: Some(SweepConfig::default()),
            ..ExperimentConfig::default()
        };
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_fields_are_named() {
        let err = ExperimentConfig::from_toml("[train]\nlr_peak = -1.0\n").unwrap_err();
        assert!(format!("{err:#}").contains("train"));
        let err = ExperimentConfig::from_toml("bogus = 1\n").unwrap_err();
        assert!(format!("{err:#}").contains("bogus"));
        let err = ExperimentConfig::from_toml("seeds = []\n").unwrap_err();
        assert!(err.to_string().contains("seeds"));
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_seeds("1, 2,3").unwrap(), vec![1, 2, 3]);
        assert!(parse_seeds("1,x").is_err());
        assert_eq!(parse_variants("a,f").unwrap(), vec![Variant::A, Variant::F]);
        assert!(parse_variants("g").is_err());
    }
}
