//! The JSON run configuration shared by every command.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use roi_saliency::interpret::InterpretConfig;
use roi_saliency::nn::{Cc3dPreset, TrainConfig};
use roi_saliency::synth::SynthConfig;
use serde::{Deserialize, Serialize};

/// Network architecture to build when training from scratch.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    #[default]
    /// Two 3×3 conv/pool stages and a dense sigmoid output, for 2D images.
    Synth,
    /// The 3D (mean, std) volume network.
    Cc3d(Cc3dPreset),
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Training dataset manifest.
    pub train_data: Option<PathBuf>,
    /// Early-stopping validation manifest.
    pub val_data: Option<PathBuf>,
    /// Held-out manifest scored after training.
    pub test_data: Option<PathBuf>,
    /// Dataset analysed by `interpret` and `activations`.
    pub data: Option<PathBuf>,
    pub atlas: Option<PathBuf>,
    pub model: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Table1Config {
    pub repeats: usize,
}

impl Default for Table1Config {
    fn default() -> Self {
        Table1Config { repeats: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub alpha_jsd: Vec<f64>,
    pub alpha_w: Vec<f64>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        let grid = vec![0.001, 0.01, 0.05, 0.1, 0.2];
        SweepConfig {
            alpha_jsd: grid.clone(),
            alpha_w: grid,
        }
    }
}

/// Every knob of the pipeline.
///
/// The top-level `seed` drives all randomness: the `seed` fields inside
/// `synth`, `train` and `interpret.sampling` are overwritten with it when
/// the configuration is resolved.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub synth: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub interpret: InterpretConfig,
    pub table1: Table1Config,
    pub sweep: SweepConfig,
    pub paths: Paths,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(RunConfig::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Applies the seed override, propagates the seed and validates.
    pub fn resolve(mut self, seed: Option<u64>) -> anyhow::Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        self.synth.seed = self.seed;
        self.train.seed = self.seed;
        self.interpret.sampling.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.synth.validate()?;
        self.train.validate()?;
        if self.train.learning_rate <= 0.0 {
            bail!("train.learning_rate must be positive, got {}", self.train.learning_rate);
        }
        self.interpret.validate()?;
        if self.table1.repeats == 0 {
            bail!("table1.repeats must be at least 1");
        }
        for a in self.sweep.alpha_jsd.iter().chain(&self.sweep.alpha_w) {
            if !(0.0..1.0).contains(a) {
                bail!("sweep level {a} outside [0, 1)");
            }
        }
        if let ModelConfig::Cc3d(p) = &self.model {
            if p.filters.contains(&0) || p.hidden == 0 {
                bail!("model filter counts and hidden width must be positive");
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().resolve(None).unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"sede": 1}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"train": {"lr": 1}}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"model": {"arch": "cc3d", "hiden": 3}}"#).is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c: RunConfig = serde_json::from_str(r#"{"train": {"max_epochs": 3}, "model": {"arch": "cc3d"}}"#).unwrap();
        assert_eq!(c.train.max_epochs, 3);
        assert_eq!(c.train.batch_size, TrainConfig::default().batch_size);
        assert_eq!(c.model, ModelConfig::Cc3d(Cc3dPreset::default()));
    }

    #[test]
    fn seed_reaches_every_section() {
        let c = RunConfig::default().resolve(Some(42)).unwrap();
        assert_eq!((c.synth.seed, c.train.seed, c.interpret.sampling.seed), (42, 42, 42));
    }

    #[test]
    fn zero_learning_rate_is_rejected() {
        let mut c = RunConfig::default();
        c.train.learning_rate = 0.0;
        assert!(c.resolve(None).is_err());
    }
}
