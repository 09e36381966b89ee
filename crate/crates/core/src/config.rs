//! Experiment configuration: one TOML document covering every stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::generator::GeneratorConfig;
use crate::losses::{DiscriminatorConfig, LossWeights, PerceptualConfig};
use crate::quantizers::LfqConfig;
use crate::sampler::SampleConfig;
use crate::tokenizer::{AutoencoderConfig, QuantizerConfig};
use crate::trainer::{OptimConfig, Stage1Config, Stage2Config, StageOptim};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DatasetSpec,
    pub autoencoder: AutoencoderConfig,
    pub quantizer: QuantizerConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub perceptual: PerceptualConfig,
    pub lecam_decay: f64,
    pub generator: GeneratorConfig,
    pub optim: OptimConfig,
    pub sample: SampleConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            data: DatasetSpec::default(),
            autoencoder: AutoencoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            lecam_decay: 0.999,
            generator: GeneratorConfig::default(),
            optim: OptimConfig::default(),
            sample: SampleConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// 64x64 images, 8-bit tokens, the desk-sized tokenizer and generator.
    pub fn desk() -> Self {
        Self {
            output_dir: PathBuf::from("runs/desk"),
            autoencoder: AutoencoderConfig::desk(),
            quantizer: QuantizerConfig::Lfq(LfqConfig {
                bits: 8,
                ..LfqConfig::default()
            }),
            discriminator: DiscriminatorConfig {
                base_channels: 64,
                ..DiscriminatorConfig::default()
            },
            generator: GeneratorConfig::desk(),
            optim: OptimConfig {
                stage1: StageOptim {
                    warmup: 500,
                    total_iters: 20_000,
                    batch: 32,
                    ..StageOptim::stage1()
                },
                stage2: StageOptim {
                    warmup: 500,
                    total_iters: 20_000,
                    batch: 64,
                    ..StageOptim::stage2()
                },
                ..OptimConfig::default()
            },
            ..Self::default()
        }
    }

    /// Minutes-scale variant of [`ExperimentConfig::desk`] for smoke runs on one CPU core:
    /// 8 base channels, 2000 iterations per stage, adversarial loss from iteration 1000.
    pub fn toy() -> Self {
        let desk = Self::desk();
        Self {
            output_dir: PathBuf::from("runs/toy"),
            autoencoder: AutoencoderConfig {
                base_channels: 8,
                res_blocks_per_stage: 1,
                mid_blocks: 1,
                latent_dim: 16,
                norm_groups: 8,
                ..AutoencoderConfig::default()
            },
            discriminator: DiscriminatorConfig {
                base_channels: 8,
                ..DiscriminatorConfig::default()
            },
            losses: LossWeights {
                adv_start_iter: 1_000,
                ..LossWeights::default()
            },
            optim: OptimConfig {
                stage1: StageOptim {
                    base_lr: 1e-3,
                    warmup: 100,
                    total_iters: 2_000,
                    batch: 8,
                    ..StageOptim::stage1()
                },
                stage2: StageOptim {
                    base_lr: 1e-3,
                    warmup: 100,
                    total_iters: 2_000,
                    batch: 16,
                    ..StageOptim::stage2()
                },
                ema_decay: 0.99,
                ..OptimConfig::default()
            },
            sample: SampleConfig {
                steps: 8,
                ..SampleConfig::default()
            },
            ..desk
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Applies `dotted.key=value` overrides; values are parsed as TOML, falling back to a
    /// bare string. Unknown keys are rejected.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        if overrides.is_empty() {
            return Ok(self.clone());
        }
        let mut doc: toml::Table = toml::from_str(&self.to_toml_string()?).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (key, raw) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not of the form key=value")))?;
            let value = parse_value(raw.trim());
            set_path(&mut doc, key.trim(), value)?;
        }
        let text = toml::to_string(&doc).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_toml_str(&text)
    }

    /// Hex sha256 of the canonical JSON form.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(serde_json::to_string(self)?.as_bytes()))
    }

    pub fn validate(&self) -> Result<()> {
        self.stage1().validate()?;
        self.generator.validate()?;
        self.sample.validate()?;
        self.check_stage_bits()
    }

    /// The generator and the tokenizer must agree on the token width.
    pub fn check_stage_bits(&self) -> Result<()> {
        match self.quantizer.bits() {
            Some(k) if k != self.generator.bits => Err(Error::ConfigMismatch {
                field: "generator.bits".into(),
                expected: k.to_string(),
                found: self.generator.bits.to_string(),
            }),
            None => Err(Error::Config("masked bit generation needs a lookup-free quantizer".into())),
            _ => Ok(()),
        }
    }

    pub fn stage1(&self) -> Stage1Config {
        Stage1Config {
            autoencoder: self.autoencoder.clone(),
            quantizer: self.quantizer.clone(),
            discriminator: self.discriminator.clone(),
            losses: self.losses,
            perceptual: self.perceptual.clone(),
            optim: self.optim.clone(),
            lecam_decay: self.lecam_decay,
            seed: self.seed,
        }
    }

    pub fn stage2(&self) -> Stage2Config {
        Stage2Config {
            generator: self.generator.clone(),
            optim: self.optim.clone(),
            seed: self.seed,
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_path(doc: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    let mut table = doc;
    for (i, part) in parts.iter().enumerate() {
        if i + 1 == parts.len() {
            table.insert(part.to_string(), value);
            return Ok(());
        }
        table = match table.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new())) {
            toml::Value::Table(t) => t,
            _ => return Err(Error::Config(format!("`{key}`: `{part}` is not a table"))),
        };
    }
    Err(Error::Config("empty override key".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_survive_serialization() {
        for cfg in [ExperimentConfig::default(), ExperimentConfig::desk(), ExperimentConfig::toy()] {
            let text = cfg.to_toml_string().unwrap();
            assert_eq!(ExperimentConfig::from_toml_str(&text).unwrap(), cfg);
        }
        let d = ExperimentConfig::default();
        assert_eq!(d.losses.recon, 4.0);
        assert_eq!(d.optim.stage2.beta2, 0.96);
        assert_eq!(d.generator.hidden, 1024);
        assert_eq!(d.autoencoder.res_blocks_per_stage, 2);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml_str("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml_str("[losses]\nrecon_weight = 1.0").is_err());
        assert_eq!(ExperimentConfig::from_toml_str("seed = 3").unwrap().seed, 3);
    }

    #[test]
    fn dotted_overrides() {
        let cfg = ExperimentConfig::toy()
            .with_overrides(&["seed=9".into(), "optim.stage1.base_lr=0.5".into(), "output_dir=out/x".into()])
            .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.optim.stage1.base_lr, 0.5);
        assert_eq!(cfg.output_dir, PathBuf::from("out/x"));
        assert!(ExperimentConfig::toy().with_overrides(&["optim.nope=1".into()]).is_err());
        assert_ne!(cfg.digest().unwrap(), ExperimentConfig::toy().digest().unwrap());
    }

    #[test]
    fn stage_bit_widths_must_agree() {
        let mut cfg = ExperimentConfig::toy();
        cfg.validate().unwrap();
        cfg.generator.bits = 12;
        assert!(matches!(cfg.validate(), Err(Error::ConfigMismatch { .. })));
    }
}
