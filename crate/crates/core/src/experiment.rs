//! End-to-end pipelines shared by the command line and the integration tests: training
//! loops over datasets, tokenization, the tokenizer roadmap and run manifests.

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::sha256_hex;
use crate::config::ExperimentConfig;
use crate::data::{images_to_tensor, resize_center_crop, sample_batch, Dataset, Stage};
use crate::error::{Error, Result};
use crate::eval::{reconstruction_eval, EvalRecord, Reconstructor};
use crate::quantizers::{BitGrid, LfqConfig};
use crate::scalar::Real;
use crate::tokenizer::{Autoencoder, QuantizerConfig};
use crate::tokens::TokenDataset;
use crate::trainer::{Stage1Config, Stage1Report, Stage1Trainer, Stage2Report, Stage2Trainer};

/// Runs `iters` Stage-I steps on augmented batches drawn with the trainer's own RNG.
pub fn train_stage1<T: Real>(
    trainer: &mut Stage1Trainer<T>,
    data: &dyn Dataset,
    resolution: u32,
    iters: u64,
    mut on_step: impl FnMut(&Stage1Report),
) -> Result<()> {
    let batch = trainer.config().optim.stage1.batch;
    for _ in 0..iters {
        let (x, _) = sample_batch::<T, _>(data, batch, Some(Stage::One), resolution, trainer.rng_mut())?;
        let r = trainer.step(&x)?;
        on_step(&r);
    }
    Ok(())
}

/// Tokenizes every image (shorter-edge resize and center crop) in batches of `batch`.
pub fn tokenize_dataset<T: Real>(
    tokenizer: &Autoencoder<T>,
    digest: &str,
    data: &dyn Dataset,
    resolution: u32,
    batch: usize,
) -> Result<TokenDataset> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("cannot tokenize an empty dataset".into()));
    }
    let mut grids = Vec::new();
    let mut classes = Vec::with_capacity(data.len());
    let mut start = 0;
    while start < data.len() {
        let end = (start + batch.max(1)).min(data.len());
        let mut imgs = Vec::with_capacity(end - start);
        for i in start..end {
            let (img, c) = data.get(i)?;
            imgs.push(resize_center_crop(&img, resolution));
            classes.push(c);
        }
        grids.push(tokenizer.tokenize_bits(&images_to_tensor::<T>(&imgs)?)?);
        start = end;
    }
    TokenDataset::new(BitGrid::concat(&grids)?, classes, digest.to_string())
}

/// Runs `iters` Stage-II steps on pre-tokenized samples drawn with the trainer's RNG.
pub fn train_stage2<T: Real>(
    trainer: &mut Stage2Trainer<T>,
    tokens: &TokenDataset,
    iters: u64,
    mut on_step: impl FnMut(&Stage2Report),
) -> Result<()> {
    if tokens.is_empty() {
        return Err(Error::InvalidArgument("empty token dataset".into()));
    }
    let batch = trainer.config().optim.stage2.batch;
    for _ in 0..iters {
        let idx: Vec<usize> = (0..batch).map(|_| trainer.rng_mut().random_range(0..tokens.len())).collect();
        let grid = BitGrid::concat(&idx.iter().map(|&i| tokens.grid.slice(i..i + 1)).collect::<Vec<_>>())?;
        let classes: Vec<u32> = idx.iter().map(|&i| tokens.classes[i]).collect();
        let r = trainer.step(&grid, &classes)?;
        on_step(&r);
    }
    Ok(())
}

/// Runs `iters` Stage-II steps tokenizing freshly augmented images with a frozen tokenizer.
pub fn train_stage2_online<T: Real>(
    trainer: &mut Stage2Trainer<T>,
    tokenizer: &Autoencoder<T>,
    data: &dyn Dataset,
    resolution: u32,
    iters: u64,
    mut on_step: impl FnMut(&Stage2Report),
) -> Result<()> {
    let batch = trainer.config().optim.stage2.batch;
    for _ in 0..iters {
        let (x, classes) = sample_batch::<T, _>(data, batch, Some(Stage::Two), resolution, trainer.rng_mut())?;
        let grid = tokenizer.tokenize_bits(&x)?;
        let r = trainer.step(&grid, &classes)?;
        on_step(&r);
    }
    Ok(())
}

/// Steps of the tokenizer modernization ladder, applied cumulatively.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rung {
    /// Attention blocks, asymmetric decoder, half base channels, constant learning rate,
    /// codebook quantizer, no perceptual or adversarial loss.
    Baseline,
    /// Purely convolutional, symmetric, cosine schedule with warmup.
    BasicRecipe,
    /// Full base channels.
    Capacity,
    /// Logit-space perceptual loss.
    Perceptual,
    /// Group-norm blur-pool discriminator with LeCAM.
    Discriminator,
    /// Evaluation with EMA weights.
    Ema,
    /// Lookup-free bit quantizer with entropy loss.
    EmbeddingFree,
}

impl Rung {
    pub const ALL: [Rung; 7] = [
        Rung::Baseline,
        Rung::BasicRecipe,
        Rung::Capacity,
        Rung::Perceptual,
        Rung::Discriminator,
        Rung::Ema,
        Rung::EmbeddingFree,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rung::Baseline => "baseline",
            Rung::BasicRecipe => "basic_recipe",
            Rung::Capacity => "capacity",
            Rung::Perceptual => "perceptual",
            Rung::Discriminator => "discriminator",
            Rung::Ema => "ema",
            Rung::EmbeddingFree => "embedding_free",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown roadmap rung `{s}`")))
    }

    /// Stage-I configuration of this rung, and whether it is evaluated with EMA weights.
    pub fn stage1(self, base: &ExperimentConfig) -> (Stage1Config, bool) {
        let mut cfg = base.stage1();
        let codebook_size = match &base.quantizer {
            QuantizerConfig::Lfq(LfqConfig { bits, .. }) => 1usize << bits,
            QuantizerConfig::Vq { codebook_size } => *codebook_size,
        };
        if self < Rung::EmbeddingFree {
            cfg.quantizer = QuantizerConfig::Vq { codebook_size };
        }
        if self < Rung::Discriminator {
            cfg.losses.adv_start_iter = u64::MAX;
        }
        if self < Rung::Perceptual {
            cfg.losses.perceptual = 0.0;
        }
        if self < Rung::Capacity {
            cfg.autoencoder.base_channels = (cfg.autoencoder.base_channels / 2).max(1);
            cfg.discriminator.base_channels = (cfg.discriminator.base_channels / 2).max(1);
        }
        if self < Rung::BasicRecipe {
            cfg.autoencoder.use_attention = true;
            cfg.autoencoder.decoder_res_blocks = Some(cfg.autoencoder.res_blocks_per_stage + 1);
            cfg.optim.stage1.warmup = 0;
            cfg.optim.stage1.end_lr_fraction = 1.0;
        }
        (cfg, self >= Rung::Ema)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RungResult {
    pub rung: Rung,
    pub rfid_proxy: f64,
    pub mse: f64,
}

/// Trains each rung for `iters` steps and scores reconstructions of the first
/// `eval_images` images.
pub fn run_roadmap<T: Real>(
    base: &ExperimentConfig,
    rungs: &[Rung],
    data: &dyn Dataset,
    iters: u64,
    eval_images: usize,
) -> Result<Vec<RungResult>> {
    let res = base.data.resolution() as u32;
    let extractor = base.perceptual.build::<T>()?;
    let mut out = Vec::new();
    for &rung in rungs {
        let (cfg, use_ema) = rung.stage1(base);
        let mut trainer = Stage1Trainer::<T>::new(&cfg)?;
        train_stage1(&mut trainer, data, res, iters, |_| {})?;
        let ema;
        let model: &dyn Reconstructor = if use_ema {
            ema = trainer.ema_model()?;
            &ema
        } else {
            trainer.model()
        };
        let e = reconstruction_eval::<T>(data, eval_images, res, 16, model, extractor.as_ref())?;
        out.push(RungResult {
            rung,
            rfid_proxy: e.rfid_proxy,
            mse: e.mse,
        });
    }
    Ok(out)
}

/// Record of one command invocation, written as `manifest.json` in the run directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_digest: String,
    pub seed: u64,
    /// sha256 over the sorted `(name, sha256)` list of produced files.
    pub content_hash: String,
    pub outputs: Vec<(String, String)>,
    pub records: Vec<EvalRecord>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &ExperimentConfig) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_digest: cfg.digest()?,
            seed: cfg.seed,
            content_hash: String::new(),
            outputs: Vec::new(),
            records: Vec::new(),
        })
    }

    /// Registers a produced file by content hash.
    pub fn add_output(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        self.outputs.push((name, sha256_hex(&bytes)));
        Ok(())
    }

    pub fn write(&mut self, dir: &Path) -> Result<PathBuf> {
        self.outputs.sort();
        let listing: String = self.outputs.iter().map(|(n, h)| format!("{n}:{h}\n")).collect();
        self.content_hash = sha256_hex(listing.as_bytes());
        let path = dir.join(format!("manifest-{}.json", self.command));
        std::fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}
