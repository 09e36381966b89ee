//! Optimization machinery and the two training loops.
//!
//! Each trainer owns its parameters, optimizer moments, EMA shadows and a ChaCha8 stream;
//! one call to `step` is one transaction over that state. Batches are supplied by the
//! caller, which may draw them from [`Stage1Trainer::rng_mut`] so that data order is part
//! of the checkpointed state.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{ensure_same_config, Checkpoint, RngState};
use crate::error::{Error, Result};
use crate::generator::{self, apply_mask, drop_class_label, masked_bits_loss, sample_training_mask, GeneratorConfig, MaskBit};
use crate::losses::{
    self, generator_adv_loss, hinge_d_loss, l2_reconstruction_loss, lecam_regularization, perceptual_loss, scalar_value,
    stage1_generator_objective, Discriminator, DiscriminatorConfig, FeatureExtractor, LeCamState, LossWeights, PerceptualConfig,
    Stage1Parts,
};
use crate::nn::ParamStore;
use crate::quantizers::BitGrid;
use crate::scalar::Real;
use crate::tokenizer::{self, Autoencoder, AutoencoderConfig, QuantizerConfig};

/// Optimizer and schedule settings of one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOptim {
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    /// Final learning rate as a fraction of `base_lr`.
    pub end_lr_fraction: f64,
    pub warmup: u64,
    pub total_iters: u64,
    pub batch: usize,
}

impl StageOptim {
    pub fn stage1() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            base_lr: 1e-4,
            end_lr_fraction: 0.1,
            warmup: 5_000,
            total_iters: 1_350_000,
            batch: 256,
        }
    }

    pub fn stage2() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.96,
            weight_decay: 0.045,
            batch: 1024,
            ..Self::stage1()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.warmup >= self.total_iters {
            return Err(Error::Config(format!("warmup {} must be below total_iters {}", self.warmup, self.total_iters)));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(0.0..=1.0).contains(&self.end_lr_fraction) {
            return Err(Error::Config("end_lr_fraction must lie in [0, 1]".into()));
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.batch == 0 {
            return Err(Error::Config("weight decay must be >= 0 and batch > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub stage1: StageOptim,
    pub stage2: StageOptim,
    pub grad_clip_norm: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            stage1: StageOptim::stage1(),
            stage2: StageOptim::stage2(),
            grad_clip_norm: 1.0,
            adam_eps: 1e-8,
            ema_decay: 0.999,
        }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        self.stage1.validate()?;
        self.stage2.validate()?;
        if !(self.grad_clip_norm > 0.0) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("grad_clip_norm and adam_eps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr`, then cosine decay to `end_lr_fraction * base_lr` at
/// `total_iters`; constant afterwards.
pub fn lr_at(step: u64, cfg: &StageOptim) -> f64 {
    let base = cfg.base_lr;
    if step < cfg.warmup {
        return base * step as f64 / cfg.warmup as f64;
    }
    let end = base * cfg.end_lr_fraction;
    let progress = ((step - cfg.warmup) as f64 / (cfg.total_iters - cfg.warmup) as f64).min(1.0);
    end + 0.5 * (base - end) * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Global L2 norm of the gradients of `params` (missing gradients count as zero).
pub fn grad_norm(params: &[(String, Var)], grads: &GradStore) -> Result<f64> {
    let mut sq = 0.0;
    for (_, v) in params {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += scalar_value(&g.sqr()?.sum_all()?)?;
        }
    }
    Ok(sq.sqrt())
}

/// Factor that brings a gradient of norm `norm` down to at most `max_norm`.
pub fn clip_factor(norm: f64, max_norm: f64) -> f64 {
    if norm > max_norm {
        max_norm / (norm + 1e-6)
    } else {
        1.0
    }
}

/// AdamW with decoupled weight decay over a fixed, named parameter set.
#[derive(Debug, Clone)]
pub struct AdamW {
    params: Vec<(String, Var)>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

/// Gradient norms observed by one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipReport {
    pub norm: f64,
    pub clipped_norm: f64,
}

impl AdamW {
    pub fn new(params: Vec<(String, Var)>, cfg: &StageOptim, eps: f64) -> Result<Self> {
        let m = params.iter().map(|(_, v)| v.as_tensor().zeros_like()).collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            v: m.clone(),
            m,
            params,
            t: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps,
            weight_decay: cfg.weight_decay,
        })
    }

    pub fn params(&self) -> &[(String, Var)] {
        &self.params
    }

    pub fn steps_taken(&self) -> u64 {
        self.t
    }

    /// Clips the global gradient norm to `max_norm`, then applies one update at `lr`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, grads: &GradStore, lr: f64, max_norm: f64) -> Result<ClipReport> {
        let norm = grad_norm(&self.params, grads)?;
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm"));
        }
        let scale = clip_factor(norm, max_norm);
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, var)) in self.params.iter().enumerate() {
            let Some(g) = grads.get(var.as_tensor()) else { continue };
            let g = (g.detach() * scale)?;
            self.m[i] = ((&self.m[i] * self.beta1)? + (&g * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?;
            let mhat = (&self.m[i] / bc1)?;
            let denom = ((&self.v[i] / bc2)?.sqrt()? + self.eps)?;
            let p = var.as_tensor();
            let update = ((mhat / denom)? + (p * self.weight_decay)?)?;
            var.set(&(p - (update * lr)?)?)?;
        }
        Ok(ClipReport {
            norm,
            clipped_norm: norm * scale,
        })
    }

    /// Moments keyed `m/<param>` and `v/<param>`.
    pub fn state(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (i, (name, _)) in self.params.iter().enumerate() {
            out.insert(format!("m/{name}"), self.m[i].clone());
            out.insert(format!("v/{name}"), self.v[i].clone());
        }
        out
    }

    pub fn restore(&mut self, state: &BTreeMap<String, Tensor>, steps_taken: u64) -> Result<()> {
        for (i, (name, var)) in self.params.iter().enumerate() {
            for (slot, key) in [(&mut self.m[i], format!("m/{name}")), (&mut self.v[i], format!("v/{name}"))] {
                let t = state.get(&key).ok_or_else(|| Error::Corrupt {
                    kind: "checkpoint",
                    reason: format!("missing optimizer moment {key}"),
                })?;
                if t.dims() != var.dims() {
                    return Err(Error::shape("optimizer moment", format!("{:?}", var.dims()), format!("{:?}", t.dims())));
                }
                *slot = t.to_dtype(var.dtype())?;
            }
        }
        self.t = steps_taken;
        Ok(())
    }
}

/// Exponential moving average of a parameter set.
#[derive(Debug, Clone)]
pub struct EmaState {
    pub decay: f64,
    shadow: BTreeMap<String, Tensor>,
}

impl EmaState {
    pub fn new(params: BTreeMap<String, Tensor>, decay: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay must lie in [0, 1), got {decay}")));
        }
        Ok(Self { decay, shadow: params })
    }

    pub fn shadow(&self) -> &BTreeMap<String, Tensor> {
        &self.shadow
    }

    /// `shadow <- decay * shadow + (1 - decay) * params`.
    pub fn update(&mut self, params: &BTreeMap<String, Tensor>) -> Result<()> {
        if params.len() != self.shadow.len() {
            return Err(Error::shape("ema_update", self.shadow.len(), params.len()));
        }
        for (name, s) in self.shadow.iter_mut() {
            let p = params.get(name).ok_or_else(|| Error::InvalidArgument(format!("EMA parameter {name} missing")))?;
            if p.dims() != s.dims() {
                return Err(Error::shape("ema_update", format!("{:?}", s.dims()), format!("{:?}", p.dims())));
            }
            *s = ((&*s * self.decay)? + (p.detach() * (1.0 - self.decay))?)?.detach();
        }
        Ok(())
    }
}

fn vars_snapshot(vars: &[(String, Var)]) -> BTreeMap<String, Tensor> {
    vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().detach().copy().expect("copy of a CPU tensor"))).collect()
}

fn ensure_finite(v: f64, what: &'static str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::NonFinite(what))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub autoencoder: AutoencoderConfig,
    pub quantizer: QuantizerConfig,
    pub discriminator: DiscriminatorConfig,
    pub losses: LossWeights,
    pub perceptual: PerceptualConfig,
    pub optim: OptimConfig,
    pub lecam_decay: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            autoencoder: AutoencoderConfig::default(),
            quantizer: QuantizerConfig::default(),
            discriminator: DiscriminatorConfig::default(),
            losses: LossWeights::default(),
            perceptual: PerceptualConfig::default(),
            optim: OptimConfig::default(),
            lecam_decay: 0.999,
            seed: 0,
        }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<()> {
        self.autoencoder.validate()?;
        self.losses.validate()?;
        self.optim.validate()?;
        if let QuantizerConfig::Lfq(l) = &self.quantizer {
            l.validate()?;
            if l.entropy_weight != self.losses.entropy {
                return Err(Error::ConfigMismatch {
                    field: "quantizer.entropy_weight".into(),
                    expected: self.losses.entropy.to_string(),
                    found: l.entropy_weight.to_string(),
                });
            }
        }
        LeCamState {
            decay: self.lecam_decay,
            ..LeCamState::default()
        }
        .validate()
    }
}

/// Scalar diagnostics of one Stage-I step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Stage1Report {
    pub step: u64,
    pub lr: f64,
    pub total: f64,
    pub recon: f64,
    pub perceptual: f64,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
    pub disc_loss: Option<f64>,
}

pub const STAGE1_KIND: &str = "stage1";
pub const STAGE2_KIND: &str = "stage2";

/// Tokenizer training: generator step every iteration, discriminator step once the
/// adversarial loss is active.
pub struct Stage1Trainer<T: Real> {
    cfg: Stage1Config,
    store: ParamStore<T>,
    model: Autoencoder<T>,
    disc: Discriminator<T>,
    extractor: Box<dyn FeatureExtractor>,
    gen_opt: AdamW,
    disc_opt: AdamW,
    ema: EmaState,
    lecam: LeCamState,
    step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> Stage1Trainer<T> {
    pub fn new(cfg: &Stage1Config) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::<T>::new(cfg.seed);
        let model = Autoencoder::new(&store, &cfg.autoencoder, &cfg.quantizer)?;
        let disc = Discriminator::new(&store, &cfg.discriminator)?;
        let gen_vars = store.vars_with_prefix(&format!("{}.", tokenizer::PREFIX));
        let disc_vars = store.vars_with_prefix(&format!("{}.", losses::DISCRIMINATOR_PREFIX));
        let ema = EmaState::new(vars_snapshot(&gen_vars), cfg.optim.ema_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        Ok(Self {
            extractor: cfg.perceptual.build::<T>()?,
            gen_opt: AdamW::new(gen_vars, &cfg.optim.stage1, cfg.optim.adam_eps)?,
            disc_opt: AdamW::new(disc_vars, &cfg.optim.stage1, cfg.optim.adam_eps)?,
            ema,
            lecam: LeCamState {
                decay: cfg.lecam_decay,
                ..LeCamState::default()
            },
            step: 0,
            rng,
            cfg: cfg.clone(),
            store,
            model,
            disc,
        })
    }

    pub fn config(&self) -> &Stage1Config {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &Autoencoder<T> {
        &self.model
    }

    pub fn discriminator(&self) -> &Discriminator<T> {
        &self.disc
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn lecam(&self) -> &LeCamState {
        &self.lecam
    }

    pub fn ema(&self) -> &EmaState {
        &self.ema
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// An independent tokenizer holding the EMA weights.
    pub fn ema_model(&self) -> Result<Autoencoder<T>> {
        let store = ParamStore::<T>::from_tensors(self.ema.shadow())?;
        Autoencoder::new(&store, &self.cfg.autoencoder, &self.cfg.quantizer)
    }

    /// One training iteration on `images` (`(B, 3, H, W)` in `[-1, 1]`).
    pub fn step(&mut self, images: &Tensor) -> Result<Stage1Report> {
        let images = images.to_dtype(T::DTYPE)?;
        let w = self.cfg.losses;
        let adversarial = w.adversarial_active(self.step);
        let lr = lr_at(self.step, &self.cfg.optim.stage1);
        let clip = self.cfg.optim.grad_clip_norm;

        let rec = self.model.reconstruct(&images)?;
        let recon = l2_reconstruction_loss(&images, &rec.recon)?;
        let perceptual = if w.perceptual > 0.0 {
            Some(perceptual_loss(&images, &rec.recon, self.extractor.as_ref())?)
        } else {
            None
        };
        let adv = if adversarial {
            Some(generator_adv_loss(&self.disc.forward(&rec.recon)?)?)
        } else {
            None
        };
        let parts = Stage1Parts {
            recon: Some(recon.clone()),
            perceptual: perceptual.clone(),
            commitment: rec.aux.commit.clone(),
            codebook: rec.aux.codebook.clone(),
            entropy: rec.aux.entropy.clone(),
            adversarial: adv,
        };
        let total = stage1_generator_objective(&parts, &w, self.step)?;
        let total_v = ensure_finite(scalar_value(&total)?, "stage-1 generator loss")?;
        let grads = total.backward()?;
        let clipped = self.gen_opt.step(&grads, lr, clip)?;
        self.ema.update(&vars_snapshot(self.gen_opt.params()))?;

        let disc_loss = if adversarial {
            let fake = rec.recon.detach();
            let real_logits = self.disc.forward(&images)?;
            let fake_logits = self.disc.forward(&fake)?;
            let lecam = lecam_regularization(&real_logits, &fake_logits, &self.lecam)?;
            let loss = (hinge_d_loss(&real_logits, &fake_logits)? + (lecam * w.lecam)?)?;
            let v = ensure_finite(scalar_value(&loss)?, "discriminator loss")?;
            let grads = loss.backward()?;
            self.disc_opt.step(&grads, lr, clip)?;
            let mr = scalar_value(&real_logits.mean_all()?)?;
            let mf = scalar_value(&fake_logits.mean_all()?)?;
            self.lecam.update(mr, mf);
            Some(v)
        } else {
            None
        };
        self.step += 1;
        Ok(Stage1Report {
            step: self.step,
            lr,
            total: total_v,
            recon: scalar_value(&recon)?,
            perceptual: match &perceptual {
                Some(p) => scalar_value(p)?,
                None => 0.0,
            },
            grad_norm: clipped.norm,
            clipped_grad_norm: clipped.clipped_norm,
            disc_loss,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            kind: STAGE1_KIND.into(),
            config_json: serde_json::to_string(&self.cfg)?,
            step: self.step,
            rng: RngState::capture(&self.rng),
            scalars: BTreeMap::new(),
            arrays: BTreeMap::new(),
        };
        ck.insert_section("param/", &self.store.snapshot()?);
        ck.insert_section("ema/", self.ema.shadow());
        ck.insert_section("opt.gen/", &self.gen_opt.state());
        ck.insert_section("opt.disc/", &self.disc_opt.state());
        ck.scalars.insert("opt.gen.t".into(), self.gen_opt.steps_taken() as f64);
        ck.scalars.insert("opt.disc.t".into(), self.disc_opt.steps_taken() as f64);
        ck.scalars.insert("lecam.ema_real".into(), self.lecam.ema_real);
        ck.scalars.insert("lecam.ema_fake".into(), self.lecam.ema_fake);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(STAGE1_KIND)?;
        let cfg: Stage1Config = serde_json::from_str(&ck.config_json)?;
        let mut t = Self::new(&cfg)?;
        t.store.assign(&ck.section("param/"))?;
        t.ema = EmaState::new(ck.section("ema/"), cfg.optim.ema_decay)?;
        t.gen_opt.restore(&ck.section("opt.gen/"), ck.scalar("opt.gen.t")? as u64)?;
        t.disc_opt.restore(&ck.section("opt.disc/"), ck.scalar("opt.disc.t")? as u64)?;
        t.lecam.ema_real = ck.scalar("lecam.ema_real")?;
        t.lecam.ema_fake = ck.scalar("lecam.ema_fake")?;
        t.step = ck.step;
        t.rng = ck.rng.restore();
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Loads a checkpoint and requires its configuration to equal `expected`.
    pub fn load_expecting(path: &Path, expected: &Stage1Config) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(STAGE1_KIND)?;
        ensure_same_config(expected, &ck.config_json)?;
        Self::from_checkpoint(&ck)
    }
}

/// The EMA tokenizer stored in a Stage-I checkpoint, with its configuration and digest.
pub fn load_tokenizer<T: Real>(path: &Path) -> Result<(Autoencoder<T>, Stage1Config, String)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(STAGE1_KIND)?;
    let cfg: Stage1Config = serde_json::from_str(&ck.config_json)?;
    let store = ParamStore::<T>::from_tensors(&ck.section("ema/"))?;
    let model = Autoencoder::new(&store, &cfg.autoencoder, &cfg.quantizer)?;
    Ok((model, cfg, tokenizer_digest(&ck)))
}

/// Content digest identifying a tokenizer: its configuration and EMA weights.
pub fn tokenizer_digest(ck: &Checkpoint) -> String {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(ck.config_json.as_bytes());
    for (name, t) in ck.section("ema/") {
        h.update(name.as_bytes());
        if let Ok(v) = t.to_dtype(DType::F64).and_then(|t| t.flatten_all()).and_then(|t| t.to_vec1::<f64>()) {
            for x in v {
                h.update(x.to_le_bytes());
            }
        }
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage2Config {
    pub generator: GeneratorConfig,
    pub optim: OptimConfig,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            generator: GeneratorConfig::default(),
            optim: OptimConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct Stage2Report {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub masked_groups: usize,
    pub grad_norm: f64,
    pub clipped_grad_norm: f64,
}

/// Masked bit modeling on tokens produced by a frozen tokenizer.
pub struct Stage2Trainer<T: Real> {
    cfg: Stage2Config,
    store: ParamStore<T>,
    model: MaskBit<T>,
    opt: AdamW,
    ema: EmaState,
    step: u64,
    rng: ChaCha8Rng,
}

impl<T: Real> Stage2Trainer<T> {
    pub fn new(cfg: &Stage2Config) -> Result<Self> {
        cfg.generator.validate()?;
        cfg.optim.validate()?;
        let store = ParamStore::<T>::new(cfg.seed);
        let model = MaskBit::new(&store, &cfg.generator)?;
        let vars = store.vars_with_prefix(&format!("{}.", generator::PREFIX));
        let ema = EmaState::new(vars_snapshot(&vars), cfg.optim.ema_decay)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        Ok(Self {
            opt: AdamW::new(vars, &cfg.optim.stage2, cfg.optim.adam_eps)?,
            cfg: cfg.clone(),
            store,
            model,
            ema,
            step: 0,
            rng,
        })
    }

    pub fn config(&self) -> &Stage2Config {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn model(&self) -> &MaskBit<T> {
        &self.model
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn rng_mut(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn ema_model(&self) -> Result<MaskBit<T>> {
        let store = ParamStore::<T>::from_tensors(self.ema.shadow())?;
        MaskBit::new(&store, &self.cfg.generator)
    }

    /// mask -> label dropout -> forward -> masked-bit cross-entropy -> clipped AdamW -> EMA.
    pub fn step(&mut self, tokens: &BitGrid, classes: &[u32]) -> Result<Stage2Report> {
        let g = &self.cfg.generator;
        if tokens.bits != g.bits {
            return Err(Error::ConfigMismatch {
                field: "generator.bits".into(),
                expected: g.bits.to_string(),
                found: tokens.bits.to_string(),
            });
        }
        if classes.len() != tokens.batch {
            return Err(Error::shape("stage-2 class ids", tokens.batch, classes.len()));
        }
        let lr = lr_at(self.step, &self.cfg.optim.stage2);
        let mask = sample_training_mask(tokens.batch, tokens.tokens_per_sample(), g.groups, &mut self.rng)?;
        let labels = classes
            .iter()
            .map(|&c| drop_class_label(Some(c), g.class_dropout, &mut self.rng))
            .collect::<Result<Vec<_>>>()?;
        let masked = apply_mask(tokens, &mask)?;
        let logits = self.model.forward_train(&masked, &labels, &mut self.rng)?;
        let loss = masked_bits_loss(&logits, tokens, &mask, g.label_smoothing)?;
        let v = ensure_finite(scalar_value(&loss)?, "masked-bit loss")?;
        let grads = loss.backward()?;
        let clipped = self.opt.step(&grads, lr, self.cfg.optim.grad_clip_norm)?;
        self.ema.update(&vars_snapshot(self.opt.params()))?;
        self.step += 1;
        Ok(Stage2Report {
            step: self.step,
            lr,
            loss: v,
            masked_groups: mask.count_masked(),
            grad_norm: clipped.norm,
            clipped_grad_norm: clipped.clipped_norm,
        })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ck = Checkpoint {
            kind: STAGE2_KIND.into(),
            config_json: serde_json::to_string(&self.cfg)?,
            step: self.step,
            rng: RngState::capture(&self.rng),
            scalars: BTreeMap::new(),
            arrays: BTreeMap::new(),
        };
        ck.insert_section("param/", &self.store.snapshot()?);
        ck.insert_section("ema/", self.ema.shadow());
        ck.insert_section("opt/", &self.opt.state());
        ck.scalars.insert("opt.t".into(), self.opt.steps_taken() as f64);
        Ok(ck)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.expect_kind(STAGE2_KIND)?;
        let cfg: Stage2Config = serde_json::from_str(&ck.config_json)?;
        let mut t = Self::new(&cfg)?;
        t.store.assign(&ck.section("param/"))?;
        t.ema = EmaState::new(ck.section("ema/"), cfg.optim.ema_decay)?;
        t.opt.restore(&ck.section("opt/"), ck.scalar("opt.t")? as u64)?;
        t.step = ck.step;
        t.rng = ck.rng.restore();
        Ok(t)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    pub fn load_expecting(path: &Path, expected: &Stage2Config) -> Result<Self> {
        let ck = Checkpoint::load(path)?;
        ck.expect_kind(STAGE2_KIND)?;
        ensure_same_config(expected, &ck.config_json)?;
        Self::from_checkpoint(&ck)
    }
}

/// The EMA generator stored in a Stage-II checkpoint.
pub fn load_generator<T: Real>(path: &Path) -> Result<(MaskBit<T>, Stage2Config)> {
    let ck = Checkpoint::load(path)?;
    ck.expect_kind(STAGE2_KIND)?;
    let cfg: Stage2Config = serde_json::from_str(&ck.config_json)?;
    let store = ParamStore::<T>::from_tensors(&ck.section("ema/"))?;
    Ok((MaskBit::new(&store, &cfg.generator)?, cfg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let c = StageOptim::stage1();
        assert_eq!(lr_at(0, &c), 0.0);
        assert!((lr_at(5_000, &c) - 1e-4).abs() < 1e-18);
        assert!((lr_at(1_350_000, &c) - 1e-5).abs() < 1e-18);
        assert!((lr_at(2_500, &c) - 5e-5).abs() < 1e-18);
        let mut prev = lr_at(5_000, &c);
        for s in (5_001..1_350_000).step_by(9_973) {
            let v = lr_at(s, &c);
            assert!(v <= prev);
            prev = v;
        }
    }

    #[test]
    fn ema_closed_form() {
        let dev = candle_core::Device::Cpu;
        let mut p = BTreeMap::new();
        p.insert("w".to_string(), Tensor::new(&[0.0f64], &dev).unwrap());
        let mut ema = EmaState::new(p.clone(), 0.999).unwrap();
        let mut expect = 0.0;
        for x in [1.0f64, 2.0, -3.0] {
            p.insert("w".to_string(), Tensor::new(&[x], &dev).unwrap());
            ema.update(&p).unwrap();
            expect = 0.999 * expect + 0.001 * x;
        }
        let got: Vec<f64> = ema.shadow()["w"].to_vec1().unwrap();
        assert!((got[0] - expect).abs() < 1e-15);

        let mut e0 = EmaState::new(p.clone(), 0.0).unwrap();
        p.insert("w".to_string(), Tensor::new(&[7.0f64], &dev).unwrap());
        e0.update(&p).unwrap();
        assert_eq!(e0.shadow()["w"].to_vec1::<f64>().unwrap(), vec![7.0]);
        p.insert("w".to_string(), Tensor::new(&[7.0f64, 1.0], &dev).unwrap());
        assert!(e0.update(&p).is_err());
    }

    #[test]
    fn adamw_first_step_is_sign_step() {
        let dev = candle_core::Device::Cpu;
        let var = Var::new(&[1.0f64, -2.0], &dev).unwrap();
        let cfg = StageOptim {
            weight_decay: 0.0,
            ..StageOptim::stage1()
        };
        let mut opt = AdamW::new(vec![("w".into(), var.clone())], &cfg, 1e-8).unwrap();
        let loss = (var.as_tensor().sqr().unwrap().sum_all().unwrap() * 0.01).unwrap();
        let grads = loss.backward().unwrap();
        let r = opt.step(&grads, 0.1, 1.0).unwrap();
        assert!(r.clipped_norm <= 1.0 + 1e-9);
        let v: Vec<f64> = var.as_tensor().to_vec1().unwrap();
        assert!((v[0] - 0.9).abs() < 1e-6 && (v[1] + 1.9).abs() < 1e-6);
    }

    #[test]
    fn clip_bounds_norm() {
        assert_eq!(clip_factor(0.5, 1.0), 1.0);
        assert!(10.0 * clip_factor(10.0, 1.0) <= 1.0);
    }
}
