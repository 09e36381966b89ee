//! Stage-I objective: reconstruction, logit-space perceptual loss, hinge adversarial
//! losses with LeCAM regularization, and the blur-pool patch discriminator.

use std::marker::PhantomData;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::{ops, ParamStore, Scope};
use crate::scalar::Real;

pub use crate::nn::ops::blur_downsample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub recon: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub commitment: f64,
    pub codebook: f64,
    pub entropy: f64,
    pub lecam: f64,
    pub adv_start_iter: u64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            recon: 4.0,
            perceptual: 0.1,
            adversarial: 0.02,
            commitment: 0.25,
            codebook: 1.0,
            entropy: 0.02,
            lecam: 0.001,
            adv_start_iter: 20_000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [
            self.recon,
            self.perceptual,
            self.adversarial,
            self.commitment,
            self.codebook,
            self.entropy,
            self.lecam,
        ];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn adversarial_active(&self, iter: u64) -> bool {
        iter >= self.adv_start_iter
    }
}

fn same_shape(a: &Tensor, b: &Tensor, ctx: &'static str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::shape(ctx, format!("{:?}", a.dims()), format!("{:?}", b.dims())));
    }
    Ok(())
}

/// Mean squared error over all elements.
pub fn l2_reconstruction_loss(orig: &Tensor, recon: &Tensor) -> Result<Tensor> {
    same_shape(orig, recon, "l2_reconstruction_loss")?;
    Ok((orig - recon)?.sqr()?.mean_all()?)
}

/// A frozen image classifier exposing per-image logits.
pub trait FeatureExtractor: Send + Sync {
    /// Stable identifier recorded next to every metric computed with this extractor.
    fn id(&self) -> String;

    /// Pixel range the extractor expects; inputs are mapped there from `[-1, 1]`.
    fn input_range(&self) -> (f64, f64) {
        (-1.0, 1.0)
    }

    /// `(B, 3, H, W)` images already in [`FeatureExtractor::input_range`] -> `(B, L)` logits.
    fn logits_raw(&self, images: &Tensor) -> Result<Tensor>;

    /// `(B, F)` embedding used for Fréchet statistics and feature-space neighbors.
    /// Defaults to the logits.
    fn features_raw(&self, images: &Tensor) -> Result<Tensor> {
        self.logits_raw(images)
    }
}

fn to_extractor_range(ex: &dyn FeatureExtractor, images: &Tensor) -> Result<Tensor> {
    let (lo, hi) = ex.input_range();
    if lo == -1.0 && hi == 1.0 {
        return Ok(images.clone());
    }
    let scale = (hi - lo) / 2.0;
    Ok(images.affine(scale, lo + scale)?)
}

/// Logits of images given in `[-1, 1]`.
pub fn extract_logits(ex: &dyn FeatureExtractor, images: &Tensor) -> Result<Tensor> {
    ex.logits_raw(&to_extractor_range(ex, images)?)
}

/// Features of images given in `[-1, 1]`.
pub fn extract_features(ex: &dyn FeatureExtractor, images: &Tensor) -> Result<Tensor> {
    ex.features_raw(&to_extractor_range(ex, images)?)
}

/// Mean squared difference of classifier logits (no intermediate activations).
pub fn perceptual_loss(orig: &Tensor, recon: &Tensor, ex: &dyn FeatureExtractor) -> Result<Tensor> {
    same_shape(orig, recon, "perceptual_loss")?;
    let a = extract_logits(ex, orig)?;
    let b = extract_logits(ex, recon)?;
    same_shape(&a, &b, "perceptual_loss logits")?;
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Identity "classifier": logits are the flattened pixels. Reduces the perceptual loss to
/// the pixel L2 loss.
#[derive(Debug, Clone, Default)]
pub struct PixelExtractor;

impl FeatureExtractor for PixelExtractor {
    fn id(&self) -> String {
        "pixels".into()
    }

    fn logits_raw(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.flatten_from(1)?)
    }
}

/// Small fixed random-weight CNN used as a stand-in for a pretrained classifier.
///
/// Three stride-2 convolutions with ReLU, global average pooling (the feature vector) and
/// a linear logit head. Weights come from `seed` and are never trained.
#[derive(Debug, Clone)]
pub struct TinyCnnExtractor<T: Real> {
    seed: u64,
    convs: Vec<Conv2d>,
    head: crate::nn::layers::Linear,
    _scalar: PhantomData<T>,
}

impl<T: Real> TinyCnnExtractor<T> {
    pub const CHANNELS: [usize; 3] = [16, 32, 64];
    pub const LOGITS: usize = 32;

    pub fn new(seed: u64) -> Result<Self> {
        let store = ParamStore::<T>::new(seed);
        let s = store.root();
        let mut convs = Vec::new();
        let mut cin = 3;
        for (i, &c) in Self::CHANNELS.iter().enumerate() {
            convs.push(Conv2d::new(&s.pp(format!("conv{i}")), cin, c, 3, 2)?);
            cin = c;
        }
        let head = crate::nn::layers::Linear::new(&s.pp("head"), cin, Self::LOGITS, true)?;
        Ok(Self {
            seed,
            convs,
            head,
            _scalar: PhantomData,
        })
    }

    fn pooled(&self, images: &Tensor) -> Result<Tensor> {
        let mut x = images.clone();
        for c in &self.convs {
            x = ops::relu(&c.forward(&x)?)?;
        }
        Ok(x.mean(3)?.mean(2)?)
    }
}

impl<T: Real> FeatureExtractor for TinyCnnExtractor<T> {
    fn id(&self) -> String {
        format!("tiny-cnn-v1-seed{}", self.seed)
    }

    fn input_range(&self) -> (f64, f64) {
        (0.0, 1.0)
    }

    fn logits_raw(&self, images: &Tensor) -> Result<Tensor> {
        self.head.forward(&self.pooled(images)?)
    }

    fn features_raw(&self, images: &Tensor) -> Result<Tensor> {
        self.pooled(images)
    }
}

/// Which frozen classifier supplies logits for the perceptual loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PerceptualConfig {
    TinyCnn { seed: u64 },
    Pixels,
}

impl Default for PerceptualConfig {
    fn default() -> Self {
        PerceptualConfig::TinyCnn { seed: 0 }
    }
}

impl PerceptualConfig {
    pub fn build<T: Real>(&self) -> Result<Box<dyn FeatureExtractor>> {
        Ok(match self {
            PerceptualConfig::TinyCnn { seed } => Box::new(TinyCnnExtractor::<T>::new(*seed)?),
            PerceptualConfig::Pixels => Box::new(PixelExtractor),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiscriminatorConfig {
    pub base_channels: usize,
    /// Power of two; one blur-pool stage per factor of two.
    pub output_stride: usize,
    pub norm_groups: usize,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            base_channels: 128,
            output_stride: 16,
            norm_groups: 32,
        }
    }
}

#[derive(Debug, Clone)]
struct DiscStage {
    conv: Conv2d,
    norm: GroupNorm,
}

/// Patch discriminator: 3x3 convolutions, group normalization and blur-pool downsampling,
/// with the same output stride as the tokenizer.
#[derive(Debug, Clone)]
pub struct Discriminator<T: Real> {
    stride: usize,
    stem: Conv2d,
    stages: Vec<DiscStage>,
    head_conv: Conv2d,
    head_norm: GroupNorm,
    out: Conv2d,
    _scalar: PhantomData<T>,
}

pub const DISCRIMINATOR_PREFIX: &str = "discriminator";

impl<T: Real> Discriminator<T> {
    pub fn new(store: &ParamStore<T>, cfg: &DiscriminatorConfig) -> Result<Self> {
        Self::in_scope(&store.scope(DISCRIMINATOR_PREFIX), cfg)
    }

    pub fn in_scope(s: &Scope<T>, cfg: &DiscriminatorConfig) -> Result<Self> {
        if !cfg.output_stride.is_power_of_two() || cfg.output_stride < 2 {
            return Err(Error::Config(format!("discriminator output stride must be a power of two >= 2, got {}", cfg.output_stride)));
        }
        let n = cfg.output_stride.trailing_zeros() as usize;
        let c = cfg.base_channels;
        let stem = Conv2d::new(&s.pp("stem"), 3, c, 3, 1)?;
        let mut stages = Vec::new();
        let mut cin = c;
        for i in 0..n {
            let cout = c << i.min(3);
            let st = s.pp(format!("stage.{i}"));
            stages.push(DiscStage {
                conv: Conv2d::new(&st.pp("conv"), cin, cout, 3, 1)?,
                norm: GroupNorm::new(&st.pp("norm"), cout, cfg.norm_groups)?,
            });
            cin = cout;
        }
        Ok(Self {
            stride: cfg.output_stride,
            stem,
            stages,
            head_conv: Conv2d::new(&s.pp("head.conv"), cin, cin, 1, 1)?,
            head_norm: GroupNorm::new(&s.pp("head.norm"), cin, cfg.norm_groups)?,
            out: Conv2d::new(&s.pp("out"), cin, 1, 3, 1)?,
            _scalar: PhantomData,
        })
    }

    /// `(B, 3, H, W) -> (B, 1, H/16, W/16)` real logits.
    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = images.dims4()?;
        if h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return Err(Error::shape("discriminate", format!("spatial dims divisible by {}", self.stride), format!("{h}x{w}")));
        }
        let mut x = ops::leaky_relu(&self.stem.forward(images)?, 0.2)?;
        for st in &self.stages {
            x = ops::leaky_relu(&st.norm.forward(&st.conv.forward(&x)?)?, 0.2)?;
            x = ops::blur_downsample(&x)?;
        }
        x = ops::leaky_relu(&self.head_norm.forward(&self.head_conv.forward(&x)?)?, 0.2)?;
        self.out.forward(&x)
    }
}

/// Parameter count of a discriminator configuration.
pub fn discriminator_parameters(cfg: &DiscriminatorConfig) -> Result<usize> {
    let store = ParamStore::<f32>::zeroed();
    Discriminator::new(&store, cfg)?;
    Ok(store.num_params(""))
}

/// `mean(relu(1 - real)) + mean(relu(1 + fake))`.
pub fn hinge_d_loss(real_logits: &Tensor, fake_logits: &Tensor) -> Result<Tensor> {
    let real = (real_logits.neg()? + 1.0)?.relu()?.mean_all()?;
    let fake = (fake_logits + 1.0)?.relu()?.mean_all()?;
    Ok((real + fake)?)
}

/// `-mean(fake)`.
pub fn generator_adv_loss(fake_logits: &Tensor) -> Result<Tensor> {
    Ok(fake_logits.mean_all()?.neg()?)
}

/// EMA trackers of the discriminator's mean real and fake logits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LeCamState {
    pub ema_real: f64,
    pub ema_fake: f64,
    pub decay: f64,
}

impl Default for LeCamState {
    fn default() -> Self {
        Self {
            ema_real: 0.0,
            ema_fake: 0.0,
            decay: 0.999,
        }
    }
}

impl LeCamState {
    pub fn validate(&self) -> Result<()> {
        if !(self.ema_real.is_finite() && self.ema_fake.is_finite()) {
            return Err(Error::NonFinite("LeCAM trackers"));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(Error::InvalidArgument(format!("LeCAM decay must lie in (0, 1), got {}", self.decay)));
        }
        Ok(())
    }

    /// Folds the mean logits of one discriminator step into the trackers.
    pub fn update(&mut self, mean_real: f64, mean_fake: f64) {
        self.ema_real = self.decay * self.ema_real + (1.0 - self.decay) * mean_real;
        self.ema_fake = self.decay * self.ema_fake + (1.0 - self.decay) * mean_fake;
    }
}

/// `mean(relu(real - ema_fake)^2) + mean(relu(ema_real - fake)^2)`.
pub fn lecam_regularization(real_logits: &Tensor, fake_logits: &Tensor, state: &LeCamState) -> Result<Tensor> {
    state.validate()?;
    let a = (real_logits - state.ema_fake)?.relu()?.sqr()?.mean_all()?;
    let b = (fake_logits.neg()? + state.ema_real)?.relu()?.sqr()?.mean_all()?;
    Ok((a + b)?)
}

/// Component losses of one generator step. Absent parts contribute nothing.
#[derive(Debug, Clone, Default)]
pub struct Stage1Parts {
    pub recon: Option<Tensor>,
    pub perceptual: Option<Tensor>,
    pub commitment: Option<Tensor>,
    pub codebook: Option<Tensor>,
    pub entropy: Option<Tensor>,
    pub adversarial: Option<Tensor>,
}

/// Weighted sum of the Stage-I generator losses; the adversarial term only counts from
/// `weights.adv_start_iter` on.
pub fn stage1_generator_objective(parts: &Stage1Parts, weights: &LossWeights, iter: u64) -> Result<Tensor> {
    let adversarial = if weights.adversarial_active(iter) {
        weights.adversarial
    } else {
        0.0
    };
    let terms = [
        (&parts.recon, weights.recon),
        (&parts.perceptual, weights.perceptual),
        (&parts.commitment, weights.commitment),
        (&parts.codebook, weights.codebook),
        (&parts.entropy, weights.entropy),
        (&parts.adversarial, adversarial),
    ];
    let mut total: Option<Tensor> = None;
    for (part, w) in terms {
        let Some(t) = part else { continue };
        if w == 0.0 {
            continue;
        }
        let scaled = (t * w)?;
        total = Some(match total {
            Some(acc) => (acc + scaled)?,
            None => scaled,
        });
    }
    match total {
        Some(t) => Ok(t),
        None => Err(Error::InvalidArgument("stage-1 objective needs at least one weighted part".into())),
    }
}

/// Reads a scalar tensor as `f64`.
pub fn scalar_value(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn t(v: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(v.to_vec(), shape, &Device::Cpu).unwrap()
    }

    fn val(x: &Tensor) -> f64 {
        scalar_value(x).unwrap()
    }

    #[test]
    fn reconstruction_closed_forms() {
        let a = Tensor::ones((2, 3, 4, 4), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(val(&l2_reconstruction_loss(&a, &a).unwrap()), 0.0);
        assert!((val(&l2_reconstruction_loss(&a, &a.neg().unwrap()).unwrap()) - 4.0).abs() < 1e-12);
        let b = Tensor::zeros((2, 3, 4, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(l2_reconstruction_loss(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn pixel_extractor_matches_l2() {
        let a = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 1.0, (2, 3, 8, 8), &Device::Cpu).unwrap();
        let p = val(&perceptual_loss(&a, &b, &PixelExtractor).unwrap());
        let l = val(&l2_reconstruction_loss(&a, &b).unwrap());
        assert!((p - l).abs() < 1e-12);
        assert_eq!(val(&perceptual_loss(&a, &a, &PixelExtractor).unwrap()), 0.0);
    }

    #[test]
    fn tiny_cnn_is_deterministic_and_symmetric() {
        let ex = TinyCnnExtractor::<f64>::new(3).unwrap();
        let ex2 = TinyCnnExtractor::<f64>::new(3).unwrap();
        let a = Tensor::randn(0f64, 0.5, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let b = Tensor::randn(0f64, 0.5, (2, 3, 16, 16), &Device::Cpu).unwrap();
        let ab = val(&perceptual_loss(&a, &b, &ex).unwrap());
        let ba = val(&perceptual_loss(&b, &a, &ex2).unwrap());
        assert!(ab > 0.0);
        assert!((ab - ba).abs() < 1e-12);
        assert_eq!(extract_logits(&ex, &a).unwrap().dims(), &[2, 32]);
        assert_eq!(extract_features(&ex, &a).unwrap().dims(), &[2, 64]);
    }

    #[test]
    fn discriminator_shapes_and_size() {
        let store = ParamStore::<f32>::new(0);
        let cfg = DiscriminatorConfig {
            base_channels: 8,
            ..DiscriminatorConfig::default()
        };
        let d = Discriminator::new(&store, &cfg).unwrap();
        let x = Tensor::zeros((2, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        assert_eq!(d.forward(&x).unwrap().dims(), &[2, 1, 4, 4]);
        let bad = Tensor::zeros((1, 3, 40, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(d.forward(&bad), Err(Error::Shape { .. })));
        let n = discriminator_parameters(&DiscriminatorConfig::default()).unwrap();
        assert!((n as f64 - 7.4e6).abs() / 7.4e6 < 0.02, "{n}");
    }

    #[test]
    fn adversarial_closed_forms() {
        let z = t(&[0.0; 4], &[4]);
        assert!((val(&hinge_d_loss(&z, &z).unwrap()) - 2.0).abs() < 1e-12);
        let real = t(&[1.0, 2.5, 1.0], &[3]);
        let fake = t(&[-1.0, -3.0, -1.5], &[3]);
        assert_eq!(val(&hinge_d_loss(&real, &fake).unwrap()), 0.0);
        assert_eq!(val(&generator_adv_loss(&z).unwrap()), 0.0);
        assert_eq!(val(&generator_adv_loss(&t(&[2.0; 3], &[3])).unwrap()), -2.0);

        let st = LeCamState {
            ema_real: 0.3,
            ema_fake: -0.2,
            decay: 0.999,
        };
        let r = t(&[-0.2; 4], &[4]);
        let f = t(&[0.3; 4], &[4]);
        assert_eq!(val(&lecam_regularization(&r, &f, &st).unwrap()), 0.0);
        let r1 = t(&[0.8; 4], &[4]);
        assert!((val(&lecam_regularization(&r1, &f, &st).unwrap()) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lecam_update_is_an_ema() {
        let mut s = LeCamState::default();
        s.update(1.0, -1.0);
        assert!((s.ema_real - 0.001).abs() < 1e-15);
        assert!((s.ema_fake + 0.001).abs() < 1e-15);
        s.decay = 1.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn objective_weighting() {
        let one = Tensor::new(1.0f64, &Device::Cpu).unwrap();
        let parts = Stage1Parts {
            recon: Some(one.clone()),
            perceptual: Some(one.clone()),
            commitment: Some(one.clone()),
            codebook: None,
            entropy: Some(one.clone()),
            adversarial: Some(one.clone()),
        };
        let w = LossWeights::default();
        assert!((val(&stage1_generator_objective(&parts, &w, 0).unwrap()) - 4.37).abs() < 1e-12);
        assert!((val(&stage1_generator_objective(&parts, &w, 19_999).unwrap()) - 4.37).abs() < 1e-12);
        assert!((val(&stage1_generator_objective(&parts, &w, 20_000).unwrap()) - 4.39).abs() < 1e-12);
        let zero = one.zeros_like().unwrap();
        let zeros = Stage1Parts {
            recon: Some(zero.clone()),
            perceptual: Some(zero.clone()),
            commitment: Some(zero.clone()),
            codebook: Some(zero.clone()),
            entropy: Some(zero.clone()),
            adversarial: Some(zero),
        };
        assert_eq!(val(&stage1_generator_objective(&zeros, &w, 30_000).unwrap()), 0.0);
    }

    #[test]
    fn hinge_gradient_vanishes_beyond_margin() {
        let real = candle_core::Var::from_tensor(&t(&[1.5, 0.5, 2.0, -0.3], &[4])).unwrap();
        let fake = t(&[0.0; 4], &[4]);
        let g = hinge_d_loss(real.as_tensor(), &fake).unwrap().backward().unwrap();
        let gr: Vec<f64> = g.get(real.as_tensor()).unwrap().to_vec1().unwrap();
        assert_eq!(gr[0], 0.0);
        assert_eq!(gr[2], 0.0);
        assert!((gr[1] + 0.25).abs() < 1e-12);
    }
}
