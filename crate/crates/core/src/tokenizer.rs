//! Stage-I convolutional autoencoder with output stride 16.

use std::marker::PhantomData;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, GroupNorm};
use crate::nn::{ops, ParamStore, Scope};
use crate::quantizers::{self, BitGrid, Codebook, Lfq, LfqConfig};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AutoencoderConfig {
    pub base_channels: usize,
    pub channel_multipliers: Vec<usize>,
    pub res_blocks_per_stage: usize,
    /// Decoder blocks per stage; `None` mirrors the encoder.
    pub decoder_res_blocks: Option<usize>,
    pub mid_blocks: usize,
    pub latent_dim: usize,
    /// Self-attention in the lowest-resolution stage and the mid block.
    pub use_attention: bool,
    pub norm_groups: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self {
            base_channels: 128,
            channel_multipliers: vec![1, 1, 2, 2, 4],
            res_blocks_per_stage: 2,
            decoder_res_blocks: None,
            mid_blocks: 2,
            latent_dim: 256,
            use_attention: false,
            norm_groups: 32,
        }
    }
}

impl AutoencoderConfig {
    /// The attention-based baseline this architecture was derived from: attention in the
    /// low-resolution stage, three decoder blocks per stage.
    pub fn attention_baseline() -> Self {
        Self {
            use_attention: true,
            decoder_res_blocks: Some(3),
            ..Self::default()
        }
    }

    /// CI-sized preset for 64x64 images and 8-bit tokens.
    pub fn desk() -> Self {
        Self {
            base_channels: 64,
            latent_dim: 8,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        1 << self.channel_multipliers.len().saturating_sub(1)
    }

    pub fn decoder_blocks(&self) -> usize {
        self.decoder_res_blocks.unwrap_or(self.res_blocks_per_stage)
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return Err(Error::Config("channel_multipliers must be non-empty and positive".into()));
        }
        if self.base_channels == 0 || self.latent_dim == 0 || self.res_blocks_per_stage == 0 {
            return Err(Error::Config("base_channels, latent_dim and res_blocks_per_stage must be positive".into()));
        }
        if self.norm_groups == 0 {
            return Err(Error::Config("norm_groups must be positive".into()));
        }
        Ok(())
    }

    fn channels(&self, stage: usize) -> usize {
        self.base_channels * self.channel_multipliers[stage]
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(s: &Scope<T>, cin: usize, cout: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm1: GroupNorm::new(&s.pp("norm1"), cin, groups)?,
            conv1: Conv2d::new(&s.pp("conv1"), cin, cout, 3, 1)?,
            norm2: GroupNorm::new(&s.pp("norm2"), cout, groups)?,
            conv2: Conv2d::new(&s.pp("conv2"), cout, cout, 3, 1)?,
            skip: if cin != cout {
                Some(Conv2d::new(&s.pp("skip"), cin, cout, 1, 1)?)
            } else {
                None
            },
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.conv1.forward(&ops::swish(&self.norm1.forward(x)?)?)?;
        let h = self.conv2.forward(&ops::swish(&self.norm2.forward(&h)?)?)?;
        let shortcut = match &self.skip {
            Some(c) => c.forward(x)?,
            None => x.clone(),
        };
        Ok((shortcut + h)?)
    }
}

/// Single-head spatial self-attention (baseline mode only).
#[derive(Debug, Clone)]
struct AttnBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
}

impl AttnBlock {
    fn new<T: Real>(s: &Scope<T>, c: usize, groups: usize) -> Result<Self> {
        Ok(Self {
            norm: GroupNorm::new(&s.pp("norm"), c, groups)?,
            q: Conv2d::new(&s.pp("q"), c, c, 1, 1)?,
            k: Conv2d::new(&s.pp("k"), c, c, 1, 1)?,
            v: Conv2d::new(&s.pp("v"), c, c, 1, 1)?,
            proj: Conv2d::new(&s.pp("proj"), c, c, 1, 1)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let n = self.norm.forward(x)?;
        let q = self.q.forward(&n)?.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
        let k = self.k.forward(&n)?.reshape((b, c, h * w))?;
        let v = self.v.forward(&n)?.reshape((b, c, h * w))?;
        let att = ops::softmax(&(q.matmul(&k)? / (c as f64).sqrt())?)?;
        let out = v.matmul(&att.transpose(1, 2)?.contiguous()?)?.reshape((b, c, h, w))?;
        Ok((x + self.proj.forward(&out)?)?)
    }
}

#[derive(Debug, Clone)]
enum Block {
    Res(ResBlock),
    Attn(AttnBlock),
    Down(Conv2d),
    Up(Conv2d),
}

impl Block {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Block::Res(b) => b.forward(x),
            Block::Attn(b) => b.forward(x),
            Block::Down(c) => c.forward(x),
            Block::Up(c) => c.forward(&ops::upsample2x(x)?),
        }
    }
}

fn mid_blocks<T: Real>(s: &Scope<T>, cfg: &AutoencoderConfig, c: usize, out: &mut Vec<Block>) -> Result<()> {
    let groups = cfg.norm_groups;
    for i in 0..cfg.mid_blocks {
        out.push(Block::Res(ResBlock::new(&s.pp(format!("mid.{i}")), c, c, groups)?));
        if cfg.use_attention && i == 0 && cfg.mid_blocks > 1 {
            out.push(Block::Attn(AttnBlock::new(&s.pp("mid.attn"), c, groups)?));
        }
    }
    Ok(())
}

/// Image -> continuous latent, `(B, 3, H, W) -> (B, latent_dim, H/16, W/16)`.
#[derive(Debug, Clone)]
pub struct Encoder {
    stride: usize,
    conv_in: Conv2d,
    blocks: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Encoder {
    pub fn new<T: Real>(s: &Scope<T>, cfg: &AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = cfg.norm_groups;
        let stages = cfg.channel_multipliers.len();
        let conv_in = Conv2d::new(&s.pp("conv_in"), 3, cfg.base_channels, 3, 1)?;
        let mut blocks = Vec::new();
        let mut c = cfg.base_channels;
        for stage in 0..stages {
            let cout = cfg.channels(stage);
            for i in 0..cfg.res_blocks_per_stage {
                let bs = s.pp(format!("down.{stage}.block.{i}"));
                blocks.push(Block::Res(ResBlock::new(&bs, c, cout, groups)?));
                c = cout;
                if cfg.use_attention && stage == stages - 1 {
                    blocks.push(Block::Attn(AttnBlock::new(&s.pp(format!("down.{stage}.attn.{i}")), c, groups)?));
                }
            }
            if stage + 1 < stages {
                blocks.push(Block::Down(Conv2d::new(&s.pp(format!("down.{stage}.downsample")), c, c, 3, 2)?));
            }
        }
        mid_blocks(s, cfg, c, &mut blocks)?;
        Ok(Self {
            stride: cfg.stride(),
            conv_in,
            blocks,
            norm_out: GroupNorm::new(&s.pp("norm_out"), c, groups)?,
            conv_out: Conv2d::new(&s.pp("conv_out"), c, cfg.latent_dim, 3, 1)?,
        })
    }

    pub fn forward(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape("encode", "3 channels", c));
        }
        if h % self.stride != 0 || w % self.stride != 0 || h == 0 || w == 0 {
            return Err(Error::shape("encode", format!("spatial dims divisible by {}", self.stride), format!("{h}x{w}")));
        }
        check_finite(images, "encoder input")?;
        let mut x = self.conv_in.forward(images)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        self.conv_out.forward(&ops::swish(&self.norm_out.forward(&x)?)?)
    }

    pub fn attention_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Attn(_))).count()
    }
}

/// Continuous latent -> image in `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Decoder {
    latent_dim: usize,
    conv_in: Conv2d,
    blocks: Vec<Block>,
    norm_out: GroupNorm,
    conv_out: Conv2d,
}

impl Decoder {
    pub fn new<T: Real>(s: &Scope<T>, cfg: &AutoencoderConfig) -> Result<Self> {
        cfg.validate()?;
        let groups = cfg.norm_groups;
        let stages = cfg.channel_multipliers.len();
        let top = cfg.channels(stages - 1);
        let conv_in = Conv2d::new(&s.pp("conv_in"), cfg.latent_dim, top, 3, 1)?;
        let mut blocks = Vec::new();
        mid_blocks(s, cfg, top, &mut blocks)?;
        let mut c = top;
        for stage in (0..stages).rev() {
            let cout = cfg.channels(stage);
            for i in 0..cfg.decoder_blocks() {
                let bs = s.pp(format!("up.{stage}.block.{i}"));
                blocks.push(Block::Res(ResBlock::new(&bs, c, cout, groups)?));
                c = cout;
                if cfg.use_attention && stage == stages - 1 {
                    blocks.push(Block::Attn(AttnBlock::new(&s.pp(format!("up.{stage}.attn.{i}")), c, groups)?));
                }
            }
            if stage > 0 {
                blocks.push(Block::Up(Conv2d::new(&s.pp(format!("up.{stage}.upsample")), c, c, 3, 1)?));
            }
        }
        Ok(Self {
            latent_dim: cfg.latent_dim,
            conv_in,
            blocks,
            norm_out: GroupNorm::new(&s.pp("norm_out"), c, groups)?,
            conv_out: Conv2d::new(&s.pp("conv_out"), c, 3, 3, 1)?,
        })
    }

    pub fn forward(&self, latent: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = latent.dims4()?;
        if c != self.latent_dim || h == 0 || w == 0 {
            return Err(Error::shape("decode", format!("{} latent channels", self.latent_dim), format!("{c} ({h}x{w})")));
        }
        check_finite(latent, "decoder input")?;
        let mut x = self.conv_in.forward(latent)?;
        for b in &self.blocks {
            x = b.forward(&x)?;
        }
        Ok(self.conv_out.forward(&ops::swish(&self.norm_out.forward(&x)?)?)?.tanh()?)
    }

    pub fn attention_blocks(&self) -> usize {
        self.blocks.iter().filter(|b| matches!(b, Block::Attn(_))).count()
    }
}

pub(crate) fn check_finite(t: &Tensor, what: &'static str) -> Result<()> {
    // a NaN/inf anywhere makes the sum non-finite
    let s = t.detach().abs()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if s.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(what))
    }
}

/// Quantizer choice for the autoencoder bottleneck.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum QuantizerConfig {
    Vq { codebook_size: usize },
    Lfq(LfqConfig),
}

impl Default for QuantizerConfig {
    fn default() -> Self {
        QuantizerConfig::Lfq(LfqConfig::default())
    }
}

impl QuantizerConfig {
    pub fn bits(&self) -> Option<usize> {
        match self {
            QuantizerConfig::Lfq(c) => Some(c.bits),
            QuantizerConfig::Vq { .. } => None,
        }
    }
}

#[derive(Debug, Clone)]
pub enum Quantizer {
    Vq(Codebook),
    Lfq(Lfq),
}

/// Discrete tokens produced by the bottleneck.
#[derive(Debug, Clone)]
pub enum Tokens {
    /// Codebook ids, `B*h*w` row-major, with grid `(B, h, w)`.
    Indices { ids: Vec<u32>, grid: (usize, usize, usize) },
    /// Straight-through bit tensor `(B, K, h, w)`.
    Bits(Tensor),
}

/// Auxiliary quantization losses; absent terms are `None`.
#[derive(Debug, Clone)]
pub struct AuxLosses {
    pub commit: Option<Tensor>,
    pub codebook: Option<Tensor>,
    pub entropy: Option<Tensor>,
}

#[derive(Debug, Clone)]
pub struct Reconstruction {
    pub recon: Tensor,
    pub tokens: Tokens,
    pub aux: AuxLosses,
}

/// Encoder, quantizer and decoder.
#[derive(Debug, Clone)]
pub struct Autoencoder<T: Real> {
    cfg: AutoencoderConfig,
    quant_cfg: QuantizerConfig,
    encoder: Encoder,
    decoder: Decoder,
    quantizer: Quantizer,
    _scalar: PhantomData<T>,
}

impl<T: Real> Autoencoder<T> {
    /// Builds (or re-binds) the model's parameters under the `tokenizer` prefix of `store`.
    pub fn new(store: &ParamStore<T>, cfg: &AutoencoderConfig, quant: &QuantizerConfig) -> Result<Self> {
        let s = store.scope(PREFIX);
        let quantizer = match quant {
            QuantizerConfig::Vq { codebook_size } => {
                Quantizer::Vq(Codebook::new(&s.pp("quantizer"), *codebook_size, cfg.latent_dim)?)
            }
            QuantizerConfig::Lfq(lc) => Quantizer::Lfq(Lfq::new(&s.pp("quantizer"), cfg.latent_dim, *lc)?),
        };
        Ok(Self {
            cfg: cfg.clone(),
            quant_cfg: quant.clone(),
            encoder: Encoder::new(&s.pp("encoder"), cfg)?,
            decoder: Decoder::new(&s.pp("decoder"), cfg)?,
            quantizer,
            _scalar: PhantomData,
        })
    }

    pub fn config(&self) -> &AutoencoderConfig {
        &self.cfg
    }

    pub fn quantizer_config(&self) -> &QuantizerConfig {
        &self.quant_cfg
    }

    pub fn quantizer(&self) -> &Quantizer {
        &self.quantizer
    }

    pub fn bits(&self) -> Option<usize> {
        self.quant_cfg.bits()
    }

    pub fn attention_blocks(&self) -> usize {
        self.encoder.attention_blocks() + self.decoder.attention_blocks()
    }

    pub fn encode(&self, images: &Tensor) -> Result<Tensor> {
        self.encoder.forward(images)
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        self.decoder.forward(latent)
    }

    /// Quantizes a latent and returns the decoder input alongside tokens and aux losses.
    pub fn quantize(&self, latent: &Tensor) -> Result<(Tensor, Tokens, AuxLosses)> {
        match &self.quantizer {
            Quantizer::Vq(cb) => {
                let out = quantizers::vq_quantize(latent, cb)?;
                Ok((
                    out.quantized,
                    Tokens::Indices {
                        ids: out.indices,
                        grid: out.grid,
                    },
                    AuxLosses {
                        commit: Some(out.commit),
                        codebook: Some(out.codebook),
                        entropy: None,
                    },
                ))
            }
            Quantizer::Lfq(lfq) => {
                let out = lfq.quantize(latent)?;
                let lc = lfq.config();
                // commitment pulls the projection toward the nearest corner of the hypercube
                let commit = (&out.pre_quant - out.bits.detach())?.sqr()?.mean_all()?;
                let entropy = quantizers::entropy_loss(&out.pre_quant, lc.entropy_temperature)?;
                Ok((
                    lfq.embed_bits(&out.bits)?,
                    Tokens::Bits(out.bits),
                    AuxLosses {
                        commit: Some(commit),
                        codebook: None,
                        entropy: Some(entropy),
                    },
                ))
            }
        }
    }

    /// encode -> quantize -> decode.
    pub fn reconstruct(&self, images: &Tensor) -> Result<Reconstruction> {
        let latent = self.encode(images)?;
        let (q, tokens, aux) = self.quantize(&latent)?;
        let recon = self.decode(&q)?;
        Ok(Reconstruction { recon, tokens, aux })
    }

    /// Bit tokens of `images` (LFQ only), detached.
    pub fn tokenize_bits(&self, images: &Tensor) -> Result<BitGrid> {
        let Quantizer::Lfq(lfq) = &self.quantizer else {
            return Err(Error::InvalidArgument("bit tokens require a lookup-free quantizer".into()));
        };
        let latent = self.encode(images)?;
        let out = lfq.quantize(&latent)?;
        BitGrid::from_tensor(&out.bits.detach())
    }

    /// Codebook ids of `images` (VQ only), with grid `(B, h, w)`.
    pub fn tokenize_indices(&self, images: &Tensor) -> Result<(Vec<u32>, (usize, usize, usize))> {
        let Quantizer::Vq(cb) = &self.quantizer else {
            return Err(Error::InvalidArgument("index tokens require a codebook quantizer".into()));
        };
        let out = quantizers::vq_quantize(&self.encode(images)?, cb)?;
        Ok((out.indices, out.grid))
    }

    /// Decodes a `(B, K, h, w)` bit tensor (entries in `{-1, 0, +1}`).
    pub fn decode_bits(&self, bits: &Tensor) -> Result<Tensor> {
        let Quantizer::Lfq(lfq) = &self.quantizer else {
            return Err(Error::InvalidArgument("bit decoding requires a lookup-free quantizer".into()));
        };
        self.decode(&lfq.embed_bits(bits)?)
    }

    pub fn decode_grid(&self, grid: &BitGrid) -> Result<Tensor> {
        self.decode_bits(&grid.to_tensor::<T>(&candle_core::Device::Cpu)?)
    }

    /// Decodes codebook ids laid out on a `(B, h, w)` grid.
    pub fn decode_indices(&self, ids: &[u32], grid: (usize, usize, usize)) -> Result<Tensor> {
        let Quantizer::Vq(cb) = &self.quantizer else {
            return Err(Error::InvalidArgument("index decoding requires a codebook quantizer".into()));
        };
        let (b, h, w) = grid;
        let t = Tensor::new(ids, cb.entries().device())?;
        let rows = cb.entries().index_select(&t, 0)?;
        self.decode(&quantizers::from_rows(&rows, b, h, w)?)
    }
}

pub const PREFIX: &str = "tokenizer";

/// Parameter counts `(encoder, decoder)` of a configuration, without the quantizer.
pub fn parameter_counts(cfg: &AutoencoderConfig) -> Result<(usize, usize)> {
    let store = ParamStore::<f32>::zeroed();
    Encoder::new(&store.scope("encoder"), cfg)?;
    Decoder::new(&store.scope("decoder"), cfg)?;
    Ok((store.num_params("encoder."), store.num_params("decoder.")))
}

/// Per-pixel mean squared error between two image batches.
pub fn pixel_mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    Ok((a - b)?.sqr()?.mean_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn tiny() -> AutoencoderConfig {
        AutoencoderConfig {
            base_channels: 8,
            channel_multipliers: vec![1, 1, 2, 2, 4],
            latent_dim: 8,
            ..AutoencoderConfig::default()
        }
    }

    #[test]
    fn stride_sixteen_for_several_sizes() {
        let store = ParamStore::<f32>::new(0);
        let ae = Autoencoder::new(&store, &tiny(), &QuantizerConfig::Lfq(LfqConfig { bits: 8, ..LfqConfig::default() })).unwrap();
        for size in [64usize, 128] {
            let x = Tensor::zeros((1, 3, size, size), DType::F32, &Device::Cpu).unwrap();
            let z = ae.encode(&x).unwrap();
            assert_eq!(z.dims(), &[1, 8, size / 16, size / 16]);
            let y = ae.decode(&z).unwrap();
            assert_eq!(y.dims(), &[1, 3, size, size]);
            let v: Vec<f32> = y.flatten_all().unwrap().to_vec1().unwrap();
            assert!(v.iter().all(|p| p.is_finite() && (-1.0..=1.0).contains(p)));
        }
        assert_eq!(ae.attention_blocks(), 0);
    }

    #[test]
    fn rejects_indivisible_and_non_finite() {
        let store = ParamStore::<f32>::new(0);
        let ae = Autoencoder::new(&store, &tiny(), &QuantizerConfig::Vq { codebook_size: 16 }).unwrap();
        let x = Tensor::zeros((1, 3, 40, 64), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(ae.encode(&x), Err(Error::Shape { .. })));
        let nan = Tensor::full(f32::NAN, (1, 3, 32, 32), &Device::Cpu).unwrap();
        assert!(matches!(ae.encode(&nan), Err(Error::NonFinite(_))));
        let z = Tensor::full(f32::INFINITY, (1, 8, 2, 2), &Device::Cpu).unwrap();
        assert!(matches!(ae.decode(&z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let store = ParamStore::<f32>::new(9);
        let ae = Autoencoder::new(&store, &tiny(), &QuantizerConfig::Lfq(LfqConfig { bits: 8, ..LfqConfig::default() })).unwrap();
        let x = Tensor::rand(-1f32, 1f32, (2, 3, 32, 32), &Device::Cpu).unwrap();
        let a: Vec<f32> = ae.reconstruct(&x).unwrap().recon.flatten_all().unwrap().to_vec1().unwrap();
        let b: Vec<f32> = ae.reconstruct(&x).unwrap().recon.flatten_all().unwrap().to_vec1().unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn symmetric_block_counts() {
        let cfg = AutoencoderConfig::default();
        assert_eq!(cfg.decoder_blocks(), cfg.res_blocks_per_stage);
        assert_eq!(cfg.stride(), 16);
        let base = AutoencoderConfig::attention_baseline();
        assert_eq!(base.decoder_blocks(), 3);
    }

    #[test]
    fn parameter_gap_to_attention_baseline() {
        let (e, d) = parameter_counts(&AutoencoderConfig::default()).unwrap();
        let (be, bd) = parameter_counts(&AutoencoderConfig::attention_baseline()).unwrap();
        let gap = (be + bd) as f64 - (e + d) as f64;
        println!("ours {} baseline {} gap {}", e + d, be + bd, gap);
        assert!((gap - 17e6).abs() < 0.15 * 17e6, "gap {gap}");
    }
}
