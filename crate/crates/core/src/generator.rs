//! Stage-II masked bit modeling: a bidirectional transformer that reads bit tokens through a
//! single `K -> hidden` linear map and predicts each masked group of `K/N` consecutive bits
//! as one of `2^(K/N)` categories.

use std::f64::consts::FRAC_2_PI;
use std::marker::PhantomData;

use candle_core::{Tensor, D};
use rand::seq::index::sample as sample_indices;
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::layers::{Embedding, LayerNorm, Linear};
use crate::nn::{ops, Init, ParamStore, Scope};
use crate::quantizers::{bits_to_index, BitGrid};
use crate::scalar::Real;

/// A class id, or `None` for the unconditional (null) label.
pub type ClassLabel = Option<u32>;

/// Largest supported number of categories per group (`2^(K/N)`).
pub const MAX_GROUP_BITS: usize = 16;

pub const PREFIX: &str = "generator";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub bits: usize,
    pub groups: usize,
    /// Tokens per image (`h * w` of the Stage-I grid).
    pub tokens: usize,
    pub num_classes: usize,
    pub class_dropout: f64,
    pub label_smoothing: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            hidden: 1024,
            depth: 24,
            heads: 16,
            mlp_dim: 4096,
            dropout: 0.1,
            bits: 12,
            groups: 2,
            tokens: 256,
            num_classes: 1000,
            class_dropout: 0.1,
            label_smoothing: 0.1,
        }
    }
}

impl GeneratorConfig {
    /// Small preset for CPU experiments on 64x64 images with 8-bit tokens.
    pub fn desk() -> Self {
        Self {
            hidden: 128,
            depth: 4,
            heads: 4,
            mlp_dim: 512,
            bits: 8,
            groups: 2,
            tokens: 16,
            num_classes: 10,
            ..Self::default()
        }
    }

    pub fn group_bits(&self) -> usize {
        self.bits / self.groups
    }

    pub fn categories(&self) -> usize {
        1 << self.group_bits()
    }

    pub fn validate(&self) -> Result<()> {
        check_groups(self.bits, self.groups)?;
        if self.group_bits() > MAX_GROUP_BITS {
            return Err(Error::Config(format!("at most {MAX_GROUP_BITS} bits per group, got {}", self.group_bits())));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads)));
        }
        if self.tokens == 0 || self.num_classes == 0 || self.mlp_dim == 0 {
            return Err(Error::Config("tokens, num_classes and mlp_dim must be positive".into()));
        }
        for (name, p) in [
            ("dropout", self.dropout),
            ("class_dropout", self.class_dropout),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        Ok(())
    }
}

fn check_groups(bits: usize, groups: usize) -> Result<()> {
    if groups == 0 || bits == 0 || bits % groups != 0 {
        return Err(Error::InvalidArgument(format!("{groups} groups do not divide {bits} bits")));
    }
    Ok(())
}

/// Splits one token into `groups` runs of consecutive bits.
pub fn group_split(token: &[i8], groups: usize) -> Result<Vec<&[i8]>> {
    check_groups(token.len(), groups)?;
    Ok(token.chunks(token.len() / groups).collect())
}

/// Inverse of [`group_split`].
pub fn group_merge(groups: &[&[i8]]) -> Vec<i8> {
    groups.concat()
}

/// Category of every group, laid out `batch x tokens x groups`.
pub fn group_categories(grid: &BitGrid, groups: usize) -> Result<Vec<u32>> {
    check_groups(grid.bits, groups)?;
    let g = grid.bits / groups;
    grid.data().chunks(g).map(bits_to_index).collect()
}

/// Per-group mask over a batch of token grids; `true` marks a masked group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupedMask {
    pub batch: usize,
    pub tokens: usize,
    pub groups: usize,
    data: Vec<bool>,
}

impl GroupedMask {
    pub fn new(batch: usize, tokens: usize, groups: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != batch * tokens * groups {
            return Err(Error::shape("GroupedMask::new", batch * tokens * groups, data.len()));
        }
        Ok(Self {
            batch,
            tokens,
            groups,
            data,
        })
    }

    pub fn filled(batch: usize, tokens: usize, groups: usize, masked: bool) -> Self {
        Self {
            batch,
            tokens,
            groups,
            data: vec![masked; batch * tokens * groups],
        }
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn groups_per_sample(&self) -> usize {
        self.tokens * self.groups
    }

    pub fn get(&self, b: usize, t: usize, n: usize) -> bool {
        self.data[(b * self.tokens + t) * self.groups + n]
    }

    pub fn set(&mut self, b: usize, t: usize, n: usize, masked: bool) {
        self.data[(b * self.tokens + t) * self.groups + n] = masked;
    }

    /// Flat `(token, group)` slots of sample `b`.
    pub fn sample(&self, b: usize) -> &[bool] {
        let g = self.groups_per_sample();
        &self.data[b * g..(b + 1) * g]
    }

    pub fn sample_mut(&mut self, b: usize) -> &mut [bool] {
        let g = self.groups_per_sample();
        &mut self.data[b * g..(b + 1) * g]
    }

    pub fn count_masked(&self) -> usize {
        self.data.iter().filter(|&&m| m).count()
    }

    fn check_grid(&self, grid: &BitGrid) -> Result<()> {
        check_groups(grid.bits, self.groups)?;
        if grid.batch != self.batch || grid.tokens_per_sample() != self.tokens {
            return Err(Error::shape(
                "grouped mask",
                format!("{} x {} tokens", self.batch, self.tokens),
                format!("{} x {} tokens", grid.batch, grid.tokens_per_sample()),
            ));
        }
        Ok(())
    }
}

/// Zeroes every bit of every masked group.
pub fn apply_mask(grid: &BitGrid, mask: &GroupedMask) -> Result<BitGrid> {
    mask.check_grid(grid)?;
    let mut out = grid.clone();
    let g = grid.bits / mask.groups;
    for (chunk, &m) in out.data_mut().chunks_mut(g).zip(mask.data()) {
        if m {
            chunk.fill(0);
        }
    }
    Ok(out)
}

/// Fraction of groups left masked at mask ratio parameter `r`: `(2/pi) * arccos(r)`.
pub fn mask_fraction(r: f64) -> f64 {
    FRAC_2_PI * r.clamp(0.0, 1.0).acos()
}

/// `ceil(mask_fraction(r) * total)`, clamped to `total`.
pub fn masked_group_count(r: f64, total: usize) -> usize {
    ((mask_fraction(r) * total as f64).ceil() as usize).min(total)
}

/// Per sample: draws `r ~ U(0, 1)` and masks `ceil(f(r) * T * N)` distinct groups chosen
/// uniformly at random.
pub fn sample_training_mask<R: Rng + ?Sized>(batch: usize, tokens: usize, groups: usize, rng: &mut R) -> Result<GroupedMask> {
    if tokens == 0 || groups == 0 {
        return Err(Error::InvalidArgument("training mask needs at least one token and group".into()));
    }
    let total = tokens * groups;
    let mut mask = GroupedMask::filled(batch, tokens, groups, false);
    for b in 0..batch {
        let r = loop {
            let r: f64 = rng.random();
            if r > 0.0 {
                break r;
            }
        };
        let n = masked_group_count(r, total);
        let slots = mask.sample_mut(b);
        for i in sample_indices(rng, total, n) {
            slots[i] = true;
        }
    }
    Ok(mask)
}

/// Replaces the label by the null label with probability `p`.
pub fn drop_class_label<R: Rng + ?Sized>(class: ClassLabel, p: f64, rng: &mut R) -> Result<ClassLabel> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("label dropout probability {p} outside [0, 1]")));
    }
    Ok(if rng.random_bool(p) { None } else { class })
}

/// Cross-entropy with label smoothing over the categories of every masked group, averaged
/// over masked groups. `logits` is `(B, T, N, 2^(K/N))`.
pub fn masked_bits_loss(logits: &Tensor, targets: &BitGrid, mask: &GroupedMask, label_smoothing: f64) -> Result<Tensor> {
    mask.check_grid(targets)?;
    let c = 1usize << (targets.bits / mask.groups);
    let expected = [mask.batch, mask.tokens, mask.groups, c];
    if logits.dims() != expected {
        return Err(Error::shape("masked_bits_loss logits", format!("{expected:?}"), format!("{:?}", logits.dims())));
    }
    let masked = mask.count_masked();
    if masked == 0 {
        return Err(Error::InvalidArgument("masked_bits_loss needs at least one masked group".into()));
    }
    let cats = group_categories(targets, mask.groups)?;
    let off = label_smoothing / c as f64 / masked as f64;
    let on = (1.0 - label_smoothing) / masked as f64 + off;
    let mut weights = vec![0.0f64; cats.len() * c];
    for (i, (&cat, &m)) in cats.iter().zip(mask.data()).enumerate() {
        if m {
            let row = &mut weights[i * c..(i + 1) * c];
            row.fill(off);
            row[cat as usize] = on;
        }
    }
    let w = Tensor::from_vec(weights, expected.as_slice(), logits.device())?.to_dtype(logits.dtype())?;
    let logp = ops::log_softmax(logits)?;
    Ok((w * logp)?.sum_all()?.neg()?)
}

#[derive(Debug, Clone)]
struct Block {
    norm1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Deterministic inverted dropout driven by an injected random source.
fn dropout<T: Real>(x: &Tensor, p: f64, rng: &mut Option<&mut dyn RngCore>) -> Result<Tensor> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p == 0.0 {
        return Ok(x.clone());
    }
    let scale = T::of(1.0 / (1.0 - p));
    let keep: Vec<T> = (0..x.elem_count())
        .map(|_| if rng.random_bool(p) { T::zero() } else { scale })
        .collect();
    let m = Tensor::from_vec(keep, x.shape(), x.device())?;
    Ok((x * m)?)
}

/// The masked bit transformer.
#[derive(Debug, Clone)]
pub struct MaskBit<T: Real> {
    cfg: GeneratorConfig,
    input: Linear,
    position: Tensor,
    class_embed: Embedding,
    blocks: Vec<Block>,
    norm_out: LayerNorm,
    head: Linear,
    _scalar: PhantomData<T>,
}

impl<T: Real> MaskBit<T> {
    pub fn new(store: &ParamStore<T>, cfg: &GeneratorConfig) -> Result<Self> {
        Self::in_scope(&store.scope(PREFIX), cfg)
    }

    pub fn in_scope(s: &Scope<T>, cfg: &GeneratorConfig) -> Result<Self> {
        cfg.validate()?;
        let h = cfg.hidden;
        let blocks = (0..cfg.depth)
            .map(|i| {
                let b = s.pp(format!("blocks.{i}"));
                Ok(Block {
                    norm1: LayerNorm::new(&b.pp("norm1"), h)?,
                    qkv: Linear::new(&b.pp("attn.qkv"), h, 3 * h, true)?,
                    proj: Linear::new(&b.pp("attn.proj"), h, h, true)?,
                    norm2: LayerNorm::new(&b.pp("norm2"), h)?,
                    fc1: Linear::new(&b.pp("mlp.fc1"), h, cfg.mlp_dim, true)?,
                    fc2: Linear::new(&b.pp("mlp.fc2"), cfg.mlp_dim, h, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            input: Linear::new(&s.pp("input"), cfg.bits, h, true)?,
            position: s.get("position", &[cfg.tokens, h], Init::Normal(0.02))?,
            class_embed: Embedding::new(&s.pp("class_embed"), cfg.num_classes + 1, h)?,
            blocks,
            norm_out: LayerNorm::new(&s.pp("norm_out"), h)?,
            head: Linear::new(&s.pp("head"), h, cfg.groups * cfg.categories(), true)?,
            _scalar: PhantomData,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    /// The `K x hidden` input projection, the model's only view of token identity.
    pub fn input_weight(&self) -> &Tensor {
        self.input.weight()
    }

    /// Inference forward pass: `(B, T, N, 2^(K/N))` logits.
    pub fn forward(&self, masked: &BitGrid, classes: &[ClassLabel]) -> Result<Tensor> {
        self.run(masked, classes, None)
    }

    /// Training forward pass with dropout drawn from `rng`.
    pub fn forward_train<R: RngCore>(&self, masked: &BitGrid, classes: &[ClassLabel], rng: &mut R) -> Result<Tensor> {
        self.run(masked, classes, Some(rng))
    }

    fn class_ids(&self, classes: &[ClassLabel]) -> Result<Vec<u32>> {
        let n = self.cfg.num_classes;
        classes
            .iter()
            .map(|c| match c {
                None => Ok(n as u32),
                Some(id) if (*id as usize) < n => Ok(*id),
                Some(id) => Err(Error::OutOfRange {
                    what: "class id",
                    value: *id as i64,
                    range: format!("[0, {n})"),
                }),
            })
            .collect()
    }

    fn run(&self, masked: &BitGrid, classes: &[ClassLabel], mut rng: Option<&mut dyn RngCore>) -> Result<Tensor> {
        let cfg = &self.cfg;
        if masked.bits != cfg.bits || masked.tokens_per_sample() != cfg.tokens {
            return Err(Error::ConfigMismatch {
                field: "generator input".into(),
                expected: format!("{} tokens of {} bits", cfg.tokens, cfg.bits),
                found: format!("{} tokens of {} bits", masked.tokens_per_sample(), masked.bits),
            });
        }
        if classes.len() != masked.batch {
            return Err(Error::shape("class labels", masked.batch, classes.len()));
        }
        let ids = self.class_ids(classes)?;
        let dev = self.position.device();
        let b = masked.batch;
        let h = cfg.hidden;

        let x = self.input.forward(&masked.to_sequence::<T>(dev)?)?;
        let x = x.broadcast_add(&self.position)?;
        let cls = self.class_embed.forward(&Tensor::new(ids, dev)?)?.reshape((b, 1, h))?;
        let mut x = Tensor::cat(&[&cls, &x], 1)?;
        x = dropout::<T>(&x, cfg.dropout, &mut rng)?;
        for blk in &self.blocks {
            let a = self.attention(blk, &blk.norm1.forward(&x)?)?;
            x = (x + dropout::<T>(&a, cfg.dropout, &mut rng)?)?;
            let m = blk.fc2.forward(&blk.fc1.forward(&blk.norm2.forward(&x)?)?.gelu_erf()?)?;
            x = (x + dropout::<T>(&m, cfg.dropout, &mut rng)?)?;
        }
        let x = self.norm_out.forward(&x.narrow(1, 1, cfg.tokens)?)?;
        Ok(self.head.forward(&x)?.reshape((b, cfg.tokens, cfg.groups, cfg.categories()))?)
    }

    fn attention(&self, blk: &Block, x: &Tensor) -> Result<Tensor> {
        let (b, l, h) = x.dims3()?;
        let heads = self.cfg.heads;
        let dh = h / heads;
        let qkv = blk.qkv.forward(x)?.reshape((b, l, 3, heads, dh))?;
        let part = |i: usize| -> Result<Tensor> { Ok(qkv.narrow(2, i, 1)?.squeeze(2)?.transpose(1, 2)?.contiguous()?) };
        let (q, k, v) = (part(0)?, part(1)?, part(2)?);
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = ops::softmax(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, l, h))?;
        blk.proj.forward(&y)
    }
}

/// Trainable parameter count of a generator configuration.
pub fn generator_parameters(cfg: &GeneratorConfig) -> Result<usize> {
    let store = ParamStore::<f32>::zeroed();
    MaskBit::new(&store, cfg)?;
    Ok(store.num_params(""))
}

/// Largest-logit category of every group: `(B, T, N)` flattened.
pub fn argmax_categories(logits: &Tensor) -> Result<Vec<u32>> {
    Ok(logits.argmax(D::Minus1)?.flatten_all()?.to_vec1::<u32>()?)
}
