//! Vector quantization against a learned codebook, lookup-free sign quantization into
//! bit tokens, and the arithmetic that moves between bit tokens and integer token ids.

use candle_core::{DType, Device, Tensor, D};

use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;
use crate::nn::{ops, Init, Scope};
use crate::scalar::Real;

/// Largest supported bit width.
pub const MAX_BITS: usize = 30;

/// A single bit token: `K` entries, each `-1` or `+1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitToken(Vec<i8>);

impl BitToken {
    pub fn new(bits: Vec<i8>) -> Result<Self> {
        check_width(bits.len())?;
        if let Some((position, &v)) = bits.iter().enumerate().find(|(_, &b)| b != 1 && b != -1) {
            return Err(Error::InvalidBit {
                position,
                value: v as f64,
            });
        }
        Ok(Self(bits))
    }

    /// Interprets real values that must be exactly `-1` or `+1`.
    pub fn from_reals<T: Real>(values: &[T]) -> Result<Self> {
        let bits = values
            .iter()
            .enumerate()
            .map(|(position, &v)| {
                if v == T::one() {
                    Ok(1)
                } else if v == -T::one() {
                    Ok(-1)
                } else {
                    Err(Error::InvalidBit {
                        position,
                        value: v.as_f64(),
                    })
                }
            })
            .collect::<Result<Vec<i8>>>()?;
        Self::new(bits)
    }

    pub fn bits(&self) -> &[i8] {
        &self.0
    }

    pub fn width(&self) -> usize {
        self.0.len()
    }

    pub fn index(&self) -> u32 {
        pack_bits(&self.0)
    }
}

fn check_width(k: usize) -> Result<()> {
    if k == 0 || k > MAX_BITS {
        return Err(Error::OutOfRange {
            what: "bit width",
            value: k as i64,
            range: format!("[1, {MAX_BITS}]"),
        });
    }
    Ok(())
}

// Bit 0 is the most significant binary digit; -1 reads as 0 and +1 as 1.
fn pack_bits(bits: &[i8]) -> u32 {
    bits.iter().fold(0u32, |acc, &b| (acc << 1) | u32::from(b > 0))
}

/// Binary reading of a bit token: `(+1,-1,-1,+1)` is `1001` in base 2, i.e. 9.
pub fn bits_to_index(bits: &[i8]) -> Result<u32> {
    Ok(BitToken::new(bits.to_vec())?.index())
}

/// Inverse of [`bits_to_index`].
pub fn index_to_bits(index: u32, k: usize) -> Result<BitToken> {
    check_width(k)?;
    if u64::from(index) >= 1u64 << k {
        return Err(Error::OutOfRange {
            what: "token index",
            value: index as i64,
            range: format!("[0, {})", 1u64 << k),
        });
    }
    Ok(BitToken(
        (0..k)
            .map(|i| if (index >> (k - 1 - i)) & 1 == 1 { 1 } else { -1 })
            .collect(),
    ))
}

/// A batch of bit tokens laid out as `batch x height x width x bits`.
///
/// Entries are `-1`/`+1`; grids handled by the masked generator may also carry `0` for
/// masked positions (see [`crate::generator::apply_mask`]).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitGrid {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub bits: usize,
    data: Vec<i8>,
}

impl BitGrid {
    pub fn new(batch: usize, height: usize, width: usize, bits: usize, data: Vec<i8>) -> Result<Self> {
        check_width(bits)?;
        let n = batch * height * width * bits;
        if data.len() != n {
            return Err(Error::shape("BitGrid::new", n, data.len()));
        }
        Ok(Self {
            batch,
            height,
            width,
            bits,
            data,
        })
    }

    /// Validated grid of `-1`/`+1` entries only.
    pub fn from_bits(batch: usize, height: usize, width: usize, bits: usize, data: Vec<i8>) -> Result<Self> {
        if let Some((position, &v)) = data.iter().enumerate().find(|(_, &b)| b != 1 && b != -1) {
            return Err(Error::InvalidBit {
                position,
                value: v as f64,
            });
        }
        Self::new(batch, height, width, bits, data)
    }

    /// Grid whose tokens are the binary expansions of `indices` (row-major per sample).
    pub fn from_indices(batch: usize, height: usize, width: usize, bits: usize, indices: &[u32]) -> Result<Self> {
        if indices.len() != batch * height * width {
            return Err(Error::shape("BitGrid::from_indices", batch * height * width, indices.len()));
        }
        let mut data = Vec::with_capacity(indices.len() * bits);
        for &i in indices {
            data.extend_from_slice(index_to_bits(i, bits)?.bits());
        }
        Self::new(batch, height, width, bits, data)
    }

    /// Reads a `(B, K, h, w)` tensor of signs (`-1`, `0` or `+1`).
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (b, k, h, w) = t.dims4()?;
        let v: Vec<f64> = t
            .permute((0, 2, 3, 1))?
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1()?;
        let data = v
            .iter()
            .enumerate()
            .map(|(position, &x)| match x {
                x if x == 1.0 => Ok(1),
                x if x == -1.0 => Ok(-1),
                x if x == 0.0 => Ok(0),
                value => Err(Error::InvalidBit { position, value }),
            })
            .collect::<Result<Vec<i8>>>()?;
        Self::new(b, h, w, k, data)
    }

    /// `(B, K, h, w)` tensor.
    pub fn to_tensor<T: Real>(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<T> = self.data.iter().map(|&b| T::of(b as f64)).collect();
        Ok(Tensor::from_vec(v, (self.batch, self.height, self.width, self.bits), device)?
            .permute((0, 3, 1, 2))?
            .contiguous()?)
    }

    /// `(B, T, K)` token-sequence tensor.
    pub fn to_sequence<T: Real>(&self, device: &Device) -> Result<Tensor> {
        let v: Vec<T> = self.data.iter().map(|&b| T::of(b as f64)).collect();
        Ok(Tensor::from_vec(v, (self.batch, self.tokens_per_sample(), self.bits), device)?)
    }

    pub fn tokens_per_sample(&self) -> usize {
        self.height * self.width
    }

    pub fn num_tokens(&self) -> usize {
        self.batch * self.tokens_per_sample()
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i8] {
        &mut self.data
    }

    /// Token `t` (row-major position) of sample `b`.
    pub fn token(&self, b: usize, t: usize) -> &[i8] {
        let start = (b * self.tokens_per_sample() + t) * self.bits;
        &self.data[start..start + self.bits]
    }

    pub fn token_mut(&mut self, b: usize, t: usize) -> &mut [i8] {
        let start = (b * self.tokens_per_sample() + t) * self.bits;
        &mut self.data[start..start + self.bits]
    }

    /// The samples `range` as a new grid.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        let per = self.tokens_per_sample() * self.bits;
        Self {
            batch: range.len(),
            height: self.height,
            width: self.width,
            bits: self.bits,
            data: self.data[range.start * per..range.end * per].to_vec(),
        }
    }

    /// Concatenates grids of identical token geometry along the batch axis.
    pub fn concat(parts: &[BitGrid]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot concatenate zero grids".into()))?;
        let mut data = Vec::new();
        let mut batch = 0;
        for p in parts {
            if (p.height, p.width, p.bits) != (first.height, first.width, first.bits) {
                return Err(Error::shape(
                    "BitGrid::concat",
                    format!("{}x{}x{}", first.height, first.width, first.bits),
                    format!("{}x{}x{}", p.height, p.width, p.bits),
                ));
            }
            data.extend_from_slice(&p.data);
            batch += p.batch;
        }
        Self::new(batch, first.height, first.width, first.bits, data)
    }

    /// Token ids of every token, sample-major.
    pub fn indices(&self) -> Result<Vec<u32>> {
        self.data.chunks(self.bits).map(bits_to_index).collect()
    }
}

/// Learned vector-quantization codebook of `V` entries of dimension `D`.
#[derive(Debug, Clone)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new<T: Real>(scope: &Scope<T>, size: usize, dim: usize) -> Result<Self> {
        let entries = scope.get("entries", &[size, dim], Init::Uniform(1.0 / size as f64))?;
        Self::from_entries(entries)
    }

    pub fn from_entries(entries: Tensor) -> Result<Self> {
        let (v, d) = entries.dims2()?;
        if v < 2 || d < 1 {
            return Err(Error::InvalidArgument(format!("codebook must have V >= 2 and D >= 1, got {v}x{d}")));
        }
        let all_finite = entries
            .flatten_all()?
            .to_dtype(DType::F64)?
            .to_vec1::<f64>()?
            .iter()
            .all(|x| x.is_finite());
        if !all_finite {
            return Err(Error::NonFinite("codebook entries"));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.dims()[0]
    }

    pub fn dim(&self) -> usize {
        self.entries.dims()[1]
    }
}

/// Result of [`vq_quantize`].
#[derive(Debug, Clone)]
pub struct VqOutput {
    /// Straight-through quantized latent, `(B, D, h, w)`.
    pub quantized: Tensor,
    /// Codebook index per position, `B*h*w` row-major.
    pub indices: Vec<u32>,
    pub grid: (usize, usize, usize),
    /// `mean((z - sg(q))^2)`.
    pub commit: Tensor,
    /// `mean((sg(z) - q)^2)`.
    pub codebook: Tensor,
}

/// `(B, C, h, w)` -> `(B*h*w, C)`.
pub(crate) fn to_rows(x: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.permute((0, 2, 3, 1))?.reshape((b * h * w, c))?)
}

/// `(B*h*w, C)` -> `(B, C, h, w)`.
pub(crate) fn from_rows(x: &Tensor, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let c = x.dims2()?.1;
    Ok(x.reshape((b, h, w, c))?.permute((0, 3, 1, 2))?.contiguous()?)
}

/// Exhaustive nearest-neighbor search over rows; ties resolve to the lowest index.
pub fn nearest_code(rows: &[f64], dim: usize, entries: &[f64]) -> Vec<u32> {
    rows.chunks(dim)
        .map(|z| {
            let mut best = (f64::INFINITY, 0u32);
            for (v, e) in entries.chunks(dim).enumerate() {
                let d: f64 = z.iter().zip(e).map(|(a, b)| (a - b) * (a - b)).sum();
                if d < best.0 {
                    best = (d, v as u32);
                }
            }
            best.1
        })
        .collect()
}

/// Vector quantization of a `(B, D, h, w)` latent against `codebook`.
pub fn vq_quantize(latent: &Tensor, codebook: &Codebook) -> Result<VqOutput> {
    let (b, d, h, w) = latent.dims4()?;
    if d != codebook.dim() {
        return Err(Error::shape("vq_quantize", format!("latent dim {}", codebook.dim()), d));
    }
    let rows = to_rows(latent)?;
    let host_rows: Vec<f64> = rows.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    let host_entries: Vec<f64> = codebook.entries.detach().to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;
    if host_rows.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("vq_quantize latent"));
    }
    let indices = nearest_code(&host_rows, d, &host_entries);
    let ids = Tensor::new(indices.as_slice(), latent.device())?;
    let q_rows = codebook.entries.index_select(&ids, 0)?;
    let commit = (&rows - q_rows.detach())?.sqr()?.mean_all()?;
    let codebook_term = (rows.detach() - &q_rows)?.sqr()?.mean_all()?;
    let st = ops::straight_through(&rows, &q_rows)?;
    Ok(VqOutput {
        quantized: from_rows(&st, b, h, w)?,
        indices,
        grid: (b, h, w),
        commit,
        codebook: codebook_term,
    })
}

/// Lookup-free quantizer settings.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LfqConfig {
    /// Bit width `K`.
    pub bits: usize,
    pub entropy_weight: f64,
    pub entropy_temperature: f64,
}

impl Default for LfqConfig {
    fn default() -> Self {
        Self {
            bits: 12,
            entropy_weight: 0.02,
            entropy_temperature: 0.01,
        }
    }
}

impl LfqConfig {
    pub fn validate(&self) -> Result<()> {
        check_width(self.bits)?;
        if !(self.entropy_temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "entropy temperature must be > 0, got {}",
                self.entropy_temperature
            )));
        }
        Ok(())
    }
}

/// Learned 1x1 projections around the sign quantizer: latent `D -> K` before, `K -> D` after.
#[derive(Debug, Clone)]
pub struct Lfq {
    cfg: LfqConfig,
    to_bits: Conv2d,
    from_bits: Conv2d,
}

/// Result of [`Lfq::quantize`].
#[derive(Debug, Clone)]
pub struct LfqOutput {
    /// Straight-through signs, `(B, K, h, w)`, forward values in `{-1, +1}`.
    pub bits: Tensor,
    /// Projected latent before the sign, `(B, K, h, w)`.
    pub pre_quant: Tensor,
}

impl Lfq {
    pub fn new<T: Real>(scope: &Scope<T>, latent_dim: usize, cfg: LfqConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            to_bits: Conv2d::new(&scope.pp("to_bits"), latent_dim, cfg.bits, 1, 1)?,
            from_bits: Conv2d::new(&scope.pp("from_bits"), cfg.bits, latent_dim, 1, 1)?,
        })
    }

    pub fn config(&self) -> &LfqConfig {
        &self.cfg
    }

    pub fn quantize(&self, latent: &Tensor) -> Result<LfqOutput> {
        lfq_quantize(latent, self)
    }

    /// Maps bit tokens (or zero-masked bit tokens) back to the decoder's latent space.
    pub fn embed_bits(&self, bits: &Tensor) -> Result<Tensor> {
        self.from_bits.forward(bits)
    }
}

/// `+1` where `x >= 0`, `-1` elsewhere; not differentiable.
pub fn sign(x: &Tensor) -> Result<Tensor> {
    let pos = x.ge(0.0)?;
    let ones = x.ones_like()?;
    Ok(pos.where_cond(&ones, &ones.neg()?)?)
}

/// Projects the `(B, D, h, w)` latent to `K` channels and quantizes by sign.
pub fn lfq_quantize(latent: &Tensor, lfq: &Lfq) -> Result<LfqOutput> {
    let finite = latent
        .detach()
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?
        .iter()
        .all(|x| x.is_finite());
    if !finite {
        return Err(Error::NonFinite("lfq_quantize latent"));
    }
    let pre_quant = lfq.to_bits.forward(latent)?;
    let bits = ops::straight_through(&pre_quant, &sign(&pre_quant)?)?;
    Ok(LfqOutput { bits, pre_quant })
}

// log(sigmoid(a)) = -softplus(-a), computed without overflow.
fn log_sigmoid(a: &Tensor) -> Result<Tensor> {
    let softplus_neg = (a.neg()?.relu()? + (a.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    Ok(softplus_neg.neg()?)
}

fn bernoulli_entropy_clamped(p: &Tensor, eps: f64) -> Result<Tensor> {
    let q = (p.neg()? + 1.0)?;
    let lp = p.clamp(eps, 1.0)?.log()?;
    let lq = q.clamp(eps, 1.0)?.log()?;
    Ok(((p * lp)? + (q * lq)?)?.neg()?)
}

/// Factorized per-bit entropy penalty on `(B, K, h, w)` pre-quantization values.
///
/// With `p_k = sigmoid(2 x_k / temperature)` the probability of bit `k` being `+1`, returns
/// `mean_tokens sum_k H(p_k) - sum_k H(mean_tokens p_k)` (nats). The first term rewards
/// confident per-token assignments; the second rewards even usage of both values of every
/// bit across the batch.
pub fn entropy_loss(pre_quant: &Tensor, temperature: f64) -> Result<Tensor> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!("entropy temperature must be > 0, got {temperature}")));
    }
    let rows = to_rows(pre_quant)?;
    let a = (rows * (2.0 / temperature))?;
    let log_p = log_sigmoid(&a)?;
    let log_q = log_sigmoid(&a.neg()?)?;
    let p = log_p.exp()?;
    let q = log_q.exp()?;
    let per_token = ((&p * &log_p)? + (&q * &log_q)?)?.neg()?.sum(D::Minus1)?.mean_all()?;
    let eps = match pre_quant.dtype() {
        DType::F64 => 1e-300,
        _ => 1e-30,
    };
    let usage = bernoulli_entropy_clamped(&p.mean(0)?, eps)?.sum_all()?;
    Ok((per_token - usage)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;

    #[test]
    fn bits_1001_are_index_9() {
        assert_eq!(bits_to_index(&[1, -1, -1, 1]).unwrap(), 9);
        assert_eq!(index_to_bits(9, 4).unwrap().bits(), &[1, -1, -1, 1]);
        assert_eq!(bits_to_index(&[-1, -1, -1]).unwrap(), 0);
        assert_eq!(index_to_bits(0, 5).unwrap().bits(), &[-1; 5]);
    }

    #[test]
    fn rejects_invalid_bits_and_ranges() {
        assert!(matches!(bits_to_index(&[1, 0, -1]), Err(Error::InvalidBit { position: 1, .. })));
        assert!(matches!(index_to_bits(16, 4), Err(Error::OutOfRange { .. })));
        assert!(index_to_bits(0, 0).is_err());
        assert!(index_to_bits(0, 31).is_err());
        assert_eq!(index_to_bits((1 << 30) - 1, 30).unwrap().bits(), &[1; 30]);
    }

    #[test]
    fn roundtrip_all_bytes() {
        for v in 0..256u32 {
            assert_eq!(index_to_bits(v, 8).unwrap().index(), v);
        }
    }

    #[test]
    fn sign_tie_goes_positive() {
        let t = Tensor::new(&[0.3f64, -0.7, 0.0], &Device::Cpu).unwrap();
        assert_eq!(sign(&t).unwrap().to_vec1::<f64>().unwrap(), vec![1.0, -1.0, 1.0]);
        let q = Tensor::new(&[1.0f64, -1.0, -1.0, 1.0], &Device::Cpu).unwrap();
        assert_eq!(sign(&q).unwrap().to_vec1::<f64>().unwrap(), q.to_vec1::<f64>().unwrap());
    }

    #[test]
    fn vq_two_entry_example() {
        let dev = Device::Cpu;
        let cb = Codebook::from_entries(Tensor::new(&[[0.0f64, 0.0], [1.0, 1.0]], &dev).unwrap()).unwrap();
        let z = Tensor::new(&[0.9f64, 0.9], &dev).unwrap().reshape((1, 2, 1, 1)).unwrap();
        let out = vq_quantize(&z, &cb).unwrap();
        assert_eq!(out.indices, vec![1]);
        assert_eq!(out.quantized.flatten_all().unwrap().to_vec1::<f64>().unwrap(), vec![1.0, 1.0]);
        let commit = out.commit.to_scalar::<f64>().unwrap();
        assert!((commit - 0.01).abs() < 1e-12);
    }

    #[test]
    fn vq_exact_entry_has_zero_commitment() {
        let dev = Device::Cpu;
        let store = ParamStore::<f64>::new(5);
        let cb = Codebook::new(&store.root(), 8, 3).unwrap();
        let e3 = cb.entries().get(3).unwrap();
        let z = e3.reshape((1, 3, 1, 1)).unwrap();
        let out = vq_quantize(&z, &cb).unwrap();
        assert_eq!(out.indices, vec![3]);
        assert_eq!(out.commit.to_scalar::<f64>().unwrap(), 0.0);
        let bad = Tensor::zeros((1, 4, 1, 1), DType::F64, &dev).unwrap();
        assert!(matches!(vq_quantize(&bad, &cb), Err(Error::Shape { .. })));
    }

    #[test]
    fn codebook_validation() {
        let dev = Device::Cpu;
        assert!(Codebook::from_entries(Tensor::zeros((1, 4), DType::F32, &dev).unwrap()).is_err());
        let nan = Tensor::new(&[[0.0f32, f32::NAN], [1.0, 1.0]], &dev).unwrap();
        assert!(matches!(Codebook::from_entries(nan), Err(Error::NonFinite(_))));
    }

    #[test]
    fn entropy_endpoints() {
        let dev = Device::Cpu;
        let k = 5;
        let zeros = Tensor::zeros((4, k, 2, 2), DType::F64, &dev).unwrap();
        let l = entropy_loss(&zeros, 0.01).unwrap().to_scalar::<f64>().unwrap();
        assert!(l.abs() < 1e-12, "{l}");
        // every codeword of {-1,+1}^2 used once with large magnitude
        let big: Vec<f64> = (0..4u32)
            .flat_map(|i| index_to_bits(i, 2).unwrap().bits().iter().map(|&b| b as f64 * 50.0).collect::<Vec<_>>())
            .collect();
        let t = Tensor::from_vec(big, (4, 2), &dev).unwrap().reshape((4, 2, 1, 1)).unwrap();
        let l = entropy_loss(&t, 0.01).unwrap().to_scalar::<f64>().unwrap();
        assert!((l + 2.0 * std::f64::consts::LN_2).abs() < 1e-9, "{l}");
        assert!(entropy_loss(&zeros, 0.0).is_err());
    }

    #[test]
    fn bitgrid_tensor_roundtrip() {
        let dev = Device::Cpu;
        let g = BitGrid::from_indices(2, 2, 3, 4, &[0, 1, 2, 3, 4, 5, 15, 14, 13, 12, 11, 10]).unwrap();
        let t = g.to_tensor::<f32>(&dev).unwrap();
        assert_eq!(t.dims(), &[2, 4, 2, 3]);
        assert_eq!(BitGrid::from_tensor(&t).unwrap(), g);
        assert_eq!(g.indices().unwrap()[6], 15);
        assert_eq!(g.token(1, 0), index_to_bits(15, 4).unwrap().bits());
    }
}
