//! Non-autoregressive decoding: start fully masked, predict every masked group, keep the
//! most confident predictions on an arccos schedule and re-mask the rest.

use candle_core::{DType, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::generator::{mask_fraction, ClassLabel, GroupedMask, MaskBit};
use crate::quantizers::{index_to_bits, BitGrid};
use crate::scalar::Real;
use crate::tokenizer::Autoencoder;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SampleConfig {
    pub steps: usize,
    pub temperature: f64,
    pub guidance: f64,
    pub scale_pow: f64,
    pub seed: u64,
}

impl Default for SampleConfig {
    fn default() -> Self {
        Self {
            steps: 64,
            temperature: 7.8,
            guidance: 6.8,
            scale_pow: 3.0,
            seed: 0,
        }
    }
}

impl SampleConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampling needs at least one step".into()));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be finite and >= 0, got {}", self.temperature)));
        }
        if !(self.guidance >= 0.0 && self.guidance.is_finite()) {
            return Err(Error::Config(format!("guidance must be finite and >= 0, got {}", self.guidance)));
        }
        if !(self.scale_pow > 0.0 && self.scale_pow.is_finite()) {
            return Err(Error::Config(format!("scale_pow must be positive, got {}", self.scale_pow)));
        }
        Ok(())
    }
}

/// Anything that maps a partially masked grid to `(B, T, N, 2^(K/N))` group logits.
pub trait BitPredictor {
    fn bits(&self) -> usize;
    fn groups(&self) -> usize;
    fn predict(&self, masked: &BitGrid, classes: &[ClassLabel]) -> Result<Tensor>;
}

impl<T: Real> BitPredictor for MaskBit<T> {
    fn bits(&self) -> usize {
        self.config().bits
    }

    fn groups(&self) -> usize {
        self.config().groups
    }

    fn predict(&self, masked: &BitGrid, classes: &[ClassLabel]) -> Result<Tensor> {
        self.forward(masked, classes)
    }
}

fn check_step(step: usize, steps: usize) -> Result<()> {
    if step == 0 || step > steps {
        return Err(Error::OutOfRange {
            what: "sampling step",
            value: step as i64,
            range: format!("[1, {steps}]"),
        });
    }
    Ok(())
}

/// Cumulative number of groups kept after `step` of `steps`:
/// `ceil(G * (1 - (2/pi) * arccos(step / steps)))`.
pub fn keep_count(step: usize, steps: usize, total_groups: usize) -> Result<usize> {
    check_step(step, steps)?;
    if step == steps {
        return Ok(total_groups);
    }
    let kept = total_groups as f64 * (1.0 - mask_fraction(step as f64 / steps as f64));
    Ok((kept.ceil().max(0.0) as usize).min(total_groups))
}

/// Classifier-free guidance: `uncond + (1 + scale) * (cond - uncond)`, evaluated as
/// `cond + scale * (cond - uncond)` so that `scale = 0` returns `cond` unchanged.
pub fn cfg_combine(cond: &Tensor, uncond: &Tensor, scale: f64) -> Result<Tensor> {
    if cond.dims() != uncond.dims() {
        return Err(Error::shape("cfg_combine", format!("{:?}", cond.dims()), format!("{:?}", uncond.dims())));
    }
    if !(scale >= 0.0) {
        return Err(Error::InvalidArgument(format!("guidance scale must be >= 0, got {scale}")));
    }
    if scale == 0.0 {
        return Ok(cond.clone());
    }
    Ok((cond + ((cond - uncond)? * scale)?)?)
}

/// `base * (step / steps)^m`.
pub fn guidance_at_step(step: usize, steps: usize, base: f64, scale_pow: f64) -> Result<f64> {
    check_step(step, steps)?;
    Ok(base * (step as f64 / steps as f64).powf(scale_pow))
}

/// Decoding progress: committed bits (zero where still masked), the group mask and the
/// number of completed steps.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SamplerState {
    pub committed: BitGrid,
    pub mask: GroupedMask,
    pub step: usize,
}

impl SamplerState {
    pub fn fully_masked(batch: usize, height: usize, width: usize, bits: usize, groups: usize) -> Result<Self> {
        if groups == 0 || bits % groups != 0 {
            return Err(Error::InvalidArgument(format!("{groups} groups do not divide {bits} bits")));
        }
        let committed = BitGrid::new(batch, height, width, bits, vec![0; batch * height * width * bits])?;
        Ok(Self {
            committed,
            mask: GroupedMask::filled(batch, height * width, groups, true),
            step: 0,
        })
    }

    pub fn masked_groups(&self) -> usize {
        self.mask.count_masked()
    }

    pub fn is_done(&self) -> bool {
        self.masked_groups() == 0
    }
}

fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            break u;
        }
    };
    -(-u.ln()).ln()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|v| v - lse).collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn draw_category<R: Rng + ?Sized>(logp: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, lp) in logp.iter().enumerate() {
        acc += lp.exp();
        if u < acc {
            return i;
        }
    }
    argmax(logp)
}

/// One decoding step. Runs the model with the class and null labels, combines with the
/// scheduled guidance, draws a category for every masked group (argmax when
/// `temperature == 0`), scores it by log-probability plus annealed Gumbel noise and
/// commits the best groups so that the kept total reaches [`keep_count`]. At least one
/// group is committed per step.
pub fn sample_step<P: BitPredictor + ?Sized, R: Rng + ?Sized>(
    state: &SamplerState,
    model: &P,
    classes: &[ClassLabel],
    cfg: &SampleConfig,
    rng: &mut R,
) -> Result<SamplerState> {
    cfg.validate()?;
    if state.is_done() {
        return Err(Error::InvalidArgument("no masked groups left to sample".into()));
    }
    let step = state.step + 1;
    check_step(step, cfg.steps)?;
    let grid = &state.committed;
    let groups = state.mask.groups;
    if model.bits() != grid.bits || model.groups() != groups {
        return Err(Error::ConfigMismatch {
            field: "sampler bits/groups".into(),
            expected: format!("K={} N={}", grid.bits, groups),
            found: format!("K={} N={}", model.bits(), model.groups()),
        });
    }
    let cond = model.predict(grid, classes)?;
    let scale = guidance_at_step(step, cfg.steps, cfg.guidance, cfg.scale_pow)?;
    let logits = if scale == 0.0 {
        cond
    } else {
        let nulls = vec![None; classes.len()];
        cfg_combine(&cond, &model.predict(grid, &nulls)?, scale)?
    };
    let group_bits = grid.bits / groups;
    let cats = 1usize << group_bits;
    let expected = [grid.batch, state.mask.tokens, groups, cats];
    if logits.dims() != expected {
        return Err(Error::shape("predictor logits", format!("{expected:?}"), format!("{:?}", logits.dims())));
    }
    let host: Vec<f64> = logits.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?;

    let total = state.mask.groups_per_sample();
    let target = keep_count(step, cfg.steps, total)?;
    let noise = cfg.temperature * (1.0 - step as f64 / cfg.steps as f64);
    let mut next = state.clone();
    next.step = step;
    for b in 0..grid.batch {
        let slots = state.mask.sample(b);
        let kept = total - slots.iter().filter(|&&m| m).count();
        let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
        for (slot, _) in slots.iter().enumerate().filter(|(_, &m)| m) {
            let off = (b * total + slot) * cats;
            let logp = log_softmax(&host[off..off + cats]);
            let cat = if cfg.temperature == 0.0 { argmax(&logp) } else { draw_category(&logp, rng) };
            let mut confidence = logp[cat];
            if noise > 0.0 {
                confidence += noise * gumbel(rng);
            }
            candidates.push((confidence, slot, cat));
        }
        let wanted = target.saturating_sub(kept).max(1).min(candidates.len());
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for &(_, slot, cat) in &candidates[..wanted] {
            let (t, n) = (slot / groups, slot % groups);
            let bits = index_to_bits(cat as u32, group_bits)?;
            next.committed.token_mut(b, t)[n * group_bits..(n + 1) * group_bits].copy_from_slice(bits.bits());
            next.mask.set(b, t, n, false);
        }
    }
    Ok(next)
}

/// Runs decoding steps from a fully masked grid until every group is committed.
pub fn generate_tokens<P: BitPredictor + ?Sized>(
    model: &P,
    classes: &[ClassLabel],
    height: usize,
    width: usize,
    cfg: &SampleConfig,
) -> Result<BitGrid> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = SamplerState::fully_masked(classes.len(), height, width, model.bits(), model.groups())?;
    while !state.is_done() {
        state = sample_step(&state, model, classes, cfg, &mut rng)?;
    }
    Ok(state.committed)
}

/// Samples token grids and decodes them to images in `[-1, 1]`.
pub fn generate<P: BitPredictor + ?Sized, T: Real>(
    model: &P,
    tokenizer: &Autoencoder<T>,
    classes: &[ClassLabel],
    height: usize,
    width: usize,
    cfg: &SampleConfig,
) -> Result<(BitGrid, Tensor)> {
    if tokenizer.bits() != Some(model.bits()) {
        return Err(Error::ConfigMismatch {
            field: "bits".into(),
            expected: format!("{:?}", tokenizer.bits()),
            found: model.bits().to_string(),
        });
    }
    let grid = generate_tokens(model, classes, height, width, cfg)?;
    let images = tokenizer.decode_grid(&grid)?;
    Ok((grid, images))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    /// Emits the same logits for every position, ignoring its inputs.
    struct Fixed {
        bits: usize,
        groups: usize,
        row: Vec<f64>,
    }

    impl BitPredictor for Fixed {
        fn bits(&self) -> usize {
            self.bits
        }
        fn groups(&self) -> usize {
            self.groups
        }
        fn predict(&self, masked: &BitGrid, classes: &[ClassLabel]) -> Result<Tensor> {
            let t = masked.tokens_per_sample();
            let c = self.row.len();
            let data: Vec<f64> = (0..classes.len() * t * self.groups).flat_map(|_| self.row.clone()).collect();
            Ok(Tensor::from_vec(data, (classes.len(), t, self.groups, c), &Device::Cpu)?)
        }
    }

    #[test]
    fn keep_count_examples() {
        assert_eq!(keep_count(32, 64, 512).unwrap(), 171);
        assert_eq!(keep_count(64, 64, 512).unwrap(), 512);
        assert_eq!(keep_count(1, 1, 7).unwrap(), 7);
        assert!(keep_count(0, 4, 7).is_err());
        assert!(keep_count(5, 4, 7).is_err());
    }

    #[test]
    fn guidance_examples() {
        assert!((guidance_at_step(32, 64, 6.8, 3.0).unwrap() - 0.85).abs() < 1e-12);
        assert_eq!(guidance_at_step(64, 64, 6.8, 3.0).unwrap(), 6.8);
        assert!((guidance_at_step(1, 64, 6.8, 1e-9).unwrap() - 6.8).abs() < 1e-6);
    }

    #[test]
    fn cfg_examples() {
        let c = Tensor::new(&[2.0f64], &Device::Cpu).unwrap();
        let u = Tensor::new(&[0.0f64], &Device::Cpu).unwrap();
        let v: Vec<f64> = cfg_combine(&c, &u, 1.0).unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![4.0]);
        let v: Vec<f64> = cfg_combine(&c, &c, 5.0).unwrap().to_vec1().unwrap();
        assert_eq!(v, vec![2.0]);
    }

    #[test]
    fn constant_stub_commits_fixed_codeword() {
        let mut row = vec![0.0; 16];
        row[9] = 50.0;
        let model = Fixed { bits: 8, groups: 2, row };
        let cfg = SampleConfig {
            steps: 4,
            temperature: 0.0,
            ..SampleConfig::default()
        };
        let grid = generate_tokens(&model, &[Some(0), Some(1)], 2, 2, &cfg).unwrap();
        for i in grid.indices().unwrap() {
            assert_eq!(i, 9 * 16 + 9);
        }
    }

    #[test]
    fn single_step_unmasks_everything() {
        let model = Fixed {
            bits: 4,
            groups: 2,
            row: vec![0.1, 0.2, 0.3, 0.4],
        };
        let cfg = SampleConfig {
            steps: 1,
            ..SampleConfig::default()
        };
        let state = SamplerState::fully_masked(1, 3, 3, 4, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = sample_step(&state, &model, &[None], &cfg, &mut rng).unwrap();
        assert!(next.is_done());
        assert!(next.committed.data().iter().all(|&b| b == 1 || b == -1));
        assert!(sample_step(&next, &model, &[None], &cfg, &mut rng).is_err());
    }
}
