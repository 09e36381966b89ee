//! Distribution metrics (Fréchet distance, Inception score), bit-level probes and
//! nearest-neighbor analysis.

use std::io::Write;
use std::path::Path;

use candle_core::{DType, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{images_to_tensor, resize_center_crop, spread_indices, Dataset};
use crate::error::{Error, Result};
use crate::losses::{extract_features, FeatureExtractor};
use crate::quantizers::BitGrid;
use crate::scalar::Real;
use crate::tokenizer::Autoencoder;

/// Tolerance below zero accepted for eigenvalues of covariance-derived matrices.
pub const PSD_TOLERANCE: f64 = 1e-6;

/// Mean, unbiased covariance and sample count of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStats {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
    pub count: usize,
}

impl FeatureStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Statistics of the union of two disjoint sample sets.
    pub fn merge(&self, other: &FeatureStats) -> Result<FeatureStats> {
        if self.dim() != other.dim() {
            return Err(Error::shape("FeatureStats::merge", self.dim(), other.dim()));
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        let mean = &self.mean + &delta * (nb / n);
        let scatter = &self.covariance * (na - 1.0) + &other.covariance * (nb - 1.0) + (&delta * delta.transpose()) * (na * nb / n);
        Ok(FeatureStats {
            mean,
            covariance: scatter / (n - 1.0),
            count: self.count + other.count,
        })
    }
}

/// Sample mean and unbiased covariance of the rows of `features`.
pub fn compute_stats(features: &[Vec<f64>]) -> Result<FeatureStats> {
    let n = features.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("feature statistics need at least 2 samples, got {n}")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        return Err(Error::shape("compute_stats rows", d, "ragged or empty rows"));
    }
    let x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    let mean = DVector::from_fn(d, |j, _| x.column(j).sum() / n as f64);
    let mut centered = x;
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let covariance = (centered.transpose() * &centered) / (n as f64 - 1.0);
    Ok(FeatureStats { mean, covariance, count: n })
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Square root of a symmetric PSD matrix; eigenvalues down to `-PSD_TOLERANCE` (relative
/// to the largest magnitude) are clamped to zero.
pub fn psd_sqrt(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let scale = eig.eigenvalues.amax().max(1.0);
    if eig.eigenvalues.iter().any(|&l| l < -PSD_TOLERANCE * scale || !l.is_finite()) {
        return Err(Error::InvalidArgument("matrix is not positive semi-definite".into()));
    }
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn frechet_distance(a: &FeatureStats, b: &FeatureStats) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape("frechet_distance", a.dim(), b.dim()));
    }
    let diff = (&a.mean - &b.mean).norm_squared();
    let sa = psd_sqrt(&a.covariance)?;
    let cross = psd_sqrt(&(&sa * &b.covariance * &sa))?;
    let fd = diff + a.covariance.trace() + b.covariance.trace() - 2.0 * cross.trace();
    Ok(fd.max(0.0))
}

/// `exp(mean_i KL(p(y|x_i) || p(y)))` for rows of class probabilities.
pub fn inception_score(probs: &[Vec<f64>]) -> Result<f64> {
    let n = probs.len();
    if n == 0 {
        return Err(Error::InvalidArgument("inception score of an empty set".into()));
    }
    let c = probs[0].len();
    for (i, row) in probs.iter().enumerate() {
        let sum: f64 = row.iter().sum();
        if row.len() != c || (sum - 1.0).abs() > 1e-6 || row.iter().any(|&p| !(0.0..=1.0 + 1e-12).contains(&p)) {
            return Err(Error::InvalidArgument(format!("row {i} is not a probability vector")));
        }
    }
    let marginal: Vec<f64> = (0..c).map(|j| probs.iter().map(|r| r[j]).sum::<f64>() / n as f64).collect();
    let kl: f64 = probs
        .iter()
        .map(|row| {
            row.iter()
                .zip(&marginal)
                .filter(|(&p, _)| p > 0.0)
                .map(|(&p, &m)| p * (p / m).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n as f64;
    Ok(kl.exp())
}

/// Softmax of each logit row.
pub fn softmax_rows(logits: &Tensor) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = logits.to_dtype(DType::F64)?.to_vec2()?;
    Ok(rows
        .into_iter()
        .map(|r| {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|v| (v - m).exp()).collect();
            let s: f64 = e.iter().sum();
            e.into_iter().map(|v| v / s).collect()
        })
        .collect())
}

/// Rows of extractor features for a batch of images in `[-1, 1]`.
pub fn feature_rows(images: &Tensor, extractor: &dyn FeatureExtractor) -> Result<Vec<Vec<f64>>> {
    Ok(extract_features(extractor, images)?.to_dtype(DType::F64)?.to_vec2()?)
}

/// Negates bit `i` of every token.
pub fn flip_bit(grid: &BitGrid, i: usize) -> Result<BitGrid> {
    if i >= grid.bits {
        return Err(Error::OutOfRange {
            what: "bit index",
            value: i as i64,
            range: format!("[0, {})", grid.bits),
        });
    }
    let mut out = grid.clone();
    let k = grid.bits;
    for tok in out.data_mut().chunks_mut(k) {
        tok[i] = -tok[i];
    }
    Ok(out)
}

/// Flips bit `i` everywhere and decodes the result.
pub fn bit_flip_probe<T: Real>(grid: &BitGrid, i: usize, tokenizer: &Autoencoder<T>) -> Result<(BitGrid, Tensor)> {
    let flipped = flip_bit(grid, i)?;
    let images = tokenizer.decode_grid(&flipped)?;
    Ok((flipped, images))
}

/// Number of positions at which two grids differ.
pub fn hamming_distance(a: &BitGrid, b: &BitGrid) -> Result<usize> {
    if (a.batch, a.height, a.width, a.bits) != (b.batch, b.height, b.width, b.bits) {
        return Err(Error::shape(
            "hamming_distance",
            format!("{}x{}x{}x{}", a.batch, a.height, a.width, a.bits),
            format!("{}x{}x{}x{}", b.batch, b.height, b.width, b.bits),
        ));
    }
    Ok(a.data().iter().zip(b.data()).filter(|(x, y)| x != y).count())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMetric {
    Hamming,
    /// Feature-space L2 of the configured extractor (stand-in for LPIPS).
    Perceptual,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// The `k` smallest distances, ascending, ties broken by index.
pub fn rank_neighbors(distances: &[f64], k: usize) -> Result<Vec<Neighbor>> {
    if distances.is_empty() {
        return Err(Error::InvalidArgument("empty neighbor corpus".into()));
    }
    if k > distances.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds corpus size {}", distances.len())));
    }
    let mut all: Vec<Neighbor> = distances.iter().enumerate().map(|(index, &distance)| Neighbor { index, distance }).collect();
    all.sort_by(|a, b| a.distance.total_cmp(&b.distance).then(a.index.cmp(&b.index)));
    all.truncate(k);
    Ok(all)
}

/// Hamming neighbors of a single-sample `query` among single-sample grids.
pub fn hamming_neighbors(query: &BitGrid, corpus: &[BitGrid], k: usize) -> Result<Vec<Neighbor>> {
    let d = corpus.iter().map(|c| hamming_distance(query, c).map(|v| v as f64)).collect::<Result<Vec<_>>>()?;
    rank_neighbors(&d, k)
}

/// Feature-L2 neighbors of `query` among `corpus` feature rows.
pub fn perceptual_neighbors(query: &[f64], corpus: &[Vec<f64>], k: usize) -> Result<Vec<Neighbor>> {
    let d = corpus
        .iter()
        .map(|c| {
            if c.len() != query.len() {
                return Err(Error::shape("perceptual_neighbors", query.len(), c.len()));
            }
            Ok(c.iter().zip(query).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt())
        })
        .collect::<Result<Vec<_>>>()?;
    rank_neighbors(&d, k)
}

/// Something that maps images to reconstructions of the same shape.
pub trait Reconstructor {
    fn reconstruct_images(&self, images: &Tensor) -> Result<Tensor>;
}

impl<T: Real> Reconstructor for Autoencoder<T> {
    fn reconstruct_images(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.reconstruct(&images.to_dtype(T::DTYPE)?)?.recon.detach())
    }
}

/// Returns its input; useful as a perfect-reconstruction reference.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityReconstructor;

impl Reconstructor for IdentityReconstructor {
    fn reconstruct_images(&self, images: &Tensor) -> Result<Tensor> {
        Ok(images.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ReconEval {
    /// Fréchet distance between extractor features of originals and reconstructions.
    pub rfid_proxy: f64,
    pub mse: f64,
    pub count: usize,
}

/// Reconstruction quality over `limit` images spread evenly over `data`, each resized
/// along its shorter edge to `size` and center-cropped.
pub fn reconstruction_eval<T: Real>(
    data: &dyn Dataset,
    limit: usize,
    size: u32,
    batch: usize,
    model: &dyn Reconstructor,
    extractor: &dyn FeatureExtractor,
) -> Result<ReconEval> {
    let picks = spread_indices(data.len(), limit);
    let n = picks.len();
    if n < 2 {
        return Err(Error::InvalidArgument("reconstruction eval needs at least 2 images".into()));
    }
    let mut real = Vec::with_capacity(n);
    let mut fake = Vec::with_capacity(n);
    let mut sq = 0.0;
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let imgs = picks[start..end].iter().map(|&i| data.get(i).map(|(img, _)| resize_center_crop(&img, size))).collect::<Result<Vec<_>>>()?;
        let x = images_to_tensor::<T>(&imgs)?;
        let y = model.reconstruct_images(&x)?;
        sq += (&x - &y)?.sqr()?.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
        real.extend(feature_rows(&x, extractor)?);
        fake.extend(feature_rows(&y, extractor)?);
        start = end;
    }
    let rfid_proxy = frechet_distance(&compute_stats(&real)?, &compute_stats(&fake)?)?;
    Ok(ReconEval {
        rfid_proxy,
        mse: sq / (n as f64 * 3.0 * (size * size) as f64),
        count: n,
    })
}

/// One line of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub metric: String,
    pub value: f64,
    pub extractor: String,
    pub samples: usize,
    pub seed: u64,
}

/// Appends records as JSON lines.
pub fn append_records(path: &Path, records: &[EvalRecord]) -> Result<()> {
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(rows: &[[f64; 2]]) -> FeatureStats {
        compute_stats(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn two_point_stats() {
        let s = stats(&[[0.0, 0.0], [2.0, 0.0]]);
        assert_eq!(s.mean.as_slice(), &[1.0, 0.0]);
        assert_eq!(s.covariance, DMatrix::from_row_slice(2, 2, &[2.0, 0.0, 0.0, 0.0]));
        assert!(compute_stats(&[vec![1.0]]).is_err());
    }

    #[test]
    fn merge_equals_joint() {
        let rows: Vec<Vec<f64>> = (0..9).map(|i| vec![(i * i) as f64 * 0.1, (i as f64).sin()]).collect();
        let joint = compute_stats(&rows).unwrap();
        let merged = compute_stats(&rows[..4]).unwrap().merge(&compute_stats(&rows[4..]).unwrap()).unwrap();
        assert!((joint.mean - merged.mean).amax() < 1e-12);
        assert!((joint.covariance - merged.covariance).amax() < 1e-12);
    }

    #[test]
    fn frechet_closed_forms() {
        let a = FeatureStats {
            mean: DVector::from_vec(vec![0.0, 0.0]),
            covariance: DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, 4.0])),
            count: 10,
        };
        let b = FeatureStats {
            covariance: DMatrix::from_diagonal(&DVector::from_vec(vec![4.0, 1.0])),
            ..a.clone()
        };
        assert!((frechet_distance(&a, &b).unwrap() - 2.0).abs() < 1e-12);
        assert!(frechet_distance(&a, &a).unwrap().abs() < 1e-9);
        let shifted = FeatureStats {
            mean: DVector::from_vec(vec![3.0, -4.0]),
            ..a.clone()
        };
        assert!((frechet_distance(&a, &shifted).unwrap() - 25.0).abs() < 1e-8);
    }

    #[test]
    fn inception_score_cases() {
        let uniform = vec![vec![0.25; 4]; 6];
        assert!((inception_score(&uniform).unwrap() - 1.0).abs() < 1e-12);
        let onehot: Vec<Vec<f64>> = (0..4).map(|i| (0..4).map(|j| if i == j { 1.0 } else { 0.0 }).collect()).collect();
        assert!((inception_score(&onehot).unwrap() - 4.0).abs() < 1e-12);
        // p(y) = (0.5, 0.5); KL of rows: (1,0) -> ln 2, (0,1) -> ln 2, (0.5,0.5) -> 0.
        let small = vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![0.5, 0.5]];
        assert!((inception_score(&small).unwrap() - (2.0 * 2f64.ln() / 3.0).exp()).abs() < 1e-12);
        assert!(inception_score(&[vec![0.5, 0.6]]).is_err());
    }

    #[test]
    fn flips_and_distances() {
        let g = BitGrid::from_indices(1, 2, 2, 4, &[0, 3, 9, 15]).unwrap();
        let f = flip_bit(&g, 2).unwrap();
        assert_eq!(hamming_distance(&g, &f).unwrap(), 4);
        assert_eq!(flip_bit(&f, 2).unwrap(), g);
        assert!(flip_bit(&g, 4).is_err());
        let neg = BitGrid::from_bits(1, 2, 2, 4, g.data().iter().map(|b| -b).collect()).unwrap();
        assert_eq!(hamming_distance(&g, &neg).unwrap(), 16);
    }

    #[test]
    fn neighbor_ranking() {
        let corpus: Vec<BitGrid> = [5u32, 0, 7, 5, 12].iter().map(|&i| BitGrid::from_indices(1, 1, 1, 4, &[i]).unwrap()).collect();
        let q = corpus[0].clone();
        let nn = hamming_neighbors(&q, &corpus, 5).unwrap();
        let order: Vec<usize> = nn.iter().map(|n| n.index).collect();
        // distances from 0101: [0, 2, 1, 0, 3]
        assert_eq!(order, vec![0, 3, 2, 1, 4]);
        assert!(hamming_neighbors(&q, &corpus, 6).is_err());
        let p = perceptual_neighbors(&[0.0, 0.0], &[vec![3.0, 4.0], vec![1.0, 0.0]], 1).unwrap();
        assert_eq!(p[0].index, 1);
    }
}
