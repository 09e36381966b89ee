//! Image datasets, augmentation and batching.

use std::path::{Path, PathBuf};

use candle_core::{Device, Tensor};
use image::imageops::{self, FilterType};
use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Environment variable consulted for relative dataset roots.
pub const DATA_ROOT_ENV: &str = "MASKBIT_DATA_ROOT";

const EXTENSIONS: [&str; 4] = ["png", "jpg", "jpeg", "bmp"];

/// A labeled image collection.
pub trait Dataset {
    fn len(&self) -> usize;
    fn num_classes(&self) -> usize;
    fn get(&self, index: usize) -> Result<(RgbImage, u32)>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// `root/<class>/<image>`; classes are the sorted subdirectory names.
    ImageFolder { root: PathBuf, resolution: usize },
    /// Procedurally drawn colored shapes, one shape/color pair per class.
    Shapes {
        classes: usize,
        per_class: usize,
        resolution: usize,
        seed: u64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Shapes {
            classes: 10,
            per_class: 100,
            resolution: 64,
            seed: 0,
        }
    }
}

impl DatasetSpec {
    pub fn resolution(&self) -> usize {
        match self {
            DatasetSpec::ImageFolder { resolution, .. } | DatasetSpec::Shapes { resolution, .. } => *resolution,
        }
    }

    pub fn open(&self) -> Result<Box<dyn Dataset>> {
        match self {
            DatasetSpec::ImageFolder { root, .. } => Ok(Box::new(ImageFolder::open(&resolve_root(root))?)),
            DatasetSpec::Shapes {
                classes,
                per_class,
                resolution,
                seed,
            } => Ok(Box::new(Shapes::new(*classes, *per_class, *resolution, *seed)?)),
        }
    }
}

/// `n` indices spread evenly over `0..len`, ascending; all of them when `n >= len`.
pub fn spread_indices(len: usize, n: usize) -> Vec<usize> {
    if n >= len {
        return (0..len).collect();
    }
    (0..n).map(|i| i * len / n).collect()
}

/// A view of selected examples of another dataset.
pub struct Subset<'a> {
    inner: &'a dyn Dataset,
    indices: Vec<usize>,
}

impl<'a> Subset<'a> {
    pub fn new(inner: &'a dyn Dataset, indices: Vec<usize>) -> Result<Self> {
        if let Some(&i) = indices.iter().find(|&&i| i >= inner.len()) {
            return Err(Error::OutOfRange {
                what: "subset index",
                value: i as i64,
                range: format!("[0, {})", inner.len()),
            });
        }
        Ok(Self { inner, indices })
    }

    /// `n` examples spread evenly over `inner`.
    pub fn spread(inner: &'a dyn Dataset, n: usize) -> Self {
        Self {
            inner,
            indices: spread_indices(inner.len(), n),
        }
    }
}

impl Dataset for Subset<'_> {
    fn len(&self) -> usize {
        self.indices.len()
    }

    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn get(&self, index: usize) -> Result<(RgbImage, u32)> {
        match self.indices.get(index) {
            Some(&i) => self.inner.get(i),
            None => Err(Error::OutOfRange {
                what: "subset index",
                value: index as i64,
                range: format!("[0, {})", self.indices.len()),
            }),
        }
    }
}

/// Relative roots are resolved against `$MASKBIT_DATA_ROOT` when it is set.
pub fn resolve_root(root: &Path) -> PathBuf {
    match std::env::var_os(DATA_ROOT_ENV) {
        Some(base) if root.is_relative() => PathBuf::from(base).join(root),
        _ => root.to_path_buf(),
    }
}

#[derive(Debug, Clone)]
pub struct ImageFolder {
    classes: Vec<String>,
    items: Vec<(PathBuf, u32)>,
}

impl ImageFolder {
    pub fn open(root: &Path) -> Result<Self> {
        let read = |p: &Path| std::fs::read_dir(p).map_err(|e| Error::io(p, e));
        let mut classes: Vec<String> = read(root)?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .filter_map(|e| e.file_name().into_string().ok())
            .collect();
        classes.sort();
        if classes.is_empty() {
            return Err(Error::InvalidArgument(format!("{} has no class subdirectories", root.display())));
        }
        let mut items = Vec::new();
        for (id, c) in classes.iter().enumerate() {
            let mut files: Vec<PathBuf> = read(&root.join(c))?
                .filter_map(|e| e.ok())
                .map(|e| e.path())
                .filter(|p| {
                    p.extension()
                        .and_then(|x| x.to_str())
                        .is_some_and(|x| EXTENSIONS.contains(&x.to_ascii_lowercase().as_str()))
                })
                .collect();
            files.sort();
            items.extend(files.into_iter().map(|f| (f, id as u32)));
        }
        if items.is_empty() {
            return Err(Error::InvalidArgument(format!("{} contains no images", root.display())));
        }
        Ok(Self { classes, items })
    }

    pub fn class_names(&self) -> &[String] {
        &self.classes
    }
}

impl Dataset for ImageFolder {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn num_classes(&self) -> usize {
        self.classes.len()
    }

    fn get(&self, index: usize) -> Result<(RgbImage, u32)> {
        let (path, class) = &self.items[index];
        let img = image::open(path)?.to_rgb8();
        Ok((img, *class))
    }
}

/// Deterministic synthetic corpus: class `c` draws shape `c % 5` in palette `c / 5`
/// (cycled), with per-image jitter of position, size and background shade.
#[derive(Debug, Clone)]
pub struct Shapes {
    classes: usize,
    per_class: usize,
    resolution: usize,
    seed: u64,
}

const SHAPE_COLORS: [[u8; 3]; 4] = [[230, 60, 50], [60, 120, 235], [240, 210, 60], [70, 200, 110]];

impl Shapes {
    pub fn new(classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Self> {
        if classes == 0 || per_class == 0 || resolution < 16 {
            return Err(Error::InvalidArgument("shapes corpus needs classes, samples and resolution >= 16".into()));
        }
        Ok(Self {
            classes,
            per_class,
            resolution,
            seed,
        })
    }

    /// Draws image `index` of class `class`.
    pub fn draw(&self, class: u32, index: u64) -> RgbImage {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(self.seed ^ (class as u64) << 32 ^ index);
        let n = self.resolution as f64;
        let bg = rng.random_range(20u8..60);
        let color = SHAPE_COLORS[(class as usize / 5) % SHAPE_COLORS.len()];
        let r = n * rng.random_range(0.22..0.3);
        let cx = n / 2.0 + rng.random_range(-0.12..0.12) * n;
        let cy = n / 2.0 + rng.random_range(-0.12..0.12) * n;
        let shape = class % 5;
        RgbImage::from_fn(self.resolution as u32, self.resolution as u32, |x, y| {
            let dx = (x as f64 + 0.5 - cx) / r;
            let dy = (y as f64 + 0.5 - cy) / r;
            let inside = match shape {
                0 => dx * dx + dy * dy <= 1.0,
                1 => dx.abs() <= 0.85 && dy.abs() <= 0.85,
                2 => dy <= 0.8 && dy >= -0.9 && dx.abs() <= (dy + 0.9) * 0.6,
                3 => (dx.abs() <= 0.3 && dy.abs() <= 1.0) || (dy.abs() <= 0.3 && dx.abs() <= 1.0),
                _ => {
                    let d = dx * dx + dy * dy;
                    (0.4..=1.0).contains(&d)
                }
            };
            if inside {
                Rgb(color)
            } else {
                Rgb([bg, bg, bg])
            }
        })
    }
}

impl Dataset for Shapes {
    fn len(&self) -> usize {
        self.classes * self.per_class
    }

    fn num_classes(&self) -> usize {
        self.classes
    }

    fn get(&self, index: usize) -> Result<(RgbImage, u32)> {
        let class = (index / self.per_class) as u32;
        Ok((self.draw(class, (index % self.per_class) as u64), class))
    }
}

/// Which training stage an augmentation serves.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    One,
    Two,
}

/// A crop window and flip decision.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub x: u32,
    pub y: u32,
    pub width: u32,
    pub height: u32,
    pub flip: bool,
}

/// Random crop covering 80-100% of the area; stage one also jitters the aspect ratio in
/// `[0.75, 1.33]` (log-uniform). Flip with probability 0.5.
pub fn sample_crop<R: Rng + ?Sized>(width: u32, height: u32, stage: Stage, rng: &mut R) -> CropParams {
    let area = (width * height) as f64;
    let (w, h) = loop {
        let frac = rng.random_range(0.8..=1.0);
        let aspect = match stage {
            Stage::One => rng.random_range((0.75f64).ln()..=(4.0f64 / 3.0).ln()).exp(),
            Stage::Two => width as f64 / height as f64,
        };
        let w = (area * frac * aspect).sqrt().round() as u32;
        let h = (area * frac / aspect).sqrt().round() as u32;
        if w >= 1 && h >= 1 && w <= width && h <= height {
            break (w, h);
        }
    };
    CropParams {
        x: rng.random_range(0..=width - w),
        y: rng.random_range(0..=height - h),
        width: w,
        height: h,
        flip: rng.random_bool(0.5),
    }
}

/// Crops, resizes to `size x size` and optionally mirrors.
pub fn apply_crop(img: &RgbImage, p: &CropParams, size: u32) -> RgbImage {
    let view = imageops::crop_imm(img, p.x, p.y, p.width, p.height).to_image();
    let mut out = if view.width() == size && view.height() == size {
        view
    } else {
        imageops::resize(&view, size, size, FilterType::Triangle)
    };
    if p.flip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    out
}

/// Training augmentation: random crop, resize to `size`, horizontal flip.
pub fn augment<R: Rng + ?Sized>(img: &RgbImage, stage: Stage, size: u32, rng: &mut R) -> Result<RgbImage> {
    if img.width() < 2 || img.height() < 2 {
        return Err(Error::InvalidArgument(format!("image {}x{} too small to augment", img.width(), img.height())));
    }
    let p = sample_crop(img.width(), img.height(), stage, rng);
    Ok(apply_crop(img, &p, size))
}

/// Resize so the shorter edge equals `size`, then take the central `size x size` crop.
pub fn resize_center_crop(img: &RgbImage, size: u32) -> RgbImage {
    let (w, h) = img.dimensions();
    let scale = size as f64 / w.min(h) as f64;
    let nw = ((w as f64 * scale).round() as u32).max(size);
    let nh = ((h as f64 * scale).round() as u32).max(size);
    let resized = if (nw, nh) == (w, h) {
        img.clone()
    } else {
        imageops::resize(img, nw, nh, FilterType::Triangle)
    };
    imageops::crop_imm(&resized, (nw - size) / 2, (nh - size) / 2, size, size).to_image()
}

/// Stacks images into a `(B, 3, H, W)` tensor scaled to `[-1, 1]`.
pub fn images_to_tensor<T: Real>(images: &[RgbImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("empty image batch".into()))?;
    let (w, h) = first.dimensions();
    let plane = (w * h) as usize;
    let mut data = vec![T::zero(); images.len() * 3 * plane];
    for (b, img) in images.iter().enumerate() {
        if img.dimensions() != (w, h) {
            return Err(Error::shape("image batch", format!("{w}x{h}"), format!("{}x{}", img.width(), img.height())));
        }
        for (i, px) in img.pixels().enumerate() {
            for c in 0..3 {
                data[(b * 3 + c) * plane + i] = T::of(px[c] as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h as usize, w as usize), &Device::Cpu)?)
}

/// Converts a `(B, 3, H, W)` tensor in `[-1, 1]` back to 8-bit images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::shape("tensor_to_images channels", 3, c));
    }
    let v: Vec<f64> = t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..b)
        .map(|n| {
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let i = y as usize * w + x as usize;
                let px = |ch: usize| (((v[(n * 3 + ch) * plane + i] + 1.0) * 127.5).round().clamp(0.0, 255.0)) as u8;
                Rgb([px(0), px(1), px(2)])
            })
        })
        .collect())
}

/// Tiles equally sized images row-major into a grid with `cols` columns.
pub fn image_grid(images: &[RgbImage], cols: usize) -> Result<RgbImage> {
    let first = images.first().ok_or_else(|| Error::InvalidArgument("image_grid needs at least one image".into()))?;
    let (w, h) = first.dimensions();
    if images.iter().any(|i| i.dimensions() != (w, h)) {
        return Err(Error::InvalidArgument("image_grid needs images of one size".into()));
    }
    let cols = cols.clamp(1, images.len());
    let rows = images.len().div_ceil(cols);
    let mut out = RgbImage::new(w * cols as u32, h * rows as u32);
    for (i, img) in images.iter().enumerate() {
        imageops::replace(&mut out, img, ((i % cols) as u32 * w) as i64, ((i / cols) as u32 * h) as i64);
    }
    Ok(out)
}

/// Draws `batch` random examples, augments them and returns `(images, class ids)`.
pub fn sample_batch<T: Real, R: Rng + ?Sized>(
    data: &dyn Dataset,
    batch: usize,
    stage: Option<Stage>,
    size: u32,
    rng: &mut R,
) -> Result<(Tensor, Vec<u32>)> {
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let mut imgs = Vec::with_capacity(batch);
    let mut ids = Vec::with_capacity(batch);
    for _ in 0..batch {
        let (img, c) = data.get(rng.random_range(0..data.len()))?;
        imgs.push(match stage {
            Some(s) => augment(&img, s, size, rng)?,
            None => resize_center_crop(&img, size),
        });
        ids.push(c);
    }
    Ok((images_to_tensor::<T>(&imgs)?, ids))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crop_area_stays_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for stage in [Stage::One, Stage::Two] {
            for _ in 0..10_000 {
                let p = sample_crop(256, 256, stage, &mut rng);
                let frac = (p.width * p.height) as f64 / (256.0 * 256.0);
                assert!((0.79..=1.0).contains(&frac), "{frac}");
                assert!(p.x + p.width <= 256 && p.y + p.height <= 256);
                if stage == Stage::Two {
                    assert_eq!(p.width, p.height);
                }
            }
        }
    }

    #[test]
    fn identity_crop_and_double_flip() {
        let s = Shapes::new(10, 2, 32, 1).unwrap();
        let (img, _) = s.get(3).unwrap();
        let full = CropParams {
            x: 0,
            y: 0,
            width: 32,
            height: 32,
            flip: false,
        };
        assert_eq!(apply_crop(&img, &full, 32), img);
        let flipped = apply_crop(&img, &CropParams { flip: true, ..full }, 32);
        assert_ne!(flipped, img);
        assert_eq!(apply_crop(&flipped, &CropParams { flip: true, ..full }, 32), img);
    }

    #[test]
    fn shapes_are_deterministic_and_distinct() {
        let s = Shapes::new(10, 4, 64, 7).unwrap();
        assert_eq!(s.len(), 40);
        assert_eq!(s.get(5).unwrap(), s.get(5).unwrap());
        assert_eq!(s.get(5).unwrap().1, 1);
        assert_ne!(s.get(0).unwrap().0, s.get(4).unwrap().0);
    }

    #[test]
    fn tensor_round_trip_and_center_crop() {
        let s = Shapes::new(2, 1, 32, 0).unwrap();
        let img = s.get(1).unwrap().0;
        let t = images_to_tensor::<f32>(std::slice::from_ref(&img)).unwrap();
        assert_eq!(t.dims(), &[1, 3, 32, 32]);
        assert_eq!(tensor_to_images(&t).unwrap()[0], img);
        let wide = RgbImage::new(90, 40);
        assert_eq!(resize_center_crop(&wide, 32).dimensions(), (32, 32));
    }

    #[test]
    fn image_folder_lists_classes() {
        let dir = tempfile::tempdir().unwrap();
        for (c, n) in [("b_dogs", 2), ("a_cats", 1)] {
            std::fs::create_dir(dir.path().join(c)).unwrap();
            for i in 0..n {
                RgbImage::new(8, 8).save(dir.path().join(c).join(format!("{i}.png"))).unwrap();
            }
        }
        let f = ImageFolder::open(dir.path()).unwrap();
        assert_eq!(f.class_names(), &["a_cats".to_string(), "b_dogs".to_string()]);
        assert_eq!(f.len(), 3);
        assert_eq!(f.get(0).unwrap().1, 0);
        assert_eq!(f.get(2).unwrap().1, 1);
    }
}
