//! Image-classification datasets: IDX parsing and a synthetic generator.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Images in `[0, 1]` with class labels and a train/validation split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `[n, c, h, w]`.
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    /// All examples in the training split, none in validation.
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.ndim() != 4 || images.shape()[0] != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} labels for image tensor {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::LabelOutOfRange { label: bad, classes: num_classes });
        }
        let n = labels.len();
        Ok(Self {
            images,
            labels,
            num_classes,
            train: (0..n).collect(),
            val: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `[c, h, w]` of one image.
    pub fn image_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, idx: &[usize]) -> (Tensor<f32>, Vec<usize>) {
        (
            self.images.gather_rows(idx),
            idx.iter().map(|&i| self.labels[i]).collect(),
        )
    }
}

/// Class-conditional image content.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Pattern {
    /// One Gaussian blob at a class-specific position.
    Blobs,
    /// Blobs at the positions of classes `k` and `k + 1 (mod classes)`: every
    /// single blob is shared by two classes, only the pair identifies one.
    BlobPairs,
    /// A sinusoidal grating at orientation `k·π/classes` with random phase.
    Gratings,
    /// One of `prototypes` random three-blob templates per class.
    Mixture,
}

/// Parameters of the synthetic image generator.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(deny_unknown_fields))]
pub struct SynthConfig {
    pub n: usize,
    pub size: usize,
    pub classes: usize,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise: f64,
    /// Peak of one class-independent blob at a random position (0 disables).
    pub distractor: f64,
    /// Maximum per-example shift of each class blob, in pixels.
    pub jitter: usize,
    pub pattern: Pattern,
    /// Templates per class for [`Pattern::Mixture`].
    pub prototypes: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(n: usize, size: usize, classes: usize, noise: f64, seed: u64) -> Self {
        Self {
            n,
            size,
            classes,
            noise,
            distractor: 0.0,
            jitter: 0,
            pattern: Pattern::Blobs,
            prototypes: 1,
            seed,
        }
    }
}

/// Blob centre of class `k` out of `classes`, on a circle around the image centre.
fn class_centre(k: usize, classes: usize, size: usize) -> (f64, f64) {
    let c = (size as f64 - 1.0) / 2.0;
    let radius = size as f64 / 4.0;
    let angle = core::f64::consts::TAU * k as f64 / classes as f64;
    (c + radius * Float::sin(angle), c + radius * Float::cos(angle))
}

fn blob(size: usize, cy: f64, cx: f64, sigma: f64, peak: f64, out: &mut [f32]) {
    for y in 0..size {
        for x in 0..size {
            let d2 = (y as f64 - cy) * (y as f64 - cy) + (x as f64 - cx) * (x as f64 - cx);
            out[y * size + x] += (peak * Float::exp(-d2 / (2.0 * sigma * sigma))) as f32;
        }
    }
}

/// Noise-free pattern of class `k`.
pub fn class_template(k: usize, classes: usize, size: usize) -> Vec<f32> {
    let mut img = vec![0.0f32; size * size];
    let (cy, cx) = class_centre(k, classes, size);
    blob(size, cy, cx, size as f64 / 8.0, 1.0, &mut img);
    img
}

const GRATING_PERIOD: f64 = 4.0;

fn grating(size: usize, angle: f64, phase: f64, out: &mut [f32]) {
    let (s, c) = (Float::sin(angle), Float::cos(angle));
    let w = core::f64::consts::TAU / GRATING_PERIOD;
    for y in 0..size {
        for x in 0..size {
            let u = x as f64 * c + y as f64 * s;
            out[y * size + x] += (0.5 + 0.5 * Float::sin(w * u + phase)) as f32;
        }
    }
}

/// Deterministic single-channel images: Gaussian blobs at class-specific
/// positions, plus optional jitter, distractor and pixel noise,
/// clipped to `[0, 1]`. Labels cycle through the classes.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    if cfg.classes < 2 || cfg.n < cfg.classes || cfg.size < 4 || !(cfg.noise >= 0.0) {
        return Err(Error::InvalidDataset(format!(
            "synthetic data needs classes >= 2, n >= classes, size >= 4 (got n={}, size={}, k={})",
            cfg.n, cfg.size, cfg.classes
        )));
    }
    if cfg.pattern == Pattern::BlobPairs && cfg.classes < 3 {
        return Err(Error::InvalidDataset("blob pairs need at least 3 classes".into()));
    }
    if cfg.pattern == Pattern::Mixture && cfg.prototypes == 0 {
        return Err(Error::InvalidDataset("mixture needs at least one prototype".into()));
    }
    let mut rng = rng::rng_from_seed(cfg.seed);
    let px = cfg.size * cfg.size;
    let sigma = cfg.size as f64 / 8.0;
    let mut protos: Vec<[(f64, f64); 3]> = Vec::new();
    if cfg.pattern == Pattern::Mixture {
        let span = 0.15 * cfg.size as f64..0.85 * cfg.size as f64;
        for _ in 0..cfg.classes * cfg.prototypes {
            protos.push(core::array::from_fn(|_| (rng.gen_range(span.clone()), rng.gen_range(span.clone()))));
        }
    }
    let mut data = vec![0.0f32; cfg.n * px];
    let mut labels = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let k = i % cfg.classes;
        labels.push(k);
        let img = &mut data[i * px..(i + 1) * px];
        let blobs = match cfg.pattern {
            Pattern::Blobs => 1,
            Pattern::BlobPairs => 2,
            Pattern::Gratings | Pattern::Mixture => 0,
        };
        for b in 0..blobs {
            let (mut cy, mut cx) = class_centre((k + b) % cfg.classes, cfg.classes, cfg.size);
            if cfg.jitter > 0 {
                let j = cfg.jitter as i64;
                cy += rng.gen_range(-j..=j) as f64;
                cx += rng.gen_range(-j..=j) as f64;
            }
            blob(cfg.size, cy, cx, sigma, 1.0, img);
        }
        if cfg.pattern == Pattern::Gratings {
            let angle = core::f64::consts::PI * k as f64 / cfg.classes as f64;
            grating(cfg.size, angle, rng.gen_range(0.0..core::f64::consts::TAU), img);
        }
        if cfg.pattern == Pattern::Mixture {
            let p = &protos[k * cfg.prototypes + rng.gen_range(0..cfg.prototypes)];
            let j = cfg.jitter as i64;
            let (sy, sx) = if j > 0 { (rng.gen_range(-j..=j) as f64, rng.gen_range(-j..=j) as f64) } else { (0.0, 0.0) };
            for &(cy, cx) in p {
                blob(cfg.size, cy + sy, cx + sx, sigma * 0.75, 1.0, img);
            }
        }
        if cfg.distractor > 0.0 {
            let dy = rng.gen_range(0.0..cfg.size as f64);
            let dx = rng.gen_range(0.0..cfg.size as f64);
            blob(cfg.size, dy, dx, sigma, cfg.distractor, img);
        }
        for v in img.iter_mut() {
            let noisy = *v as f64 + cfg.noise * rng::standard_normal(&mut rng);
            *v = noisy.clamp(0.0, 1.0) as f32;
        }
    }
    let images = Tensor::new(vec![cfg.n, 1, cfg.size, cfg.size], data)?;
    Dataset::new(images, labels, cfg.classes)
}

/// [`synth_dataset`] with Gaussian pixel noise only.
pub fn synth_blobs(n: usize, size: usize, k: usize, noise: f64, seed: u64) -> Result<Dataset> {
    synth_dataset(&SynthConfig::new(n, size, k, noise, seed))
}

/// Moves exactly `per_class` examples of every class into the validation
/// split, chosen by a seeded shuffle; the rest form the training split.
pub fn split_per_class(dataset: &Dataset, per_class: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng::rng_from_seed(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut val = Vec::new();
    for (k, members) in by_class.iter_mut().enumerate() {
        if members.len() < per_class {
            return Err(Error::InvalidDataset(format!(
                "class {k} has {} examples, fewer than {per_class}",
                members.len()
            )));
        }
        rng::shuffle(members, &mut rng);
        val.extend_from_slice(&members[..per_class]);
    }
    val.sort_unstable();
    let mut in_val = vec![false; dataset.len()];
    for &i in &val {
        in_val[i] = true;
    }
    let mut out = dataset.clone();
    out.train = (0..dataset.len()).filter(|&i| !in_val[i]).collect();
    out.val = val;
    Ok(out)
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Idx("truncated header".into()))
}

/// Parses IDX image (`0x00000803`) and label (`0x00000801`) files. Pixel
/// bytes are scaled by 1/255; the class count is the largest label plus one
/// (at least two).
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Idx(format!("bad image magic {magic:#010x}")));
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Idx(format!("bad label magic {magic:#010x}")));
    }
    let n = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n != n_labels {
        return Err(Error::Idx(format!("{n} images but {n_labels} labels")));
    }
    let px = rows * cols;
    let pixels = images
        .get(16..16 + n * px)
        .ok_or_else(|| Error::Idx("truncated image data".into()))?;
    let label_bytes = labels
        .get(8..8 + n)
        .ok_or_else(|| Error::Idx("truncated label data".into()))?;
    if n == 0 || px == 0 {
        return Err(Error::Idx("empty dataset".into()));
    }
    let data = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = label_bytes.iter().map(|&b| b as usize).collect();
    let classes = labels.iter().copied().max().unwrap_or(0).max(1) + 1;
    Dataset::new(Tensor::new(vec![n, 1, rows, cols], data)?, labels, classes)
}

/// Encodes `[n, 1, h, w]` images in `[0, 1]` as an IDX image file.
pub fn encode_idx_images(images: &Tensor<f32>) -> Vec<u8> {
    let s = images.shape();
    let mut out = Vec::with_capacity(16 + images.numel());
    for v in [IDX_IMAGES_MAGIC, s[0] as u32, s[2] as u32, s[3] as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend(images.data().iter().map(|&v| Float::round(v.clamp(0.0, 1.0) * 255.0) as u8));
    out
}

pub fn encode_idx_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend(labels.iter().map(|&l| l as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx_pair(n: u32, rows: u32, cols: u32, px: &[u8], labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let mut im = Vec::new();
        for v in [IDX_IMAGES_MAGIC, n, rows, cols] {
            im.extend_from_slice(&v.to_be_bytes());
        }
        im.extend_from_slice(px);
        let mut lb = Vec::new();
        lb.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        lb.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        lb.extend_from_slice(labels);
        (im, lb)
    }

    #[test]
    fn idx_scaling() {
        let (im, lb) = idx_pair(1, 2, 2, &[0, 255, 0, 255], &[1]);
        let ds = parse_idx(&im, &lb).unwrap();
        assert_eq!(ds.images.shape(), &[1, 1, 2, 2]);
        assert_eq!(ds.images.data(), &[0.0, 1.0, 0.0, 1.0]);
        assert_eq!(ds.labels, vec![1]);
    }

    #[test]
    fn idx_errors() {
        let (im, lb) = idx_pair(2, 2, 2, &[0; 8], &[0]);
        assert!(matches!(parse_idx(&im, &lb), Err(Error::Idx(_))));
        let (im, lb) = idx_pair(1, 2, 2, &[0; 3], &[0]);
        assert!(parse_idx(&im, &lb).is_err(), "truncated");
        let (mut im, lb) = idx_pair(1, 2, 2, &[0; 4], &[0]);
        im[3] = 0x01;
        assert!(parse_idx(&im, &lb).is_err(), "bad magic");
    }

    #[test]
    fn synth_is_deterministic_and_bounded() {
        let a = synth_blobs(40, 8, 4, 0.3, 5).unwrap();
        let b = synth_blobs(40, 8, 4, 0.3, 5).unwrap();
        assert_eq!(a, b);
        assert!(a.images.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(synth_blobs(3, 8, 4, 0.0, 1).is_err());
        assert!(synth_blobs(8, 3, 4, 0.0, 1).is_err());
    }

    #[test]
    fn noiseless_nearest_template_is_perfect() {
        let (size, k) = (12, 4);
        let ds = synth_blobs(64, size, k, 0.0, 2).unwrap();
        let templates: Vec<Vec<f32>> = (0..k).map(|c| class_template(c, k, size)).collect();
        let px = size * size;
        for i in 0..ds.len() {
            let img = &ds.images.data()[i * px..(i + 1) * px];
            let best = (0..k)
                .min_by(|&a, &b| {
                    let da: f32 = img.iter().zip(&templates[a]).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f32 = img.iter().zip(&templates[b]).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(best, ds.labels[i]);
        }
    }

    #[test]
    fn split_counts_and_partition() {
        let ds = synth_blobs(40, 8, 4, 0.1, 1).unwrap();
        let s = split_per_class(&ds, 5, 9).unwrap();
        assert_eq!(s.val.len(), 20);
        for k in 0..4 {
            assert_eq!(s.val.iter().filter(|&&i| s.labels[i] == k).count(), 5);
        }
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..40).collect::<Vec<_>>());
        assert!(s.train.iter().all(|i| !s.val.contains(i)));
        assert_eq!(s, split_per_class(&ds, 5, 9).unwrap());

        let empty = split_per_class(&ds, 0, 9).unwrap();
        assert!(empty.val.is_empty());
        assert_eq!(empty.train.len(), 40);
        assert!(split_per_class(&ds, 11, 9).is_err());
    }

    #[test]
    fn idx_encode_roundtrip() {
        let ds = synth_blobs(6, 5, 2, 0.0, 3).unwrap();
        let back = parse_idx(&encode_idx_images(&ds.images), &encode_idx_labels(&ds.labels)).unwrap();
        assert_eq!(back.labels, ds.labels);
        assert!(back.images.max_abs_diff(&ds.images) <= 0.5 / 255.0 + 1e-7);
    }
}
