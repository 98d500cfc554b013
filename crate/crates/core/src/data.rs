//! Dataset ingestion, augmentation and synthetic data.
//!
//! CIFAR binary records are `label, 1024 R, 1024 G, 1024 B` (CIFAR-10, 3073
//! bytes) or `coarse, fine, pixels` (CIFAR-100, 3074 bytes).

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{numel, NamedTensors, Tensor, TensorRecord};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const AUGMENT_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::Cifar10 => CIFAR_PIXELS + 1,
            CifarVariant::Cifar100 => CIFAR_PIXELS + 2,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::Cifar10 => 10,
            CifarVariant::Cifar100 => 100,
        }
    }

    pub fn subdir(self) -> &'static str {
        match self {
            CifarVariant::Cifar10 => "cifar-10-batches-bin",
            CifarVariant::Cifar100 => "cifar-100-binary",
        }
    }

    pub fn train_files(self) -> Vec<String> {
        match self {
            CifarVariant::Cifar10 => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            CifarVariant::Cifar100 => vec!["train.bin".into()],
        }
    }

    pub fn test_files(self) -> Vec<String> {
        match self {
            CifarVariant::Cifar10 => vec!["test_batch.bin".into()],
            CifarVariant::Cifar100 => vec!["test.bin".into()],
        }
    }
}

/// Per-channel statistics used to standardize images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Images `[N, c, h, w]` stored row-major, plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    images: Vec<f64>,
    image_shape: [usize; 3],
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(
        images: Vec<f64>,
        image_shape: [usize; 3],
        labels: Vec<usize>,
        num_classes: usize,
        split: Split,
    ) -> Result<Self> {
        let per = numel(&image_shape);
        if labels.is_empty() || per == 0 {
            return Err(Error::invalid("dataset", "no samples"));
        }
        if images.len() != per * labels.len() {
            return Err(Error::invalid(
                "dataset",
                format!("{} values for {} images of {image_shape:?}", images.len(), labels.len()),
            ));
        }
        if num_classes < 2 {
            return Err(Error::invalid("dataset", "need at least 2 classes"));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::invalid("dataset", format!("label {y} >= {num_classes}")));
        }
        Ok(Self {
            images,
            image_shape,
            labels,
            num_classes,
            split,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f64] {
        &self.images
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    fn image_len(&self) -> usize {
        numel(&self.image_shape)
    }

    pub fn image(&self, index: usize) -> &[f64] {
        let n = self.image_len();
        &self.images[index * n..(index + 1) * n]
    }

    /// Per-channel mean and population standard deviation.
    pub fn channel_stats(&self) -> Normalization {
        let [c, h, w] = self.image_shape;
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut sq = vec![0.0; c];
        for img in self.images.chunks(c * plane) {
            for ch in 0..c {
                for &v in &img[ch * plane..(ch + 1) * plane] {
                    mean[ch] += v;
                    sq[ch] += v * v;
                }
            }
        }
        let count = (self.len() * plane) as f64;
        let std = mean
            .iter_mut()
            .zip(&sq)
            .map(|(m, s)| {
                *m /= count;
                (s / count - *m * *m).max(0.0).sqrt().max(1e-12)
            })
            .collect();
        Normalization { mean, std }
    }

    /// Standardizes in place and records the statistics. Fails if already
    /// normalized or the channel count differs.
    pub fn normalize(&mut self, stats: &Normalization) -> Result<()> {
        let c = self.image_shape[0];
        if self.normalization.is_some() {
            return Err(Error::invalid("normalize", "dataset is already normalized"));
        }
        if stats.mean.len() != c || stats.std.len() != c || stats.std.iter().any(|&s| !(s > 0.0)) {
            return Err(Error::invalid("normalize", "statistics do not match the channels"));
        }
        let plane = self.image_shape[1] * self.image_shape[2];
        for img in self.images.chunks_mut(c * plane) {
            for ch in 0..c {
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = (*v - stats.mean[ch]) / stats.std[ch];
                }
            }
        }
        self.normalization = Some(stats.clone());
        Ok(())
    }

    /// Images in their pre-normalization range.
    pub fn denormalized_images(&self) -> Vec<f64> {
        let Some(stats) = &self.normalization else {
            return self.images.clone();
        };
        let c = self.image_shape[0];
        let plane = self.image_shape[1] * self.image_shape[2];
        let mut out = self.images.clone();
        for img in out.chunks_mut(c * plane) {
            for ch in 0..c {
                for v in &mut img[ch * plane..(ch + 1) * plane] {
                    *v = *v * stats.std[ch] + stats.mean[ch];
                }
            }
        }
        out
    }

    /// Stacks the selected samples into `[B, c, h, w]`.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let n = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(Error::invalid("dataset.batch", format!("index {i} out of range")));
            }
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i]);
        }
        let [c, h, w] = self.image_shape;
        Ok((Tensor::new(&[indices.len(), c, h, w], data)?, labels))
    }

    /// First `n` samples (all of them if `n >= len`).
    pub fn take(&self, n: usize) -> Self {
        let n = n.min(self.len()).max(1);
        let per = self.image_len();
        Self {
            images: self.images[..n * per].to_vec(),
            labels: self.labels[..n].to_vec(),
            ..self.clone()
        }
    }

    pub fn to_container(&self) -> NamedTensors {
        let [c, h, w] = self.image_shape;
        let mut out = NamedTensors::new();
        out.insert(
            "images",
            TensorRecord {
                shape: vec![self.len(), c, h, w],
                values: self.images.clone(),
            },
        );
        out.insert(
            "labels",
            TensorRecord {
                shape: vec![self.len()],
                values: self.labels.iter().map(|&y| y as f64).collect(),
            },
        );
        let split = match self.split {
            Split::Train => 0.0,
            Split::Test => 1.0,
        };
        out.insert(
            "meta",
            TensorRecord {
                shape: vec![2],
                values: vec![self.num_classes as f64, split],
            },
        );
        if let Some(norm) = &self.normalization {
            out.insert("norm.mean", TensorRecord { shape: vec![c], values: norm.mean.clone() });
            out.insert("norm.std", TensorRecord { shape: vec![c], values: norm.std.clone() });
        }
        out
    }

    pub fn from_container(c: &NamedTensors) -> Result<Self> {
        let bad = |msg: &str| Error::format("dataset container", msg.to_owned());
        let images = c.require("images")?;
        let labels = c.require("labels")?;
        let meta = c.require("meta")?;
        let &[n, ch, h, w] = images.shape.as_slice() else {
            return Err(bad("images must be rank 4"));
        };
        if labels.shape != [n] || meta.shape != [2] {
            return Err(bad("labels/meta shape mismatch"));
        }
        let as_index = |v: f64| {
            (v >= 0.0 && v.fract() == 0.0 && v < u32::MAX as f64)
                .then_some(v as usize)
                .ok_or_else(|| bad("expected a non-negative integer"))
        };
        let labels = labels.values.iter().map(|&v| as_index(v)).collect::<Result<Vec<_>>>()?;
        let split = match meta.values[1] {
            0.0 => Split::Train,
            1.0 => Split::Test,
            _ => return Err(bad("unknown split")),
        };
        let mut ds = Dataset::new(
            images.values.clone(),
            [ch, h, w],
            labels,
            as_index(meta.values[0])?,
            split,
        )?;
        match (c.get("norm.mean"), c.get("norm.std")) {
            (Some(m), Some(s)) if m.shape == [ch] && s.shape == [ch] => {
                ds.normalization = Some(Normalization {
                    mean: m.values.clone(),
                    std: s.values.clone(),
                });
            }
            (None, None) => {}
            _ => return Err(bad("incomplete normalization record")),
        }
        Ok(ds)
    }
}

/// Decodes a buffer of CIFAR records into `[0, 1]` pixels and labels.
pub fn decode_cifar(bytes: &[u8], variant: CifarVariant) -> Result<(Vec<f64>, Vec<usize>)> {
    let rec = variant.record_len();
    if bytes.is_empty() || !bytes.len().is_multiple_of(rec) {
        return Err(Error::format(
            "cifar file",
            format!("{} bytes is not a positive multiple of the {rec}-byte record", bytes.len()),
        ));
    }
    let label_at = rec - CIFAR_PIXELS - 1;
    let classes = variant.num_classes();
    let n = bytes.len() / rec;
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        let y = r[label_at] as usize;
        if y >= classes {
            return Err(Error::format("cifar file", format!("record {i}: label {y} >= {classes}")));
        }
        labels.push(y);
        pixels.extend(r[rec - CIFAR_PIXELS..].iter().map(|&b| b as f64 / 255.0));
    }
    Ok((pixels, labels))
}

/// Encodes records in the CIFAR binary layout. CIFAR-100 records get a
/// coarse label of 0.
pub fn encode_cifar(pixels: &[[u8; CIFAR_PIXELS]], labels: &[u8], variant: CifarVariant) -> Vec<u8> {
    let mut out = Vec::with_capacity(pixels.len() * variant.record_len());
    for (p, &y) in pixels.iter().zip(labels) {
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(y);
        out.extend_from_slice(p);
    }
    out
}

fn resolve_files(dir: &Path, variant: CifarVariant, names: &[String]) -> Result<Vec<PathBuf>> {
    for base in [dir.to_path_buf(), dir.join(variant.subdir())] {
        let paths: Vec<PathBuf> = names.iter().map(|n| base.join(n)).collect();
        if paths.iter().all(|p| p.is_file()) {
            return Ok(paths);
        }
    }
    let missing: Vec<&str> = names
        .iter()
        .filter(|n| !dir.join(n).is_file())
        .map(String::as_str)
        .collect();
    Err(Error::format(
        "cifar directory",
        format!(
            "{} is missing {} (expects {}; also looked in {})",
            dir.display(),
            missing.join(", "),
            names.join(", "),
            variant.subdir()
        ),
    ))
}

fn load_split(dir: &Path, variant: CifarVariant, split: Split) -> Result<Dataset> {
    let names = match split {
        Split::Train => variant.train_files(),
        Split::Test => variant.test_files(),
    };
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for path in resolve_files(dir, variant, &names)? {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let (p, l) = decode_cifar(&bytes, variant).map_err(|e| match e {
            Error::Format { what, msg } => Error::Format {
                what,
                msg: format!("{}: {msg}", path.display()),
            },
            other => other,
        })?;
        pixels.extend(p);
        labels.extend(l);
    }
    Dataset::new(pixels, [3, CIFAR_SIDE, CIFAR_SIDE], labels, variant.num_classes(), split)
}

/// Loads both splits and normalizes them with the training statistics.
pub fn load_cifar(dir: &Path, variant: CifarVariant) -> Result<(Dataset, Dataset)> {
    let mut train = load_split(dir, variant, Split::Train)?;
    let mut test = load_split(dir, variant, Split::Test)?;
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}

/// Class-conditional Gaussian-blob images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train_per_class: usize,
    #[serde(default = "default_test_per_class")]
    pub test_per_class: usize,
    #[serde(default = "default_image")]
    pub image: [usize; 3],
    /// Blob amplitude relative to unit pixel noise.
    pub margin: f64,
    /// Blobs per class prototype.
    #[serde(default = "default_blobs")]
    pub blobs: usize,
    /// Maximum random shift of the blob pattern in pixels.
    #[serde(default)]
    pub jitter: usize,
    pub seed: u64,
}

fn default_test_per_class() -> usize {
    100
}

fn default_image() -> [usize; 3] {
    [3, 8, 8]
}

fn default_blobs() -> usize {
    2
}

impl SyntheticSpec {
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.classes < 2 {
            out.push(format!("synthetic.classes must be >= 2, got {}", self.classes));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            out.push("synthetic per-class counts must be positive".into());
        }
        if self.image.contains(&0) {
            out.push(format!("synthetic.image has a zero extent: {:?}", self.image));
        }
        if !(self.margin >= 0.0) || !self.margin.is_finite() {
            out.push(format!("synthetic.margin must be finite and >= 0, got {}", self.margin));
        }
        if self.blobs == 0 {
            out.push("synthetic.blobs must be positive".into());
        }
        out
    }
}

struct Blob {
    channel: usize,
    y: f64,
    x: f64,
    sign: f64,
}

fn render(blobs: &[Blob], image: [usize; 3], amp: f64, dy: f64, dx: f64, out: &mut [f64]) {
    let [_, h, w] = image;
    let sigma2 = 2.0 * (h.min(w) as f64 / 6.0).max(0.5).powi(2);
    for b in blobs {
        let plane = &mut out[b.channel * h * w..(b.channel + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                let d2 = (i as f64 - b.y - dy).powi(2) + (j as f64 - b.x - dx).powi(2);
                plane[i * w + j] += amp * b.sign * (-d2 / sigma2).exp();
            }
        }
    }
}

/// Train and test splits drawn from one seeded generator; labels cycle
/// through the classes so both splits are balanced.
pub fn synthetic_dataset(spec: &SyntheticSpec) -> Result<(Dataset, Dataset)> {
    let problems = spec.problems();
    if !problems.is_empty() {
        return Err(Error::Config(problems));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let [c, h, w] = spec.image;
    let prototypes: Vec<Vec<Blob>> = (0..spec.classes)
        .map(|_| {
            (0..spec.blobs)
                .map(|_| Blob {
                    channel: rng.gen_range(0..c),
                    y: rng.gen_range(0.0..h as f64),
                    x: rng.gen_range(0.0..w as f64),
                    sign: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, 1.0).expect("unit normal");
    let per = c * h * w;
    let mut make = |count: usize, split: Split| {
        let n = count * spec.classes;
        let mut images = vec![0.0; n * per];
        let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
        for (img, &y) in images.chunks_mut(per).zip(&labels) {
            let j = spec.jitter as f64;
            let (dy, dx) = if spec.jitter > 0 {
                (rng.gen_range(-j..=j), rng.gen_range(-j..=j))
            } else {
                (0.0, 0.0)
            };
            render(&prototypes[y], spec.image, spec.margin, dy, dx, img);
            for v in img.iter_mut() {
                *v += noise.sample(&mut rng);
            }
        }
        Dataset::new(images, spec.image, labels, spec.classes, split)
    };
    let mut train = make(spec.train_per_class, Split::Train)?;
    let mut test = make(spec.test_per_class, Split::Test)?;
    let stats = train.channel_stats();
    train.normalize(&stats)?;
    test.normalize(&stats)?;
    Ok((train, test))
}

/// Shuffled index batches covering every sample once. A trailing batch of
/// one sample is merged into the previous batch, since train-mode batch
/// norm needs at least two.
pub fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    chunk(order, batch_size)
}

/// In-order batches, for evaluation.
pub fn sequential_batches(n: usize, batch_size: usize) -> Vec<Vec<usize>> {
    chunk((0..n).collect(), batch_size)
}

fn chunk(order: Vec<usize>, batch_size: usize) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        let tail = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").extend(tail);
    }
    out
}

/// Per-sample crop offsets (into the padded image) and flip flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentPlan {
    pub offsets: Vec<(usize, usize)>,
    pub flips: Vec<bool>,
}

impl AugmentPlan {
    pub fn draw<R: Rng>(batch: usize, rng: &mut R) -> Self {
        let mut offsets = Vec::with_capacity(batch);
        let mut flips = Vec::with_capacity(batch);
        for _ in 0..batch {
            offsets.push((rng.gen_range(0..=2 * AUGMENT_PAD), rng.gen_range(0..=2 * AUGMENT_PAD)));
            flips.push(rng.gen_bool(0.5));
        }
        Self { offsets, flips }
    }

    /// Zero-pads by [`AUGMENT_PAD`], crops back to the original size at the
    /// planned offset and optionally mirrors horizontally.
    pub fn apply(&self, batch: &Tensor) -> Result<Tensor> {
        let &[b, c, h, w] = batch.shape() else {
            return Err(Error::invalid("augment", format!("expected [B, c, h, w], got {:?}", batch.shape())));
        };
        if self.offsets.len() != b || self.flips.len() != b {
            return Err(Error::invalid("augment", "plan does not match the batch size"));
        }
        if self.offsets.iter().any(|&(y, x)| y > 2 * AUGMENT_PAD || x > 2 * AUGMENT_PAD) {
            return Err(Error::invalid("augment", "crop offset outside the padded image"));
        }
        let src = batch.values();
        let mut out = vec![0.0; src.len()];
        let pad = AUGMENT_PAD as isize;
        for n in 0..b {
            let (oy, ox) = self.offsets[n];
            for ch in 0..c {
                let base = (n * c + ch) * h * w;
                for i in 0..h {
                    let sy = i as isize + oy as isize - pad;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for j in 0..w {
                        let tj = if self.flips[n] { w - 1 - j } else { j };
                        let sx = tj as isize + ox as isize - pad;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        out[base + i * w + j] = src[base + sy as usize * w + sx as usize];
                    }
                }
            }
        }
        Tensor::new(batch.shape(), out)
    }
}

/// Random crop plus horizontal flip with a fresh plan from `rng`.
pub fn augment<R: Rng>(batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    let plan = AugmentPlan::draw(batch.shape().first().copied().unwrap_or(0), rng);
    plan.apply(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            classes: 2,
            train_per_class: 10,
            test_per_class: 5,
            image: [2, 6, 6],
            margin: 3.0,
            blobs: 2,
            jitter: 1,
            seed: 9,
        }
    }

    #[test]
    fn synthetic_is_balanced_and_deterministic() {
        let (a, t) = synthetic_dataset(&spec()).unwrap();
        assert_eq!(a.len(), 20);
        assert_eq!(t.len(), 10);
        assert_eq!(a.labels().iter().filter(|&&y| y == 1).count(), 10);
        let (b, _) = synthetic_dataset(&spec()).unwrap();
        assert_eq!(a, b);
        let mut other = spec();
        other.seed = 10;
        assert_ne!(synthetic_dataset(&other).unwrap().0, a);
        assert!(synthetic_dataset(&SyntheticSpec { classes: 1, ..spec() }).is_err());
    }

    #[test]
    fn normalization_is_invertible() {
        let (a, _) = synthetic_dataset(&spec()).unwrap();
        let stats = a.channel_stats();
        for (m, s) in stats.mean.iter().zip(&stats.std) {
            assert!(m.abs() < 1e-12);
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut raw = Dataset::new(a.denormalized_images(), a.image_shape(), a.labels().to_vec(), 2, Split::Train).unwrap();
        let before = raw.images().to_vec();
        raw.normalize(a.normalization().unwrap()).unwrap();
        for (x, y) in raw.images().iter().zip(a.images()) {
            assert!((x - y).abs() < 1e-12);
        }
        let back = raw.denormalized_images();
        for (x, y) in back.iter().zip(&before) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn batches_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for n in [1, 2, 5, 9, 10, 11] {
            let batches = epoch_batches(n, 5, &mut rng);
            let mut seen: Vec<usize> = batches.concat();
            seen.sort_unstable();
            assert_eq!(seen, (0..n).collect::<Vec<_>>());
            if n > 1 {
                assert!(batches.iter().all(|b| b.len() >= 2));
            }
        }
        assert_eq!(sequential_batches(11, 5), vec![vec![0, 1, 2, 3, 4], vec![5, 6, 7, 8, 9, 10]]);
    }

    #[test]
    fn augment_identity_cases() {
        let x = Tensor::new(&[2, 1, 3, 3], (0..18).map(f64::from).collect()).unwrap();
        let centered = AugmentPlan {
            offsets: vec![(4, 4); 2],
            flips: vec![false; 2],
        };
        assert_eq!(centered.apply(&x).unwrap().values(), x.values());
        let flip = AugmentPlan {
            offsets: vec![(4, 4); 2],
            flips: vec![true; 2],
        };
        let once = flip.apply(&x).unwrap();
        assert_eq!(&once.values()[..3], &[2.0, 1.0, 0.0]);
        assert_eq!(flip.apply(&once).unwrap().values(), x.values());
    }

    #[test]
    fn augment_shift_pads_with_zeros() {
        let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let plan = AugmentPlan {
            offsets: vec![(5, 3)],
            flips: vec![false],
        };
        assert_eq!(plan.apply(&x).unwrap().values(), &[0.0, 3.0, 0.0, 0.0]);
    }

    #[test]
    fn augment_is_deterministic_per_seed() {
        let x = Tensor::new(&[3, 1, 4, 4], (0..48).map(f64::from).collect()).unwrap();
        let a = augment(&x, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = augment(&x, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.values(), b.values());
    }

    #[test]
    fn cifar_decode_rejects_bad_sizes_and_labels() {
        assert!(decode_cifar(&[0u8; 3072], CifarVariant::Cifar10).is_err());
        assert!(decode_cifar(&[], CifarVariant::Cifar10).is_err());
        let mut rec = vec![10u8];
        rec.extend(std::iter::repeat_n(0, CIFAR_PIXELS));
        assert!(decode_cifar(&rec, CifarVariant::Cifar10).is_err());
        rec[0] = 3;
        let (p, l) = decode_cifar(&rec, CifarVariant::Cifar10).unwrap();
        assert_eq!(l, vec![3]);
        assert_eq!(p.len(), CIFAR_PIXELS);
    }

    #[test]
    fn container_round_trip() {
        let (a, _) = synthetic_dataset(&spec()).unwrap();
        let back = Dataset::from_container(&NamedTensors::decode(&a.to_container().encode()).unwrap()).unwrap();
        assert_eq!(back, a);
    }
}
