//! Datasets: the CIFAR-10 binary format, synthetic desk-scale tasks and
//! train-time augmentation.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{KmError, Result};
use crate::rng;
use crate::tensor::Tensor;

pub const CIFAR10_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR10_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];
pub const CIFAR10_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR10_CLASSES: usize = 10;
const CIFAR10_RECORDS_PER_FILE: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
    pub name: String,
}

impl DatasetSplit {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize, name: impl Into<String>) -> Result<Self> {
        let name = name.into();
        if images.rank() != 4 {
            return Err(KmError::dim(
                "dataset",
                format!("{name}: images must be [N, C, H, W], got {:?}", images.shape()),
            ));
        }
        if images.shape()[0] != labels.len() {
            return Err(KmError::dim(
                "dataset",
                format!("{name}: {} images but {} labels", images.shape()[0], labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(KmError::Contract(format!(
                "{name}: label {bad} outside [0, {class_count})"
            )));
        }
        Ok(DatasetSplit {
            images,
            labels,
            class_count,
            name,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(C, H, W)` of one sample.
    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.class_count];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }

    /// Gather samples by index into a batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let [c, h, w] = self.sample_shape();
        let per = c * h * w;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (
            Tensor::new([indices.len(), c, h, w], data).expect("batch shape"),
            labels,
        )
    }

    /// Keep the listed samples, in the given order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Result<Self> {
        if indices.is_empty() {
            return Err(KmError::Contract("empty selection".into()));
        }
        let (images, labels) = self.batch(indices);
        DatasetSplit::new(images, labels, self.class_count, name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn files(self) -> Vec<String> {
        match self {
            Split::Train => (1..=5).map(|i| format!("data_batch_{i}.bin")).collect(),
            Split::Test => vec!["test_batch.bin".into()],
        }
    }
}

impl FromStr for Split {
    type Err = KmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(KmError::Config(format!("unknown split {other:?}"))),
        }
    }
}

fn read_records(path: &Path) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| {
        let detail = format!("{e} (expected CIFAR-10 batch of {CIFAR10_RECORD_BYTES}-byte records)");
        KmError::io(path, std::io::Error::new(e.kind(), detail))
    })?;
    if bytes.is_empty() || bytes.len() % CIFAR10_RECORD_BYTES != 0 {
        return Err(KmError::Format {
            path: path.to_path_buf(),
            detail: format!(
                "{} bytes is not a whole number of {CIFAR10_RECORD_BYTES}-byte records",
                bytes.len()
            ),
        });
    }
    Ok(bytes)
}

/// Pick `total` indices spread evenly over classes (remainders go to the
/// lowest class ids), shuffled within each class by `seed`, returned in
/// ascending order.
pub fn balanced_subset(labels: &[usize], class_count: usize, total: usize, seed: u64) -> Result<Vec<usize>> {
    let mut by_class = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = rng::stream(seed, &[0x50b5e7]);
    let mut chosen = Vec::with_capacity(total);
    for (k, members) in by_class.iter_mut().enumerate() {
        let want = total / class_count + usize::from(k < total % class_count);
        if members.len() < want {
            return Err(KmError::Config(format!(
                "subset of {total} needs {want} samples of class {k}, only {} available",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        chosen.extend_from_slice(&members[..want]);
    }
    chosen.sort_unstable();
    Ok(chosen)
}

/// Load a CIFAR-10 split from the binary batch files in `dir`. Pixels are
/// scaled to [0, 1] and standardized with [`CIFAR10_MEAN`]/[`CIFAR10_STD`].
pub fn load_cifar10_binary(dir: impl AsRef<Path>, split: Split, subset: Option<usize>, seed: u64) -> Result<DatasetSplit> {
    let dir = dir.as_ref();
    let mut raw = Vec::new();
    for file in split.files() {
        let path: PathBuf = dir.join(file);
        let bytes = read_records(&path)?;
        // Short files are accepted so fixtures can stand in for real batches.
        if bytes.len() > CIFAR10_RECORDS_PER_FILE * CIFAR10_RECORD_BYTES {
            return Err(KmError::Format {
                path,
                detail: format!("more than {CIFAR10_RECORDS_PER_FILE} records"),
            });
        }
        raw.extend(bytes);
    }
    let n = raw.len() / CIFAR10_RECORD_BYTES;
    let labels: Vec<usize> = (0..n).map(|i| raw[i * CIFAR10_RECORD_BYTES] as usize).collect();
    if let Some(bad) = labels.iter().position(|&l| l >= CIFAR10_CLASSES) {
        return Err(KmError::Format {
            path: dir.to_path_buf(),
            detail: format!("record {bad} has label byte {}", labels[bad]),
        });
    }
    let indices: Vec<usize> = match subset {
        Some(total) => balanced_subset(&labels, CIFAR10_CLASSES, total, seed)?,
        None => (0..n).collect(),
    };
    let plane = 32 * 32;
    let mut data = Vec::with_capacity(indices.len() * 3 * plane);
    for &i in &indices {
        let pixels = &raw[i * CIFAR10_RECORD_BYTES + 1..(i + 1) * CIFAR10_RECORD_BYTES];
        for c in 0..3 {
            data.extend(
                pixels[c * plane..(c + 1) * plane]
                    .iter()
                    .map(|&p| (p as f32 / 255.0 - CIFAR10_MEAN[c]) / CIFAR10_STD[c]),
            );
        }
    }
    let name = match split {
        Split::Train => "cifar10-train",
        Split::Test => "cifar10-test",
    };
    DatasetSplit::new(
        Tensor::new([indices.len(), 3, 32, 32], data)?,
        indices.iter().map(|&i| labels[i]).collect(),
        CIFAR10_CLASSES,
        name,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    /// Noisy copies of mutually orthogonal ±1 prototypes. Linearly
    /// separable with a margin by construction.
    SeparableBlobs,
    /// Oriented gratings with random phase, contrast, color and noise.
    /// Classes differ only by orientation, so spatial filters are needed.
    StripedTextures,
}

impl SynthKind {
    pub fn name(self) -> &'static str {
        match self {
            SynthKind::SeparableBlobs => "separable_blobs",
            SynthKind::StripedTextures => "striped_textures",
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SynthKind {
    type Err = KmError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "separable_blobs" => Ok(SynthKind::SeparableBlobs),
            "striped_textures" => Ok(SynthKind::StripedTextures),
            other => Err(KmError::Config(format!("unknown synthetic task {other:?}"))),
        }
    }
}

pub const SYNTH_CHANNELS: usize = 3;
const BLOB_AMPLITUDE: f64 = 0.5;
const BLOB_NOISE: f64 = 0.2;
const STRIPE_NOISE: f64 = 0.5;
const STRIPE_ORIENTATION_JITTER: f64 = 0.25;

fn walsh(k: usize, n: usize) -> f32 {
    if (k & n).count_ones() % 2 == 0 {
        1.0
    } else {
        -1.0
    }
}

fn blob_sample(class: usize, dim: usize, rng: &mut impl Rng, out: &mut Vec<f32>) {
    // Prototype k is Walsh function k+1 (the constant function is skipped).
    out.extend((0..dim).map(|n| {
        (BLOB_AMPLITUDE * walsh(class + 1, n) as f64 + rng.random_range(-BLOB_NOISE..BLOB_NOISE)) as f32
    }));
}

fn stripe_sample(class: usize, classes: usize, size: usize, rng: &mut impl Rng, out: &mut Vec<f32>) {
    let step = PI / classes as f64;
    let theta = class as f64 * step + rng.random_range(-1.0..1.0) * STRIPE_ORIENTATION_JITTER * step;
    let period = rng.random_range(3.0..6.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let contrast = rng.random_range(0.5..1.5);
    let colors: [f64; SYNTH_CHANNELS] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
    let offsets: [f64; SYNTH_CHANNELS] = std::array::from_fn(|_| rng.random_range(-0.5..0.5));
    let noise = Normal::new(0.0, STRIPE_NOISE).expect("finite std");
    let (s, c) = theta.sin_cos();
    let wave: Vec<f64> = (0..size * size)
        .map(|p| {
            let (y, x) = ((p / size) as f64, (p % size) as f64);
            (2.0 * PI * (x * c + y * s) / period + phase).sin()
        })
        .collect();
    for ch in 0..SYNTH_CHANNELS {
        out.extend(
            wave.iter()
                .map(|&v| (contrast * colors[ch] * v + offsets[ch] + noise.sample(rng)) as f32),
        );
    }
}

/// Generate a seeded synthetic task. The test split holds
/// `max(1, n_per_class / 2)` samples per class drawn from an independent
/// stream. Samples are interleaved by class.
pub fn synth_task(
    kind: SynthKind,
    classes: usize,
    n_per_class: usize,
    image_size: usize,
    seed: u64,
) -> Result<(DatasetSplit, DatasetSplit)> {
    if classes < 2 {
        return Err(KmError::Config(format!("synthetic tasks need at least 2 classes, got {classes}")));
    }
    if n_per_class == 0 || image_size == 0 {
        return Err(KmError::Config("n_per_class and image_size must be positive".into()));
    }
    let dim = SYNTH_CHANNELS * image_size * image_size;
    if kind == SynthKind::SeparableBlobs {
        // Walsh functions 1..=classes are orthogonal over any multiple of the
        // next power of two above `classes`.
        let block = (classes + 1).next_power_of_two();
        if dim % block != 0 {
            return Err(KmError::Config(format!(
                "separable_blobs with {classes} classes needs 3*size^2 divisible by {block}; size {image_size} gives {dim}"
            )));
        }
    }
    let make = |split: u64, per_class: usize, name: String| -> Result<DatasetSplit> {
        let mut rng = rng::stream(seed, &[split]);
        let mut data = Vec::with_capacity(per_class * classes * dim);
        let mut labels = Vec::with_capacity(per_class * classes);
        for _ in 0..per_class {
            for k in 0..classes {
                match kind {
                    SynthKind::SeparableBlobs => blob_sample(k, dim, &mut rng, &mut data),
                    SynthKind::StripedTextures => stripe_sample(k, classes, image_size, &mut rng, &mut data),
                }
                labels.push(k);
            }
        }
        DatasetSplit::new(
            Tensor::new([labels.len(), SYNTH_CHANNELS, image_size, image_size], data)?,
            labels,
            classes,
            name,
        )
    };
    Ok((
        make(0, n_per_class, format!("{kind}-train"))?,
        make(1, (n_per_class / 2).max(1), format!("{kind}-test"))?,
    ))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AugmentSpec {
    #[default]
    None,
    /// Zero-pad by `pad`, crop back to the original size at a random offset,
    /// then flip horizontally with probability one half.
    CropFlip { pad: usize },
}

impl FromStr for AugmentSpec {
    type Err = KmError;

    /// `none`, `crop_flip` (pad 4) or `crop_flip:<pad>`.
    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            None if s == "none" => Ok(AugmentSpec::None),
            None if s == "crop_flip" => Ok(AugmentSpec::CropFlip { pad: 4 }),
            Some(("crop_flip", pad)) => pad
                .parse()
                .map(|pad| AugmentSpec::CropFlip { pad })
                .map_err(|_| KmError::Config(format!("bad crop padding {pad:?}"))),
            _ => Err(KmError::Config(format!("unknown augmentation {s:?}"))),
        }
    }
}

impl fmt::Display for AugmentSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugmentSpec::None => f.write_str("none"),
            AugmentSpec::CropFlip { pad } => write!(f, "crop_flip:{pad}"),
        }
    }
}

/// Translate one `[C, H, W]` sample by `(dy, dx)` with zero fill, optionally
/// mirroring it. The shift stands for a crop at offset `(pad+dy, pad+dx)`
/// of the padded image.
fn shift_flip(sample: &[f32], c: usize, h: usize, w: usize, dy: isize, dx: isize, flip: bool, out: &mut [f32]) {
    for ch in 0..c {
        for y in 0..h {
            let sy = y as isize + dy;
            for x in 0..w {
                let ox = if flip { w - 1 - x } else { x };
                let sx = x as isize + dx;
                out[(ch * h + y) * w + ox] = if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                    0.0
                } else {
                    sample[(ch * h + sy as usize) * w + sx as usize]
                };
            }
        }
    }
}

/// Mirror every sample of a `[B, C, H, W]` batch left to right.
pub fn flip_horizontal(x: &Tensor) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(per).zip(out.chunks_mut(per)) {
        shift_flip(src, c, h, w, 0, 0, true, dst);
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}

/// Apply seeded augmentation to a `[B, C, H, W]` batch. Shape is preserved.
pub fn augment(x: &Tensor, spec: AugmentSpec, rng: &mut impl Rng) -> Tensor {
    let pad = match spec {
        AugmentSpec::None => return x.clone(),
        AugmentSpec::CropFlip { pad } => pad as isize,
    };
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let per = c * h * w;
    let mut out = vec![0.0; x.numel()];
    for (src, dst) in x.data().chunks(per).zip(out.chunks_mut(per)) {
        let dy = rng.random_range(-pad as i64..=pad as i64) as isize;
        let dx = rng.random_range(-pad as i64..=pad as i64) as isize;
        let flip = rng.random_bool(0.5);
        shift_flip(src, c, h, w, dy, dx, flip, dst);
    }
    Tensor::new(s.to_vec(), out).expect("same shape")
}
