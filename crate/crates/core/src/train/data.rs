//! CIFAR binary batches, normalization and augmentation.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CifarKind {
    Cifar10,
    Cifar100,
}

impl CifarKind {
    pub fn num_classes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 10,
            CifarKind::Cifar100 => 100,
        }
    }

    /// Bytes per record: label byte(s) then the pixels.
    pub fn record_len(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    fn label_bytes(self) -> usize {
        match self {
            CifarKind::Cifar10 => 1,
            CifarKind::Cifar100 => 2,
        }
    }

    fn files(self, split: Split) -> &'static [&'static str] {
        match (self, split) {
            (CifarKind::Cifar10, Split::Train) => &[
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (CifarKind::Cifar10, Split::Test) => &["test_batch.bin"],
            (CifarKind::Cifar100, Split::Train) => &["train.bin"],
            (CifarKind::Cifar100, Split::Test) => &["test.bin"],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Per-channel mean and standard deviation on the 0..=255 pixel scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    /// Leaves pixels on the 0..=255 scale.
    pub const IDENTITY: ChannelStats = ChannelStats {
        mean: [0.0; 3],
        std: [1.0; 3],
    };
}

/// Images as channel-planar bytes (`3 × side × side` each) with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<u8>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub side: usize,
}

impl Dataset {
    pub fn new(images: Vec<u8>, labels: Vec<usize>, num_classes: usize, side: usize) -> Result<Self> {
        let per = 3 * side * side;
        if per == 0 || images.len() != labels.len() * per {
            return Err(Error::Dataset(format!(
                "{} image bytes do not hold {} images of {per} bytes",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} outside [0, {num_classes})")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            side,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn pixels_per_image(&self) -> usize {
        3 * self.side * self.side
    }

    pub fn image(&self, i: usize) -> &[u8] {
        let per = self.pixels_per_image();
        &self.images[i * per..(i + 1) * per]
    }

    /// The first `n` samples (all of them when `n` exceeds the length).
    pub fn subset(&self, n: usize) -> Dataset {
        let n = n.min(self.len());
        Dataset {
            images: self.images[..n * self.pixels_per_image()].to_vec(),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
            side: self.side,
        }
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let plane = self.side * self.side;
        let mut sum = [0f64; 3];
        let mut sq = [0f64; 3];
        for img in self.images.chunks_exact(3 * plane) {
            for c in 0..3 {
                for &p in &img[c * plane..(c + 1) * plane] {
                    let v = f64::from(p);
                    sum[c] += v;
                    sq[c] += v * v;
                }
            }
        }
        let n = (self.len() * plane).max(1) as f64;
        let mut stats = ChannelStats::IDENTITY;
        for c in 0..3 {
            let mean = sum[c] / n;
            stats.mean[c] = mean;
            stats.std[c] = (sq[c] / n - mean * mean).max(0.0).sqrt().max(1e-6);
        }
        stats
    }

    /// Stacks `indices` into an `(n, 3, side, side)` tensor, normalized by
    /// `stats`; `transform` may rewrite each image's bytes first.
    pub fn batch<T: Real>(
        &self,
        indices: &[usize],
        stats: &ChannelStats,
        mut transform: impl FnMut(&[u8]) -> Vec<u8>,
    ) -> (Tensor<T>, Vec<usize>) {
        let per = self.pixels_per_image();
        let plane = self.side * self.side;
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            let img = transform(self.image(i));
            for (c, chunk) in img.chunks_exact(plane).enumerate() {
                let (m, s) = (stats.mean[c], stats.std[c]);
                data.extend(chunk.iter().map(|&p| T::lit((f64::from(p) - m) / s)));
            }
        }
        let shape = Shape::new(indices.len(), 3, self.side, self.side);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        (Tensor::new(shape, data).expect("batch shape"), labels)
    }
}

/// Decodes one CIFAR binary file.
pub fn parse_cifar(bytes: &[u8], kind: CifarKind) -> Result<Dataset> {
    let rec = kind.record_len();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {rec}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / rec;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    for (i, r) in bytes.chunks_exact(rec).enumerate() {
        // CIFAR-100 stores (coarse, fine); the fine label is used.
        let label = r[kind.label_bytes() - 1] as usize;
        if label >= kind.num_classes() {
            return Err(Error::Dataset(format!(
                "record {i}: label {label} outside [0, {})",
                kind.num_classes()
            )));
        }
        labels.push(label);
        images.extend_from_slice(&r[kind.label_bytes()..]);
    }
    Dataset::new(images, labels, kind.num_classes(), CIFAR_SIDE)
}

/// Finds the directory holding the batch files: `dir` itself or the
/// standard extracted subdirectory.
fn resolve_dir(dir: &Path, kind: CifarKind, split: Split) -> Result<PathBuf> {
    let first = kind.files(split)[0];
    let sub = match kind {
        CifarKind::Cifar10 => "cifar-10-batches-bin",
        CifarKind::Cifar100 => "cifar-100-binary",
    };
    [dir.to_path_buf(), dir.join(sub)]
        .into_iter()
        .find(|d| d.join(first).is_file())
        .ok_or_else(|| Error::Dataset(format!("no {first} under {}", dir.display())))
}

/// Loads a split from the standard CIFAR binary distribution.
pub fn load_cifar(dir: &Path, split: Split, kind: CifarKind) -> Result<Dataset> {
    let dir = resolve_dir(dir, kind, split)?;
    let mut images = Vec::new();
    let mut labels = Vec::new();
    for name in kind.files(split) {
        let path = dir.join(name);
        let bytes = fs::read(&path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        let part = parse_cifar(&bytes, kind).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
        images.extend(part.images);
        labels.extend(part.labels);
    }
    Dataset::new(images, labels, kind.num_classes(), CIFAR_SIDE)
}

/// Zero-pads by [`CROP_PAD`], crops `side × side` at `(dy, dx)` in the padded
/// image and optionally mirrors horizontally. Offsets range over
/// `0..=2·CROP_PAD`; `(4, 4)` without a flip is the identity.
pub fn augment_with(image: &[u8], side: usize, dy: usize, dx: usize, flip: bool) -> Vec<u8> {
    let plane = side * side;
    let mut out = vec![0u8; image.len()];
    for c in 0..image.len() / plane {
        for y in 0..side {
            let sy = (y + dy) as isize - CROP_PAD as isize;
            if sy < 0 || sy >= side as isize {
                continue;
            }
            for x in 0..side {
                let ox = if flip { side - 1 - x } else { x };
                let sx = (ox + dx) as isize - CROP_PAD as isize;
                if sx < 0 || sx >= side as isize {
                    continue;
                }
                out[c * plane + y * side + x] = image[c * plane + sy as usize * side + sx as usize];
            }
        }
    }
    out
}

/// Random pad-crop and flip with probability one half.
pub fn augment<R: Rng + ?Sized>(image: &[u8], side: usize, rng: &mut R) -> Vec<u8> {
    let dy = rng.gen_range(0..=2 * CROP_PAD);
    let dx = rng.gen_range(0..=2 * CROP_PAD);
    let flip = rng.gen_bool(0.5);
    augment_with(image, side, dy, dx, flip)
}
