//! MNIST ingestion, patching into token matrices, batching, and a synthetic
//! stand-in dataset.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::linalg::Matrix;
use crate::scalar::Real;

pub const IMAGE_SIDE: usize = 28;
pub const PATCH_SIDE: usize = 7;
pub const PATCHES_PER_SIDE: usize = IMAGE_SIDE / PATCH_SIDE;
pub const N_CLASSES: usize = 10;

const IMAGE_MAGIC: u32 = 2051;
const LABEL_MAGIC: u32 = 2049;

#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    /// Row-major, scaled to `[0, 1]`.
    pub pixels: Vec<f64>,
    pub label: usize,
}

impl ImageSample {
    pub fn pixel(&self, r: usize, c: usize) -> f64 {
        self.pixels[r * IMAGE_SIDE + c]
    }
}

/// A `N × seq_len` token matrix with its one-hot target.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchedSample<T> {
    pub tokens: Matrix<T>,
    pub target: Vec<T>,
    pub label: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum IdxError {
    #[error("{path}: cannot read: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{path}: bad magic number {found} (expected {expected})")]
    BadMagic { path: PathBuf, expected: u32, found: u32 },
    #[error("{path}: image dimensions {rows}x{cols}, expected 28x28")]
    DimensionMismatch { path: PathBuf, rows: u32, cols: u32 },
    #[error("{path}: truncated, {needed} bytes needed but {actual} present")]
    TruncatedFile { path: PathBuf, needed: usize, actual: usize },
    #[error("{images} holds {n_images} images but {labels} holds {n_labels} labels")]
    CountMismatch {
        images: PathBuf,
        labels: PathBuf,
        n_images: usize,
        n_labels: usize,
    },
    #[error("{path}: label {label} at index {index} is not a digit")]
    InvalidLabel { path: PathBuf, index: usize, label: u8 },
}

fn read_u32(bytes: &[u8], at: usize, path: &Path) -> Result<u32, IdxError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| IdxError::TruncatedFile {
            path: path.to_path_buf(),
            needed: at + 4,
            actual: bytes.len(),
        })
}

fn check_magic(bytes: &[u8], expected: u32, path: &Path) -> Result<(), IdxError> {
    let found = read_u32(bytes, 0, path)?;
    if found != expected {
        return Err(IdxError::BadMagic {
            path: path.to_path_buf(),
            expected,
            found,
        });
    }
    Ok(())
}

fn body<'a>(bytes: &'a [u8], header: usize, len: usize, path: &Path) -> Result<&'a [u8], IdxError> {
    bytes.get(header..header + len).ok_or_else(|| IdxError::TruncatedFile {
        path: path.to_path_buf(),
        needed: header + len,
        actual: bytes.len(),
    })
}

/// Parses an IDX image file (magic 2051, `count × 28 × 28` unsigned bytes).
/// `path` is only used in error messages.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<Vec<Vec<f64>>, IdxError> {
    check_magic(bytes, IMAGE_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let rows = read_u32(bytes, 8, path)?;
    let cols = read_u32(bytes, 12, path)?;
    if rows as usize != IMAGE_SIDE || cols as usize != IMAGE_SIDE {
        return Err(IdxError::DimensionMismatch {
            path: path.to_path_buf(),
            rows,
            cols,
        });
    }
    let size = IMAGE_SIDE * IMAGE_SIDE;
    let data = body(bytes, 16, count * size, path)?;
    Ok(data
        .chunks_exact(size)
        .map(|img| img.iter().map(|&b| f64::from(b) / 255.0).collect())
        .collect())
}

/// Parses an IDX label file (magic 2049, `count` unsigned bytes).
pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<usize>, IdxError> {
    check_magic(bytes, LABEL_MAGIC, path)?;
    let count = read_u32(bytes, 4, path)? as usize;
    let data = body(bytes, 8, count, path)?;
    data.iter()
        .enumerate()
        .map(|(index, &label)| {
            if (label as usize) < N_CLASSES {
                Ok(label as usize)
            } else {
                Err(IdxError::InvalidLabel {
                    path: path.to_path_buf(),
                    index,
                    label,
                })
            }
        })
        .collect()
}

fn read_file(path: &Path) -> Result<Vec<u8>, IdxError> {
    fs::read(path).map_err(|e| IdxError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Loads a matching pair of IDX image and label files.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Vec<ImageSample>, IdxError> {
    let images = parse_idx_images(&read_file(images_path)?, images_path)?;
    let labels = parse_idx_labels(&read_file(labels_path)?, labels_path)?;
    if images.len() != labels.len() {
        return Err(IdxError::CountMismatch {
            images: images_path.to_path_buf(),
            labels: labels_path.to_path_buf(),
            n_images: images.len(),
            n_labels: labels.len(),
        });
    }
    Ok(images
        .into_iter()
        .zip(labels)
        .map(|(pixels, label)| ImageSample { pixels, label })
        .collect())
}

pub fn one_hot<T: Real>(label: usize, n_classes: usize) -> Vec<T> {
    let mut t = vec![T::zero(); n_classes];
    t[label] = T::one();
    t
}

/// Splits the image into a 4×4 grid of 7×7 patches. Patch `m = 4·pr + pc`
/// becomes column `m`, its pixels flattened row-major.
pub fn patchify<T: Real>(sample: &ImageSample) -> PatchedSample<T> {
    assert_eq!(sample.pixels.len(), IMAGE_SIDE * IMAGE_SIDE, "image must be 28x28");
    let tokens = Matrix::from_fn(PATCH_SIDE * PATCH_SIDE, PATCHES_PER_SIDE * PATCHES_PER_SIDE, |i, m| {
        let (pr, pc) = (m / PATCHES_PER_SIDE, m % PATCHES_PER_SIDE);
        let (r, c) = (i / PATCH_SIDE, i % PATCH_SIDE);
        T::lit(sample.pixel(pr * PATCH_SIDE + r, pc * PATCH_SIDE + c))
    });
    PatchedSample {
        tokens,
        target: one_hot(sample.label, N_CLASSES),
        label: sample.label,
    }
}

/// Inverse of [`patchify`] on the pixels.
pub fn unpatchify<T: Real>(tokens: &Matrix<T>) -> Vec<f64> {
    assert_eq!(tokens.shape(), (PATCH_SIDE * PATCH_SIDE, PATCHES_PER_SIDE * PATCHES_PER_SIDE));
    let mut pixels = vec![0.0; IMAGE_SIDE * IMAGE_SIDE];
    for m in 0..tokens.cols() {
        let (pr, pc) = (m / PATCHES_PER_SIDE, m % PATCHES_PER_SIDE);
        for (i, v) in tokens.col(m).iter().enumerate() {
            let (r, c) = (pr * PATCH_SIDE + i / PATCH_SIDE, pc * PATCH_SIDE + i % PATCH_SIDE);
            pixels[r * IMAGE_SIDE + c] = v.as_f64();
        }
    }
    pixels
}

/// Shape and difficulty of the synthetic dataset.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthConfig {
    pub dim: usize,
    pub seq_len: usize,
    pub n_classes: usize,
    /// Standard deviation of the per-entry Gaussian noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            dim: 49,
            seq_len: 16,
            n_classes: N_CLASSES,
            noise: 0.5,
        }
    }
}

/// Class `k` has a mean token matrix with entries drawn from `U(0, 1)`;
/// each sample is its class mean plus isotropic Gaussian noise. Labels cycle
/// through the classes so every class is equally represented.
///
/// The class means are drawn first, so two calls with equal seeds agree on
/// the common prefix of their samples.
pub fn synth_dataset<T: Real, R: Rng + ?Sized>(
    n_samples: usize,
    config: &SynthConfig,
    rng: &mut R,
) -> Vec<PatchedSample<T>> {
    let means: Vec<Matrix<f64>> = (0..config.n_classes)
        .map(|_| Matrix::from_fn(config.dim, config.seq_len, |_, _| rng.random::<f64>()))
        .collect();
    (0..n_samples)
        .map(|i| {
            let label = i % config.n_classes;
            let tokens = Matrix::from_fn(config.dim, config.seq_len, |r, c| {
                let z: f64 = StandardNormal.sample(rng);
                T::lit(means[label][(r, c)] + config.noise * z)
            });
            PatchedSample {
                tokens,
                target: one_hot(label, config.n_classes),
                label,
            }
        })
        .collect()
}

/// One minibatch, borrowed from the dataset.
#[derive(Clone, Debug)]
pub struct Batch<'a, T> {
    pub tokens: Vec<&'a Matrix<T>>,
    pub targets: Vec<&'a [T]>,
}

impl<T> Batch<'_, T> {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub struct Batches<'a, T> {
    data: &'a [PatchedSample<T>],
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl<'a, T> Iterator for Batches<'a, T> {
    type Item = Batch<'a, T>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let idx = &self.order[self.next..end];
        self.next = end;
        Some(Batch {
            tokens: idx.iter().map(|&i| &self.data[i].tokens).collect(),
            targets: idx.iter().map(|&i| self.data[i].target.as_slice()).collect(),
        })
    }
}

/// One epoch of shuffled minibatches; the last may be short.
///
/// # Panics
/// If `batch_size == 0`.
pub fn batches<'a, T, R: Rng + ?Sized>(
    data: &'a [PatchedSample<T>],
    batch_size: usize,
    rng: &mut R,
) -> Batches<'a, T> {
    assert!(batch_size >= 1, "batch_size must be at least 1");
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    Batches {
        data,
        order,
        batch_size,
        next: 0,
    }
}
