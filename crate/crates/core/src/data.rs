//! In-memory image classification datasets: a seeded procedural stripe
//! dataset and a reader for the CIFAR-10 binary batch files.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{MfpError, Result};
use crate::tensor::Tensor;

/// Per-channel normalization constants applied at load time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    image_shape: [usize; 3],
    images: Vec<f64>,
    labels: Vec<usize>,
    classes: usize,
    normalization: Option<Normalization>,
}

impl Dataset {
    pub fn new(image_shape: [usize; 3], images: Vec<f64>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let per: usize = image_shape.iter().product();
        if per == 0 || images.len() != per * labels.len() {
            return Err(MfpError::InvalidArgument(format!(
                "{} pixels do not hold {} images of shape {image_shape:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
            return Err(MfpError::LabelOutOfRange { label, classes });
        }
        Ok(Self {
            image_shape,
            images,
            labels,
            classes,
            normalization: None,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.image_shape
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn normalization(&self) -> Option<&Normalization> {
        self.normalization.as_ref()
    }

    pub fn image(&self, i: usize) -> Tensor {
        let per: usize = self.image_shape.iter().product();
        Tensor::new(self.image_shape.to_vec(), self.images[i * per..(i + 1) * per].to_vec())
            .expect("stored image matches shape")
    }

    /// Stacks the selected samples into a `[B, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        if indices.is_empty() {
            return Err(MfpError::InvalidArgument("empty batch".into()));
        }
        let per: usize = self.image_shape.iter().product();
        let mut data = Vec::with_capacity(per * indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= self.len() {
                return Err(MfpError::InvalidArgument(format!(
                    "sample {i} out of range ({})",
                    self.len()
                )));
            }
            data.extend_from_slice(&self.images[i * per..(i + 1) * per]);
            labels.push(self.labels[i]);
        }
        let mut shape = vec![indices.len()];
        shape.extend_from_slice(&self.image_shape);
        Ok((Tensor::new(shape, data)?, labels))
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        let (batch, labels) = self.batch(indices)?;
        Ok(Dataset {
            image_shape: self.image_shape,
            images: batch.into_data(),
            labels,
            classes: self.classes,
            normalization: self.normalization.clone(),
        })
    }

    /// Splits off `n` seeded-random samples as a held-out set, returning
    /// `(remaining, held_out)`. Both keep their original relative order.
    pub fn hold_out(&self, n: usize, seed: u64) -> Result<(Dataset, Dataset)> {
        if n == 0 || n >= self.len() {
            return Err(MfpError::InvalidArgument(format!(
                "cannot hold out {n} of {} samples",
                self.len()
            )));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let (held, rest) = idx.split_at(n);
        let (mut held, mut rest) = (held.to_vec(), rest.to_vec());
        held.sort_unstable();
        rest.sort_unstable();
        Ok((self.subset(&rest)?, self.subset(&held)?))
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.classes];
        for &l in &self.labels {
            h[l] += 1;
        }
        h
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Dataset,
    pub eval: Dataset,
}

/// Standard deviation of the additive pixel noise.
pub const SYNTHETIC_NOISE_STD: f64 = 0.1;

/// Orientation and spatial frequency (cycles per image) of class `c`.
///
/// Classes tile a grid of `ceil(C / 2)` orientations in `[0, pi)` times two
/// frequency bands.
pub fn stripe_params(class: usize, classes: usize) -> (f64, f64) {
    let orientations = classes.div_ceil(2);
    let theta = PI * (class % orientations) as f64 / orientations as f64;
    let cycles = 1.5 + 1.5 * (class / orientations) as f64;
    (theta, cycles)
}

fn stripe_image(
    class: usize,
    classes: usize,
    size: usize,
    rng: &mut ChaCha8Rng,
    noise: &Normal<f64>,
) -> impl Iterator<Item = f64> {
    let (theta, cycles) = stripe_params(class, classes);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (c, s) = (theta.cos(), theta.sin());
    let k = 2.0 * PI * cycles / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let t = x as f64 * c + y as f64 * s;
            pixels.push(0.5 * (k * t + phase).sin() + noise.sample(rng));
        }
    }
    pixels.into_iter()
}

fn synthetic_split(rng: &mut ChaCha8Rng, n: usize, classes: usize, size: usize) -> Result<Dataset> {
    let noise = Normal::new(0.0, SYNTHETIC_NOISE_STD).expect("valid normal");
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(rng);
    let mut images = Vec::with_capacity(n * size * size);
    for &l in &labels {
        images.extend(stripe_image(l, classes, size, rng, &noise));
    }
    Dataset::new([1, size, size], images, labels, classes)
}

/// Seeded grayscale stripe dataset: class `c` is a sinusoidal grating with a
/// class-specific orientation and frequency, a random per-image phase, and
/// Gaussian pixel noise. Labels are assigned round-robin, so the class
/// histogram is exactly balanced whenever `n` is divisible by `classes`.
pub fn gen_synthetic_dataset(
    seed: u64,
    n_train: usize,
    n_eval: usize,
    classes: usize,
    image_size: usize,
) -> Result<SplitDataset> {
    if classes < 2 {
        return Err(MfpError::InvalidArgument(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if n_train == 0 || n_eval == 0 || image_size == 0 {
        return Err(MfpError::InvalidArgument("dataset sizes must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let train = synthetic_split(&mut rng, n_train, classes, image_size)?;
    let eval = synthetic_split(&mut rng, n_eval, classes, image_size)?;
    Ok(SplitDataset { train, eval })
}

pub const CIFAR_RECORD_BYTES: usize = 1 + 3 * 32 * 32;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;
pub const CIFAR_CLASSES: usize = 10;
/// Widely used CIFAR-10 training-set channel statistics.
pub const CIFAR_MEAN: [f64; 3] = [0.4914, 0.4822, 0.4465];
pub const CIFAR_STD: [f64; 3] = [0.2470, 0.2435, 0.2616];

/// Parses CIFAR-10 records (1 label byte + 3072 channel-major pixel bytes).
pub fn parse_cifar10_records(bytes: &[u8]) -> Result<Dataset> {
    if !bytes.len().is_multiple_of(CIFAR_RECORD_BYTES) {
        return Err(MfpError::InvalidArgument(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD_BYTES}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD_BYTES;
    let mut images = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD_BYTES) {
        let label = rec[0] as usize;
        if label >= CIFAR_CLASSES {
            return Err(MfpError::LabelOutOfRange {
                label,
                classes: CIFAR_CLASSES,
            });
        }
        labels.push(label);
        for (ch, plane) in rec[1..].chunks_exact(1024).enumerate() {
            images.extend(
                plane
                    .iter()
                    .map(|&p| (p as f64 / 255.0 - CIFAR_MEAN[ch]) / CIFAR_STD[ch]),
            );
        }
    }
    let mut ds = Dataset::new([3, 32, 32], images, labels, CIFAR_CLASSES)?;
    ds.normalization = Some(Normalization {
        mean: CIFAR_MEAN.to_vec(),
        std: CIFAR_STD.to_vec(),
    });
    Ok(ds)
}

/// Loads one canonical CIFAR-10 batch file (exactly 10000 records).
pub fn load_cifar10_binary(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| MfpError::io(path, e))?;
    let expected = (CIFAR_RECORD_BYTES * CIFAR_RECORDS_PER_FILE) as u64;
    if bytes.len() as u64 != expected {
        return Err(MfpError::FileSize {
            path: path.to_path_buf(),
            expected,
            actual: bytes.len() as u64,
        });
    }
    parse_cifar10_records(&bytes)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let mut acc = iter
        .next()
        .ok_or_else(|| MfpError::InvalidArgument("no dataset parts".into()))?;
    for p in iter {
        acc.images.extend(p.images);
        acc.labels.extend(p.labels);
    }
    Ok(acc)
}

/// Loads `data_batch_1..5.bin` as training data and `test_batch.bin` as the
/// evaluation split from a CIFAR-10 binary directory.
pub fn load_cifar10_dir(dir: &Path) -> Result<SplitDataset> {
    let train = (1..=5)
        .map(|i| load_cifar10_binary(&dir.join(format!("data_batch_{i}.bin"))))
        .collect::<Result<Vec<_>>>()?;
    Ok(SplitDataset {
        train: concat(train)?,
        eval: load_cifar10_binary(&dir.join("test_batch.bin"))?,
    })
}
