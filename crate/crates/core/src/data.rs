//! Datasets: the CIFAR-10 binary format and deterministic synthetic images.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR_SIDE: usize = 32;
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;
pub const CIFAR_RECORD: usize = 1 + CIFAR_PIXELS;
pub const CIFAR_RECORDS_PER_FILE: usize = 10_000;

const CIFAR_MEAN: [f32; 3] = [0.4914, 0.4822, 0.4465];
const CIFAR_STD: [f32; 3] = [0.2470, 0.2435, 0.2616];

/// Labelled images stored as one flat `f32` buffer, CHW per image.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dims: [usize; 3],
    classes: usize,
    images: Vec<f32>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(dims: [usize; 3], classes: usize, images: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        let per = dims.iter().product::<usize>();
        if per == 0 || images.len() != per * labels.len() {
            return Err(Error::Dataset(format!(
                "{} pixels for {} labels of shape {dims:?}",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Dataset { dims, classes, images, labels })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let per = self.image_len();
        &self.images[i * per..(i + 1) * per]
    }

    fn image_len(&self) -> usize {
        self.dims.iter().product()
    }

    /// First `n` samples.
    pub fn truncate(mut self, n: usize) -> Self {
        let n = n.min(self.len());
        self.images.truncate(n * self.image_len());
        self.labels.truncate(n);
        self
    }

    /// Gathers the given samples into an `N x C x H x W` batch.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let per = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
            labels.push(self.labels[i] as usize);
        }
        let [c, h, w] = self.dims;
        Ok((Tensor::from_vec(&[indices.len(), c, h, w], data)?, labels))
    }

    /// Seeded shuffle of the sample order for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        order.shuffle(&mut rng);
        order
    }

    /// Full batches of one epoch; the trailing partial batch is dropped.
    pub fn epoch_batches(&self, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
        self.epoch_order(seed, epoch)
            .chunks_exact(batch_size.max(1))
            .map(|c| c.to_vec())
            .collect()
    }

    /// Sequential batches covering every sample, for evaluation.
    pub fn eval_batches(&self, batch_size: usize) -> Vec<Vec<usize>> {
        (0..self.len()).collect::<Vec<_>>().chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Dataset,
    pub test: Dataset,
}

/// Parses raw CIFAR-10 binary records into normalized images.
pub fn parse_cifar_records(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() || bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::Dataset(format!(
            "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut images = Vec::with_capacity(n * CIFAR_PIXELS);
    let mut labels = Vec::with_capacity(n);
    let plane = CIFAR_SIDE * CIFAR_SIDE;
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0]);
        for (c, pixels) in rec[1..].chunks_exact(plane).enumerate() {
            images.extend(pixels.iter().map(|&p| (p as f32 / 255.0 - CIFAR_MEAN[c]) / CIFAR_STD[c]));
        }
    }
    Dataset::new([3, CIFAR_SIDE, CIFAR_SIDE], 10, images, labels)
}

/// Reads one CIFAR-10 batch file, which must hold exactly 10000 records.
pub fn read_cifar_file(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::Dataset(format!("{}: {e}", path.display())))?;
    if bytes.len() != CIFAR_RECORDS_PER_FILE * CIFAR_RECORD {
        return Err(Error::Dataset(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            CIFAR_RECORDS_PER_FILE * CIFAR_RECORD,
            bytes.len()
        )));
    }
    parse_cifar_records(&bytes)
}

fn concat(parts: Vec<Dataset>) -> Result<Dataset> {
    let mut iter = parts.into_iter();
    let mut first = iter.next().ok_or_else(|| Error::Dataset("no files".into()))?;
    for d in iter {
        first.images.extend(d.images);
        first.labels.extend(d.labels);
    }
    Ok(first)
}

/// Loads `data_batch_{1..5}.bin` and `test_batch.bin` from `dir`.
pub fn load_cifar10(dir: &Path, train_limit: Option<usize>, test_limit: Option<usize>) -> Result<Split> {
    let mut train_parts = Vec::new();
    let need = train_limit.unwrap_or(usize::MAX);
    for i in 1..=5 {
        if train_parts.len() * CIFAR_RECORDS_PER_FILE >= need {
            break;
        }
        train_parts.push(read_cifar_file(&dir.join(format!("data_batch_{i}.bin")))?);
    }
    let mut train = concat(train_parts)?;
    let mut test = read_cifar_file(&dir.join("test_batch.bin"))?;
    if let Some(n) = train_limit {
        train = train.truncate(n);
    }
    if let Some(n) = test_limit {
        test = test.truncate(n);
    }
    Ok(Split { train, test })
}

/// Encodes 8-bit images and labels as CIFAR-10 binary records.
pub fn encode_cifar_records(pixels: &[u8], labels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != labels.len() * CIFAR_PIXELS {
        return Err(Error::Dataset("pixel count does not match label count".into()));
    }
    let mut out = Vec::with_capacity(labels.len() * CIFAR_RECORD);
    for (i, &l) in labels.iter().enumerate() {
        out.push(l);
        out.extend_from_slice(&pixels[i * CIFAR_PIXELS..(i + 1) * CIFAR_PIXELS]);
    }
    Ok(out)
}

/// Parameters of the synthetic image generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub classes: usize,
    /// Values per sample; `3 * s * s` yields `3 x s x s` images.
    pub dim: usize,
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    /// Per-pixel noise standard deviation relative to the unit-RMS prototypes.
    pub noise: f32,
}

/// Image shape for a flat dimension: `[3, s, s]` when possible, else `[dim, 1, 1]`.
pub fn image_dims(dim: usize) -> [usize; 3] {
    if dim % 3 == 0 {
        let s = ((dim / 3) as f64).sqrt().round() as usize;
        if s * s * 3 == dim {
            return [3, s, s];
        }
    }
    [dim, 1, 1]
}

/// Gaussian blobs around smooth per-class prototype images.
///
/// Each class prototype is a sum of a few random low-frequency plane waves
/// per channel, normalized to unit RMS; samples add i.i.d. Gaussian noise.
pub fn synthetic_blobs(spec: &BlobSpec) -> Result<Split> {
    if spec.classes < 2 || spec.classes > 256 || spec.dim == 0 || spec.train == 0 || spec.test == 0 {
        return Err(Error::Dataset(format!("invalid synthetic spec {spec:?}")));
    }
    let dims = image_dims(spec.dim);
    let [c, h, w] = dims;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut prototypes = vec![0.0f32; spec.classes * spec.dim];
    for k in 0..spec.classes {
        let proto = &mut prototypes[k * spec.dim..(k + 1) * spec.dim];
        for ch in 0..c {
            for _ in 0..3 {
                let fy: f32 = rng.random_range(0.0..2.5);
                let fx: f32 = rng.random_range(0.0..2.5);
                let phase: f32 = rng.random_range(0.0..std::f32::consts::TAU);
                let amp: f32 = rng.random_range(0.5..1.0);
                for y in 0..h {
                    for x in 0..w {
                        let t = std::f32::consts::TAU * (fy * y as f32 / h as f32 + fx * x as f32 / w as f32) + phase;
                        proto[(ch * h + y) * w + x] += amp * t.cos();
                    }
                }
            }
        }
        let rms = (proto.iter().map(|v| v * v).sum::<f32>() / spec.dim as f32).sqrt().max(1e-6);
        proto.iter_mut().for_each(|v| *v /= rms);
    }
    let draw = |n: usize, rng: &mut ChaCha8Rng| -> Result<Dataset> {
        let mut images = Vec::with_capacity(n * spec.dim);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let k = i % spec.classes;
            labels.push(k as u8);
            let proto = &prototypes[k * spec.dim..(k + 1) * spec.dim];
            images.extend(proto.iter().map(|&p| {
                let e: f32 = rng.sample(StandardNormal);
                p + spec.noise * e
            }));
        }
        Dataset::new(dims, spec.classes, images, labels)
    };
    let train = draw(spec.train, &mut rng)?;
    let test = draw(spec.test, &mut rng)?;
    Ok(Split { train, test })
}
