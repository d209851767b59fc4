//! Dataset loading (MNIST IDX, CIFAR binary), standardization, augmentation,
//! and synthetic data.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, ParseFailure, Result};
use crate::tensor::Tensor;

pub const DATA_DIR_ENV: &str = "RRELU_DATA_DIR";

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[N, ...sample shape]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: String,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, split: &str) -> Result<Self> {
        if images.ndim() < 2 || images.shape()[0] != labels.len() {
            return Err(Error::dim("dataset", images.shape(), &[labels.len()]));
        }
        if labels.is_empty() {
            return Err(Error::Input(format!("{split} split is empty")));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Input(format!("label {bad} outside 0..{num_classes}")));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            split: split.to_string(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> &[usize] {
        &self.images.shape()[1..]
    }

    fn sample_len(&self) -> usize {
        self.sample_shape().iter().product()
    }

    /// Copies the listed samples into one batch.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let per = self.sample_len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let images = Tensor::new(shape, data).expect("batch extent");
        (images, indices.iter().map(|&i| self.labels[i]).collect())
    }

    pub fn subset(&self, indices: &[usize], split: &str) -> Result<Dataset> {
        let (images, labels) = self.batch(indices);
        Dataset::new(images, labels, self.num_classes, split)
    }

    /// Even indices and odd indices, in that order.
    pub fn split_even_odd(&self) -> Result<(Dataset, Dataset)> {
        let even: Vec<usize> = (0..self.len()).step_by(2).collect();
        let odd: Vec<usize> = (1..self.len()).step_by(2).collect();
        Ok((
            self.subset(&even, &format!("{}-even", self.split))?,
            self.subset(&odd, &format!("{}-odd", self.split))?,
        ))
    }
}

fn parse_err(path: &Path, kind: ParseFailure, reason: String) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        kind,
        reason,
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// Parses an IDX image file: returns `(count, rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8], path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.len() < 16 {
        return Err(parse_err(path, ParseFailure::Truncated, format!("{} header bytes", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(parse_err(path, ParseFailure::BadMagic, format!("{magic} where 2051 expected")));
    }
    let (n, r, c) = (be_u32(bytes, 4) as usize, be_u32(bytes, 8) as usize, be_u32(bytes, 12) as usize);
    let need = 16 + n * r * c;
    if bytes.len() < need {
        return Err(parse_err(
            path,
            ParseFailure::Truncated,
            format!("{} bytes, header promises {need}", bytes.len()),
        ));
    }
    Ok((n, r, c, bytes[16..need].to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8], path: &Path) -> Result<Vec<u8>> {
    if bytes.len() < 8 {
        return Err(parse_err(path, ParseFailure::Truncated, format!("{} header bytes", bytes.len())));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(parse_err(path, ParseFailure::BadMagic, format!("{magic} where 2049 expected")));
    }
    let n = be_u32(bytes, 4) as usize;
    if bytes.len() < 8 + n {
        return Err(parse_err(
            path,
            ParseFailure::Truncated,
            format!("{} bytes, header promises {}", bytes.len(), 8 + n),
        ));
    }
    Ok(bytes[8..8 + n].to_vec())
}

/// Reads an IDX image/label pair; pixels are scaled to `[0, 1]`.
pub fn load_mnist_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset> {
    let (n, r, c, pixels) = parse_idx_images(&fs::read(images_path)?, images_path)?;
    let labels = parse_idx_labels(&fs::read(labels_path)?, labels_path)?;
    if labels.len() != n {
        return Err(parse_err(
            labels_path,
            ParseFailure::CountMismatch,
            format!("{} labels for {n} images", labels.len()),
        ));
    }
    let data = pixels.iter().map(|&p| p as f32 / 255.0).collect();
    let images = Tensor::new(vec![n, 1, r, c], data)?;
    let split = if n == 10_000 { "test" } else { "train" };
    Dataset::new(images, labels.into_iter().map(usize::from).collect(), 10, split)
}

/// Directory holding the four MNIST files, either `root/mnist` or `root`.
pub fn mnist_dir(root: &Path) -> PathBuf {
    let nested = root.join("mnist");
    if nested.join("train-images-idx3-ubyte").exists() {
        nested
    } else {
        root.to_path_buf()
    }
}

pub fn load_mnist(root: &Path, train: bool) -> Result<Dataset> {
    let dir = mnist_dir(root);
    let prefix = if train { "train" } else { "t10k" };
    let mut ds = load_mnist_idx(
        &dir.join(format!("{prefix}-images-idx3-ubyte")),
        &dir.join(format!("{prefix}-labels-idx1-ubyte")),
    )?;
    ds.split = if train { "train" } else { "test" }.into();
    Ok(ds)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CifarVariant {
    C10,
    C100,
}

impl CifarVariant {
    pub fn record_len(self) -> usize {
        match self {
            CifarVariant::C10 => 3073,
            CifarVariant::C100 => 3074,
        }
    }

    pub fn num_classes(self) -> usize {
        match self {
            CifarVariant::C10 => 10,
            CifarVariant::C100 => 100,
        }
    }
}

/// Decodes CIFAR binary records into `(labels, pixels in [0, 1])`, channel-planar.
pub fn parse_cifar_records(bytes: &[u8], variant: CifarVariant, path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let rec = variant.record_len();
    if !bytes.len().is_multiple_of(rec) {
        return Err(parse_err(
            path,
            ParseFailure::BadRecordSize,
            format!("{} bytes with {rec}-byte records", bytes.len()),
        ));
    }
    let mut labels = Vec::with_capacity(bytes.len() / rec);
    let mut pixels = Vec::with_capacity(bytes.len() / rec * 3072);
    for r in bytes.chunks_exact(rec) {
        // CIFAR-100 stores the coarse label first, then the fine one
        let label = r[rec - 3073] as usize;
        if label >= variant.num_classes() {
            return Err(Error::Input(format!("label {label} in {}", path.display())));
        }
        labels.push(label);
        pixels.extend(r[rec - 3072..].iter().map(|&p| p as f32 / 255.0));
    }
    Ok((labels, pixels))
}

/// Loads the binary distribution found in `dir` (`data_batch_*.bin` /
/// `test_batch.bin` for CIFAR-10, `train.bin` / `test.bin` for CIFAR-100).
pub fn load_cifar_bin(dir: &Path, variant: CifarVariant, train: bool) -> Result<Dataset> {
    let files: Vec<PathBuf> = match (variant, train) {
        (CifarVariant::C10, true) => (1..=5).map(|i| dir.join(format!("data_batch_{i}.bin"))).collect(),
        (CifarVariant::C10, false) => vec![dir.join("test_batch.bin")],
        (CifarVariant::C100, true) => vec![dir.join("train.bin")],
        (CifarVariant::C100, false) => vec![dir.join("test.bin")],
    };
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    for f in &files {
        let (l, p) = parse_cifar_records(&fs::read(f)?, variant, f)?;
        labels.extend(l);
        pixels.extend(p);
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], pixels)?;
    Dataset::new(images, labels, variant.num_classes(), if train { "train" } else { "test" })
}

/// Default location under the data root.
pub fn cifar_dir(root: &Path, variant: CifarVariant) -> PathBuf {
    match variant {
        CifarVariant::C10 => root.join("cifar-10-batches-bin"),
        CifarVariant::C100 => root.join("cifar-100-binary"),
    }
}

/// Per-channel mean and standard deviation, fitted on one split only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Standardizer {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let (n, c, inner) = train.images.channel_layout()?;
        let count = (n * inner) as f64;
        let mut mean = vec![0f64; c];
        let mut sq = vec![0f64; c];
        for b in 0..n {
            for ch in 0..c {
                for &v in &train.images.data()[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let mut std = vec![0f32; c];
        for ch in 0..c {
            mean[ch] /= count;
            let var = (sq[ch] / count - mean[ch] * mean[ch]).max(0.0);
            std[ch] = if var > 1e-12 { var.sqrt() as f32 } else { 1.0 };
        }
        Ok(Standardizer {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        })
    }

    pub fn apply(&self, ds: &mut Dataset) -> Result<()> {
        let (n, c, inner) = ds.images.channel_layout()?;
        if c != self.mean.len() {
            return Err(Error::dim("standardize", ds.images.shape(), &[self.mean.len()]));
        }
        let data = ds.images.data_mut();
        for b in 0..n {
            for ch in 0..c {
                let (m, s) = (self.mean[ch], self.std[ch]);
                for v in &mut data[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                    *v = (*v - m) / s;
                }
            }
        }
        Ok(())
    }
}

/// Gaussian clusters with unit variance around class centers placed at
/// distance `separation / 2` from the origin in seeded random directions.
pub fn synthetic_blobs(n: usize, shape: &[usize], classes: usize, separation: f32, seed: u64) -> Result<Dataset> {
    if classes == 0 || n == 0 {
        return Err(Error::Input("synthetic blobs need at least one sample and class".into()));
    }
    let dim: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = Vec::with_capacity(classes);
    for _ in 0..classes {
        let dir: Vec<f32> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f32>().sqrt().max(f32::MIN_POSITIVE);
        centers.push(dir.into_iter().map(|v| v / norm * separation / 2.0).collect::<Vec<f32>>());
    }
    // balanced classes in shuffled order, so index-based splits stay balanced
    let mut labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    labels.shuffle(&mut rng);
    let mut data = Vec::with_capacity(n * dim);
    for &k in &labels {
        for &c in &centers[k] {
            let e: f32 = StandardNormal.sample(&mut rng);
            data.push(c + e);
        }
    }
    let mut full = vec![n];
    full.extend_from_slice(shape);
    Dataset::new(Tensor::new(full, data)?, labels, classes, "synthetic")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Augment {
    None,
    /// Zero-pad by 4, random crop back to size, horizontal flip with p = 0.5.
    Crop4Flip,
}

/// Applies `policy` to a `[N, C, H, W]` batch; the draws depend only on `seed`.
pub fn augment(batch: &Tensor, policy: Augment, seed: u64) -> Result<Tensor> {
    if policy == Augment::None {
        return Ok(batch.clone());
    }
    let s = batch.shape();
    if s.len() != 4 {
        return Err(Error::Contract(format!("augmentation needs [N, C, H, W], got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    const PAD: isize = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = vec![0f32; batch.numel()];
    let src = batch.data();
    for b in 0..n {
        let dy = rng.random_range(0..=2 * PAD as i64) as isize - PAD;
        let dx = rng.random_range(0..=2 * PAD as i64) as isize - PAD;
        let flip = rng.random_bool(0.5);
        for ch in 0..c {
            let plane = (b * c + ch) * h * w;
            for y in 0..h {
                let sy = y as isize + dy;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for x in 0..w {
                    let xx = if flip { w - 1 - x } else { x };
                    let sx = xx as isize + dx;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    out[plane + y * w + x] = src[plane + sy as usize * w + sx as usize];
                }
            }
        }
    }
    Tensor::new(s.to_vec(), out)
}

/// Data root from `RRELU_DATA_DIR`, else `./data`.
pub fn data_root() -> PathBuf {
    std::env::var_os(DATA_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("data"))
}
