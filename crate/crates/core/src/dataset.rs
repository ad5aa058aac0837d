//! Labeled image datasets: MNIST idx files and CIFAR-10 binary batches.
//!
//! Files ending in `.gz` are decompressed transparently.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use flate2::read::GzDecoder;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::InputNorm;
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetFormat {
    MnistIdx,
    Cifar10Bin,
}

impl FromStr for DatasetFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist-idx" => Ok(DatasetFormat::MnistIdx),
            "cifar10-bin" => Ok(DatasetFormat::Cifar10Bin),
            other => Err(Error::InvalidArgument(format!(
                "unknown dataset format '{other}' (expected mnist-idx or cifar10-bin)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// N, C, H, W; already normalized.
    pub images: Tensor,
    pub labels: Vec<u32>,
    pub num_classes: usize,
}

impl LabeledDataset {
    pub fn new(images: Tensor, labels: Vec<u32>, num_classes: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::InvalidArgument(format!(
                "dataset images must be N,C,H,W, got {:?}",
                images.shape()
            )));
        }
        if images.batch() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} images but {} labels",
                images.batch(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} outside [0, {num_classes})"
            )));
        }
        Ok(Self {
            images,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            images: self.images.gather_batch(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// First `n` samples (or all of them).
    pub fn head(&self, n: usize) -> LabeledDataset {
        let n = n.min(self.len());
        LabeledDataset {
            images: self.images.slice_batch(0, n),
            labels: self.labels[..n].to_vec(),
            num_classes: self.num_classes,
        }
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    if path.extension().is_some_and(|e| e == "gz") {
        let mut out = Vec::new();
        GzDecoder::new(&raw[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::Format(format!("{}: bad gzip stream: {e}", path.display())))?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_be_bytes([bytes[at], bytes[at + 1], bytes[at + 2], bytes[at + 3]])
}

/// Parses an idx image file into (count, rows, cols, pixels).
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, &[u8])> {
    if bytes.len() < 16 {
        return Err(Error::Format("idx image header truncated".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad idx image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let (n, r, c) = (
        be_u32(bytes, 4) as usize,
        be_u32(bytes, 8) as usize,
        be_u32(bytes, 12) as usize,
    );
    let body = &bytes[16..];
    if body.len() != n * r * c {
        return Err(Error::Format(format!(
            "idx image body is {} bytes, header implies {}",
            body.len(),
            n * r * c
        )));
    }
    Ok((n, r, c, body))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<&[u8]> {
    if bytes.len() < 8 {
        return Err(Error::Format("idx label header truncated".into()));
    }
    let magic = be_u32(bytes, 0);
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad idx label magic {magic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let n = be_u32(bytes, 4) as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Format(format!(
            "idx label body is {} bytes, header implies {n}",
            body.len()
        )));
    }
    Ok(body)
}

fn normalize_gray(pixels: &[u8], norm: &InputNorm) -> Result<Vec<f32>> {
    if norm.mean.len() != 1 || norm.std.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "mnist needs a 1-channel input normalization, got {}",
            norm.mean.len()
        )));
    }
    let (mean, std) = (norm.mean[0], norm.std[0]);
    Ok(pixels.iter().map(|&p| (p as f32 / 255.0 - mean) / std).collect())
}

/// Loads MNIST from explicit image and label idx files.
pub fn load_mnist(images: &Path, labels: &Path, norm: &InputNorm) -> Result<LabeledDataset> {
    let img_bytes = read_file(images)?;
    let lbl_bytes = read_file(labels)?;
    let (n, r, c, pixels) = parse_idx_images(&img_bytes)?;
    let lbls = parse_idx_labels(&lbl_bytes)?;
    if lbls.len() != n {
        return Err(Error::Format(format!(
            "{n} images but {} labels",
            lbls.len()
        )));
    }
    let data = normalize_gray(pixels, norm)?;
    let images = Tensor::new(vec![n, 1, r, c], data)?;
    LabeledDataset::new(images, lbls.iter().map(|&l| l as u32).collect(), 10)
        .map_err(|e| Error::Format(e.to_string()))
}

/// Label file conventionally paired with an idx image file.
pub fn mnist_labels_path(images: &Path) -> Result<PathBuf> {
    let name = images
        .file_name()
        .and_then(|n| n.to_str())
        .ok_or_else(|| Error::InvalidArgument(format!("bad path {}", images.display())))?;
    if !name.contains("images-idx3") {
        return Err(Error::InvalidArgument(format!(
            "cannot infer label file for {name}: expected '*images-idx3*'"
        )));
    }
    Ok(images.with_file_name(name.replace("images-idx3", "labels-idx1")))
}

fn parse_cifar(bytes: &[u8], out_pixels: &mut Vec<u8>, out_labels: &mut Vec<u32>) -> Result<()> {
    if bytes.is_empty() || !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::Format(format!(
            "cifar-10 batch of {} bytes is not a whole number of {CIFAR_RECORD}-byte records",
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        if rec[0] > 9 {
            return Err(Error::Format(format!("cifar-10 label {} out of range", rec[0])));
        }
        out_labels.push(rec[0] as u32);
        out_pixels.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// Loads CIFAR-10 from a binary batch file or a directory of `*.bin` batches
/// (read in name order).
pub fn load_cifar10(path: &Path, norm: &InputNorm) -> Result<LabeledDataset> {
    let files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                let n = p.to_string_lossy();
                n.ends_with(".bin") || n.ends_with(".bin.gz")
            })
            .collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    if files.is_empty() {
        return Err(Error::Format(format!(
            "no cifar-10 batches under {}",
            path.display()
        )));
    }
    let mut pixels = Vec::new();
    let mut labels = Vec::new();
    for f in &files {
        parse_cifar(&read_file(f)?, &mut pixels, &mut labels)?;
    }
    let n = labels.len();
    // CIFAR stores planar channels per record, which is already C,H,W.
    if norm.mean.len() != 3 || norm.std.len() != 3 {
        return Err(Error::InvalidArgument(
            "cifar-10 needs a 3-channel input normalization".into(),
        ));
    }
    let plane = 32 * 32;
    let data: Vec<f32> = pixels
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let c = (i / plane) % 3;
            (p as f32 / 255.0 - norm.mean[c]) / norm.std[c]
        })
        .collect();
    let images = Tensor::new(vec![n, 3, 32, 32], data)?;
    LabeledDataset::new(images, labels, 10)
}

/// Loads a dataset. For MNIST `path` is the image idx file and the label
/// file is inferred from its name.
pub fn load_dataset(path: &Path, format: DatasetFormat, norm: &InputNorm) -> Result<LabeledDataset> {
    match format {
        DatasetFormat::MnistIdx => load_mnist(path, &mnist_labels_path(path)?, norm),
        DatasetFormat::Cifar10Bin => load_cifar10(path, norm),
    }
}

/// Draws `n` distinct samples, deterministically in `seed`.
pub fn sample_calibration_subset(ds: &LabeledDataset, n: usize, seed: u64) -> Result<LabeledDataset> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "calibration subset of {n} requested from {} samples",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    Ok(ds.subset(&picked))
}
