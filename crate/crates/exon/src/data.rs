//! Dataset ingestion and splitting.
//!
//! Two dataset families are supported: MNIST in IDX format (gzipped archives
//! verified against their published MD5 checksums, or already-extracted IDX
//! files validated structurally) and the CIFAR-10 binary version
//! (`data_batch_*.bin` / `test_batch.bin`, found directly under the data
//! root or inside `cifar-10-batches-bin/`).
//!
//! Pixels are scaled to `[-1, 1]`; labels are class indices. The
//! labeled/unlabeled split draws an equal number of labeled examples per
//! class, without replacement, from a dedicated seed.

use crate::error::{ExonError, Result};
use byteorder::{BigEndian, ReadBytesExt};
use flate2::read::GzDecoder;
use md5::{Digest, Md5};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

/// Which dataset a run works on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetTag {
    Mnist,
    Cifar10,
}

impl std::fmt::Display for DatasetTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetTag::Mnist => write!(f, "mnist"),
            DatasetTag::Cifar10 => write!(f, "cifar10"),
        }
    }
}

impl std::str::FromStr for DatasetTag {
    type Err = ExonError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DatasetTag::Mnist),
            "cifar10" | "cifar-10" => Ok(DatasetTag::Cifar10),
            other => Err(ExonError::invalid(format!("unknown dataset tag {other}"))),
        }
    }
}

impl DatasetTag {
    pub fn image_shape(&self) -> [usize; 3] {
        match self {
            DatasetTag::Mnist => [28, 28, 1],
            DatasetTag::Cifar10 => [32, 32, 3],
        }
    }

    pub fn num_classes(&self) -> usize {
        10
    }
}

/// Raw train/test sets, already scaled.
#[derive(Debug, Clone)]
pub struct RawDataset {
    pub tag: DatasetTag,
    /// `[N, H, W, C]` in `[-1, 1]`.
    pub train_images: ArrayD<f64>,
    pub train_labels: Vec<usize>,
    pub test_images: ArrayD<f64>,
    pub test_labels: Vec<usize>,
}

/// Affine pixel scaling applied at load time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScalingRecord {
    /// value = raw / scale - shift (raw in 0..=255)
    pub scale: f64,
    pub shift: f64,
}

impl ScalingRecord {
    fn standard() -> Self {
        ScalingRecord {
            scale: 127.5,
            shift: 1.0,
        }
    }
}

/// A semi-supervised split: class-balanced labeled set, label-stripped
/// unlabeled set, untouched test set.
#[derive(Debug, Clone)]
pub struct DatasetSplit {
    pub tag: DatasetTag,
    pub labeled_images: ArrayD<f64>,
    pub labeled_labels: Vec<usize>,
    pub unlabeled_images: ArrayD<f64>,
    pub test_images: ArrayD<f64>,
    pub test_labels: Vec<usize>,
    pub scaling: ScalingRecord,
}

const MNIST_FILES: [(&str, &str); 4] = [
    ("train-images-idx3-ubyte", "f68b3c2dcbeaaa9fbdd348bbdeb94873"),
    ("train-labels-idx1-ubyte", "d53e105ee54ea40749a09fcbcd1e9432"),
    ("t10k-images-idx3-ubyte", "9fb629c4189551a2d022fa330f9573f3"),
    ("t10k-labels-idx1-ubyte", "ec29112dd5afa0611ce80d1b7f02629c"),
];

fn md5_hex(bytes: &[u8]) -> String {
    let mut h = Md5::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn scale_pixel(raw: u8) -> f64 {
    raw as f64 / 127.5 - 1.0
}

/// Read one MNIST component, preferring the checksummed `.gz` archive.
fn read_mnist_member(data_root: &Path, stem: &str, expected_md5: &str) -> Result<Vec<u8>> {
    let gz = data_root.join(format!("{stem}.gz"));
    let raw = data_root.join(stem);
    if gz.exists() {
        let bytes = fs::read(&gz)?;
        let got = md5_hex(&bytes);
        if got != expected_md5 {
            return Err(ExonError::Dataset(format!(
                "checksum mismatch for {}: got md5 {got}, expected {expected_md5}",
                gz.display()
            )));
        }
        let mut out = Vec::new();
        GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| ExonError::Dataset(format!("cannot decompress {}: {e}", gz.display())))?;
        Ok(out)
    } else if raw.exists() {
        Ok(fs::read(&raw)?)
    } else {
        Err(ExonError::Dataset(format!(
            "missing {stem}(.gz) under {} (expected md5 of the archive: {expected_md5})",
            data_root.display()
        )))
    }
}

fn parse_idx_images(bytes: &[u8], name: &str) -> Result<ArrayD<f64>> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| ExonError::Dataset(format!("{name}: truncated header")))?;
    if magic != 0x0000_0803 {
        return Err(ExonError::Dataset(format!(
            "{name}: bad image magic {magic:#x}"
        )));
    }
    let n = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let h = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    let w = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    if r.len() != n * h * w {
        return Err(ExonError::Dataset(format!(
            "{name}: payload is {} bytes, header promises {}",
            r.len(),
            n * h * w
        )));
    }
    let mut out = ArrayD::zeros(IxDyn(&[n, h, w, 1]));
    {
        let slice = out.as_slice_mut().unwrap();
        for (dst, src) in slice.iter_mut().zip(r.iter()) {
            *dst = scale_pixel(*src);
        }
    }
    Ok(out)
}

fn parse_idx_labels(bytes: &[u8], name: &str) -> Result<Vec<usize>> {
    let mut r = bytes;
    let magic = r
        .read_u32::<BigEndian>()
        .map_err(|_| ExonError::Dataset(format!("{name}: truncated header")))?;
    if magic != 0x0000_0801 {
        return Err(ExonError::Dataset(format!(
            "{name}: bad label magic {magic:#x}"
        )));
    }
    let n = r.read_u32::<BigEndian>().unwrap_or(0) as usize;
    if r.len() != n {
        return Err(ExonError::Dataset(format!(
            "{name}: payload is {} bytes, header promises {n}",
            r.len()
        )));
    }
    let labels: Vec<usize> = r.iter().map(|b| *b as usize).collect();
    if labels.iter().any(|l| *l > 9) {
        return Err(ExonError::Dataset(format!("{name}: label out of range")));
    }
    Ok(labels)
}

fn load_mnist(data_root: &Path) -> Result<RawDataset> {
    let train_images = parse_idx_images(
        &read_mnist_member(data_root, MNIST_FILES[0].0, MNIST_FILES[0].1)?,
        MNIST_FILES[0].0,
    )?;
    let train_labels = parse_idx_labels(
        &read_mnist_member(data_root, MNIST_FILES[1].0, MNIST_FILES[1].1)?,
        MNIST_FILES[1].0,
    )?;
    let test_images = parse_idx_images(
        &read_mnist_member(data_root, MNIST_FILES[2].0, MNIST_FILES[2].1)?,
        MNIST_FILES[2].0,
    )?;
    let test_labels = parse_idx_labels(
        &read_mnist_member(data_root, MNIST_FILES[3].0, MNIST_FILES[3].1)?,
        MNIST_FILES[3].0,
    )?;
    if train_images.shape()[0] != train_labels.len() || test_images.shape()[0] != test_labels.len()
    {
        return Err(ExonError::Dataset(
            "mnist: image and label counts disagree".into(),
        ));
    }
    Ok(RawDataset {
        tag: DatasetTag::Mnist,
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

const CIFAR_RECORD: usize = 3073; // 1 label byte + 3072 pixel bytes
const CIFAR_PER_BATCH: usize = 10_000;

fn cifar_batch_path(data_root: &Path, name: &str) -> Option<PathBuf> {
    for candidate in [
        data_root.join(name),
        data_root.join("cifar-10-batches-bin").join(name),
    ] {
        if candidate.exists() {
            return Some(candidate);
        }
    }
    None
}

fn parse_cifar_batch(path: &Path, images: &mut Vec<u8>, labels: &mut Vec<usize>) -> Result<()> {
    let bytes = fs::read(path)?;
    if bytes.len() != CIFAR_RECORD * CIFAR_PER_BATCH {
        return Err(ExonError::Dataset(format!(
            "{}: expected {} bytes, got {}",
            path.display(),
            CIFAR_RECORD * CIFAR_PER_BATCH,
            bytes.len()
        )));
    }
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        let label = rec[0] as usize;
        if label > 9 {
            return Err(ExonError::Dataset(format!(
                "{}: label out of range",
                path.display()
            )));
        }
        labels.push(label);
        images.extend_from_slice(&rec[1..]);
    }
    Ok(())
}

/// CIFAR stores planes (RRR..GGG..BBB row-major); convert to HWC.
fn cifar_to_hwc(raw: &[u8], n: usize) -> ArrayD<f64> {
    let (h, w, c) = (32, 32, 3);
    let mut out = ArrayD::zeros(IxDyn(&[n, h, w, c]));
    let slice = out.as_slice_mut().unwrap();
    for i in 0..n {
        let rec = &raw[i * 3072..(i + 1) * 3072];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let src = rec[ch * 1024 + y * 32 + x];
                    slice[((i * h + y) * w + x) * c + ch] = scale_pixel(src);
                }
            }
        }
    }
    out
}

fn load_cifar10(data_root: &Path) -> Result<RawDataset> {
    let mut train_raw = Vec::with_capacity(5 * CIFAR_PER_BATCH * 3072);
    let mut train_labels = Vec::with_capacity(5 * CIFAR_PER_BATCH);
    for i in 1..=5 {
        let name = format!("data_batch_{i}.bin");
        let path = cifar_batch_path(data_root, &name).ok_or_else(|| {
            ExonError::Dataset(format!(
                "missing {name} under {} (extract cifar-10-binary.tar.gz, md5 c32a1d4ab5d03f1284b67883e8d87530)",
                data_root.display()
            ))
        })?;
        parse_cifar_batch(&path, &mut train_raw, &mut train_labels)?;
    }
    let mut test_raw = Vec::with_capacity(CIFAR_PER_BATCH * 3072);
    let mut test_labels = Vec::with_capacity(CIFAR_PER_BATCH);
    let test_path = cifar_batch_path(data_root, "test_batch.bin").ok_or_else(|| {
        ExonError::Dataset(format!(
            "missing test_batch.bin under {}",
            data_root.display()
        ))
    })?;
    parse_cifar_batch(&test_path, &mut test_raw, &mut test_labels)?;

    Ok(RawDataset {
        tag: DatasetTag::Cifar10,
        train_images: cifar_to_hwc(&train_raw, train_labels.len()),
        train_labels,
        test_images: cifar_to_hwc(&test_raw, test_labels.len()),
        test_labels,
    })
}

/// Load a dataset from `data_root`. Archives are checksum-verified; see the
/// module docs for the accepted layouts.
pub fn load_dataset(tag: DatasetTag, data_root: &Path) -> Result<RawDataset> {
    if !data_root.exists() {
        return Err(ExonError::Dataset(format!(
            "data root {} does not exist",
            data_root.display()
        )));
    }
    match tag {
        DatasetTag::Mnist => load_mnist(data_root),
        DatasetTag::Cifar10 => load_cifar10(data_root),
    }
}

/// Gather rows of the leading axis.
pub fn take_rows(images: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    let mut shape: Vec<usize> = images.shape().to_vec();
    shape[0] = idx.len();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (dst, &src) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst)
            .assign(&images.index_axis(Axis(0), src));
    }
    out
}

/// Class-balanced labeled/unlabeled split: exactly `n_labeled / K` labeled
/// examples per class, sampled without replacement with `seed`; the
/// remaining training images form the unlabeled set with labels stripped.
pub fn split_labeled(raw: &RawDataset, n_labeled: usize, seed: u64) -> Result<DatasetSplit> {
    let k = raw.tag.num_classes();
    if n_labeled == 0 || n_labeled % k != 0 {
        return Err(ExonError::invalid(format!(
            "n_labeled ({n_labeled}) must be a positive multiple of {k}"
        )));
    }
    let per_class = n_labeled / k;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &y) in raw.train_labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut labeled_idx = Vec::with_capacity(n_labeled);
    let mut chosen = vec![false; raw.train_labels.len()];
    for (class, members) in by_class.iter().enumerate() {
        if members.len() < per_class {
            return Err(ExonError::invalid(format!(
                "class {class} has only {} examples, need {per_class}",
                members.len()
            )));
        }
        let mut pool = members.clone();
        pool.shuffle(&mut rng);
        for &i in pool.iter().take(per_class) {
            labeled_idx.push(i);
            chosen[i] = true;
        }
    }
    labeled_idx.sort_unstable();
    let unlabeled_idx: Vec<usize> = (0..raw.train_labels.len())
        .filter(|i| !chosen[*i])
        .collect();

    Ok(DatasetSplit {
        tag: raw.tag,
        labeled_images: take_rows(&raw.train_images, &labeled_idx),
        labeled_labels: labeled_idx.iter().map(|i| raw.train_labels[*i]).collect(),
        unlabeled_images: take_rows(&raw.train_images, &unlabeled_idx),
        test_images: raw.test_images.clone(),
        test_labels: raw.test_labels.clone(),
        scaling: ScalingRecord::standard(),
    })
}
