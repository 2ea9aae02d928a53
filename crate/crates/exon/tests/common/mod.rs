//! Helpers shared by the integration suites: synthetic class-structured
//! images for the toy architecture, and a writer for small MNIST-layout IDX
//! datasets used to exercise the data pipeline end to end.

#![allow(dead_code)]

use exon::data::{DatasetSplit, DatasetTag, ScalingRecord};
use ndarray::{ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use std::fs;
use std::path::Path;

/// One toy image (6x6x1) whose class determines its stripe orientation.
pub fn class_image(class: usize, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(&[6, 6, 1]), |ix| {
        let base = match class {
            0 => {
                if ix[0] % 2 == 0 {
                    0.8
                } else {
                    -0.8
                }
            }
            1 => {
                if ix[1] % 2 == 0 {
                    0.8
                } else {
                    -0.8
                }
            }
            _ => {
                if (ix[0] + ix[1]) % 2 == 0 {
                    0.8
                } else {
                    -0.8
                }
            }
        };
        f64::clamp(base + rng.random_range(-0.2..0.2), -1.0, 1.0)
    })
}

pub fn image_set(per_class: usize, seed: u64) -> (ArrayD<f64>, Vec<usize>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = per_class * 3;
    let mut images = ArrayD::zeros(IxDyn(&[n, 6, 6, 1]));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 3;
        images
            .index_axis_mut(Axis(0), i)
            .assign(&class_image(class, &mut rng));
        labels.push(class);
    }
    (images, labels)
}

pub fn synthetic_split(
    labeled_per_class: usize,
    unlabeled_total: usize,
    test_per_class: usize,
    seed: u64,
) -> DatasetSplit {
    let (labeled_images, labeled_labels) = image_set(labeled_per_class, seed);
    let (unlabeled_images, _) = image_set(unlabeled_total.div_ceil(3), seed + 1);
    let unlabeled_images = unlabeled_images
        .slice_axis(Axis(0), ndarray::Slice::from(0..unlabeled_total))
        .to_owned();
    let (test_images, test_labels) = image_set(test_per_class, seed + 2);
    DatasetSplit {
        tag: DatasetTag::Mnist,
        labeled_images,
        labeled_labels,
        unlabeled_images,
        test_images,
        test_labels,
        scaling: ScalingRecord {
            scale: 127.5,
            shift: 1.0,
        },
    }
}

fn write_idx_images(path: &Path, images: &[u8], n: usize) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0803u32.to_be_bytes());
    bytes.extend_from_slice(&(n as u32).to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    bytes.extend_from_slice(&28u32.to_be_bytes());
    bytes.extend_from_slice(images);
    fs::write(path, bytes).unwrap();
}

fn write_idx_labels(path: &Path, labels: &[u8]) {
    let mut bytes = Vec::new();
    bytes.extend_from_slice(&0x0000_0801u32.to_be_bytes());
    bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    bytes.extend_from_slice(labels);
    fs::write(path, bytes).unwrap();
}

/// A digit-like 28x28 pattern: a filled disc whose radius and offset depend
/// on the class, plus pixel noise.
fn digit_like(class: usize, rng: &mut ChaCha20Rng) -> Vec<u8> {
    let cy = 13.5 + ((class % 5) as f64 - 2.0) * 1.5;
    let cx = 13.5 + ((class / 5) as f64 - 0.5) * 3.0;
    let r = 4.0 + (class % 3) as f64 * 2.0;
    (0..28 * 28)
        .map(|p| {
            let y = (p / 28) as f64;
            let x = (p % 28) as f64;
            let d = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
            let v = if d < r {
                220.0 + rng.random_range(-30.0..30.0)
            } else {
                10.0 + rng.random_range(0.0..25.0)
            };
            f64::clamp(v, 0.0, 255.0) as u8
        })
        .collect()
}

/// Write a small MNIST-layout dataset (raw IDX files) under `dir`.
pub fn write_mnist_layout(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(n_train * 784);
    let mut train_labels = Vec::with_capacity(n_train);
    for i in 0..n_train {
        let class = i % 10;
        train.extend(digit_like(class, &mut rng));
        train_labels.push(class as u8);
    }
    let mut test = Vec::with_capacity(n_test * 784);
    let mut test_labels = Vec::with_capacity(n_test);
    for i in 0..n_test {
        let class = i % 10;
        test.extend(digit_like(class, &mut rng));
        test_labels.push(class as u8);
    }
    write_idx_images(&dir.join("train-images-idx3-ubyte"), &train, n_train);
    write_idx_labels(&dir.join("train-labels-idx1-ubyte"), &train_labels);
    write_idx_images(&dir.join("t10k-images-idx3-ubyte"), &test, n_test);
    write_idx_labels(&dir.join("t10k-labels-idx1-ubyte"), &test_labels);
}
