//! Single-scale structural similarity and the pairwise diversity score.
//!
//! SSIM uses the canonical constants: 11x11 Gaussian window with sigma 1.5,
//! stabilizers C1 = (0.01 L)^2 and C2 = (0.03 L)^2, computed per channel at
//! valid window positions and averaged. Inputs in `[-1, 1]` are mapped to
//! `[0, 1]` (L = 1) first.

use crate::error::{ExonError, Result};
use ndarray::{Array2, ArrayD, ArrayViewD, Axis};

const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gaussian_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filtering of one `[H, W]` plane.
fn filter_valid(plane: &Array2<f64>, kernel: &[f64; WINDOW]) -> Array2<f64> {
    let (h, w) = plane.dim();
    let oh = h - WINDOW + 1;
    let ow = w - WINDOW + 1;
    // rows first
    let mut tmp = Array2::<f64>::zeros((h, ow));
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for t in 0..WINDOW {
                acc += plane[[y, x + t]] * kernel[t];
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<f64>::zeros((oh, ow));
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for t in 0..WINDOW {
                acc += tmp[[y + t, x]] * kernel[t];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Per-image precomputation shared across pairs.
struct Filtered {
    planes: Vec<Array2<f64>>,
    mu: Vec<Array2<f64>>,
    sigma_sq: Vec<Array2<f64>>,
}

fn prepare(img: &ArrayViewD<'_, f64>, kernel: &[f64; WINDOW]) -> Filtered {
    let c = img.shape()[2];
    let mut planes = Vec::with_capacity(c);
    let mut mu = Vec::with_capacity(c);
    let mut sigma_sq = Vec::with_capacity(c);
    for ch in 0..c {
        // map [-1, 1] -> [0, 1]
        let plane = img
            .index_axis(Axis(2), ch)
            .mapv(|v| (v + 1.0) * 0.5)
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let m = filter_valid(&plane, kernel);
        let x2 = filter_valid(&plane.mapv(|v| v * v), kernel);
        let s2 = &x2 - &m.mapv(|v| v * v);
        planes.push(plane);
        mu.push(m);
        sigma_sq.push(s2);
    }
    Filtered { planes, mu, sigma_sq }
}

fn ssim_pair(a: &Filtered, b: &Filtered, kernel: &[f64; WINDOW]) -> f64 {
    let c = a.planes.len();
    let mut total = 0.0;
    for ch in 0..c {
        let cross = filter_valid(&(&a.planes[ch] * &b.planes[ch]), kernel);
        let sigma_ab = &cross - &(&a.mu[ch] * &b.mu[ch]);
        let (oh, ow) = a.mu[ch].dim();
        let mut sum = 0.0;
        for y in 0..oh {
            for x in 0..ow {
                let ma = a.mu[ch][[y, x]];
                let mb = b.mu[ch][[y, x]];
                let va = a.sigma_sq[ch][[y, x]];
                let vb = b.sigma_sq[ch][[y, x]];
                let vab = sigma_ab[[y, x]];
                let num = (2.0 * ma * mb + C1) * (2.0 * vab + C2);
                let den = (ma * ma + mb * mb + C1) * (va + vb + C2);
                sum += num / den;
            }
        }
        total += sum / (oh * ow) as f64;
    }
    total / c as f64
}

/// Mean SSIM between two single images `[H, W, C]` in `[-1, 1]`.
pub fn ssim(a: &ArrayViewD<'_, f64>, b: &ArrayViewD<'_, f64>) -> Result<f64> {
    if a.shape() != b.shape() || a.ndim() != 3 {
        return Err(ExonError::invalid("ssim expects two HWC images of equal shape"));
    }
    if a.shape()[0] < WINDOW || a.shape()[1] < WINDOW {
        return Err(ExonError::invalid(format!(
            "ssim needs images at least {WINDOW}px on each side"
        )));
    }
    let kernel = gaussian_kernel();
    let fa = prepare(a, &kernel);
    let fb = prepare(b, &kernel);
    Ok(ssim_pair(&fa, &fb, &kernel))
}

/// Diversity of an image set: `1/2 (1 - mean_{(i,j)} SSIM(x_i, x_j))` over
/// all ordered pairs including self-pairs.
pub fn negative_ssim(images: &ArrayD<f64>) -> Result<f64> {
    let n = images.shape()[0];
    if n < 2 {
        return Err(ExonError::invalid("negative_ssim needs at least 2 images"));
    }
    if images.ndim() != 4 {
        return Err(ExonError::invalid("negative_ssim expects [N, H, W, C]"));
    }
    if images.shape()[1] < WINDOW || images.shape()[2] < WINDOW {
        return Err(ExonError::invalid(format!(
            "negative_ssim needs images at least {WINDOW}px on each side"
        )));
    }
    let kernel = gaussian_kernel();
    let prepared: Vec<Filtered> = (0..n)
        .map(|i| prepare(&images.index_axis(Axis(0), i), &kernel))
        .collect();
    // self-pairs contribute exactly 1 each; unordered pairs counted twice
    use rayon::prelude::*;
    let pair_sum: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for j in (i + 1)..n {
                acc += ssim_pair(&prepared[i], &prepared[j], &kernel);
            }
            acc
        })
        .sum();
    let mean = (2.0 * pair_sum + n as f64) / (n * n) as f64;
    Ok(0.5 * (1.0 - mean))
}
