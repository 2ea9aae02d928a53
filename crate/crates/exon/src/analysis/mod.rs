//! Post-hoc explainability and evaluation over a frozen checkpoint: the
//! V-nat statistic and activated latent subspaces, the variance-ratio bound
//! certificate, the mutual-information decomposition, evaluation metrics
//! (classification error, KL metric, negative SSIM), and the latent-space
//! studies (interpolation, subspace perturbation, decoder grids).
//!
//! Every operation is read-only over the model; each one has a pure core
//! working on [`EncoderOutput`] populations so the math is testable without
//! a trained network.

pub mod mi;
pub mod ssim;

pub use mi::{mi_decomposition, MIDecomposition, ZIntegration};
pub use ssim::{negative_ssim, ssim};

use crate::error::{ExonError, Result};
use crate::networks::{EncoderOutput, ModelParameters};
use crate::objective::kl_upper_bound_per_example;
use crate::priors::MixturePriorSpec;
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Encode a large image set in bounded-memory chunks.
pub fn encode_in_batches(
    model: &ModelParameters,
    images: &ArrayD<f64>,
    chunk: usize,
) -> Result<EncoderOutput> {
    let n = images.shape()[0];
    if n == 0 {
        return Err(ExonError::invalid("cannot encode an empty image set"));
    }
    let k = model.arch.num_classes;
    let d = model.arch.latent_dim;
    let mut weights = Array2::zeros((n, k));
    let mut means = ndarray::Array3::zeros((n, k, d));
    let mut logvars = ndarray::Array3::zeros((n, k, d));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let slice = images
            .slice_axis(Axis(0), ndarray::Slice::from(start..end))
            .to_owned();
        let enc = model.encode(&slice)?;
        weights
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&enc.mixture_weights);
        means
            .slice_mut(ndarray::s![start..end, .., ..])
            .assign(&enc.means);
        logvars
            .slice_mut(ndarray::s![start..end, .., ..])
            .assign(&enc.log_variances);
        start = end;
    }
    Ok(EncoderOutput {
        mixture_weights: weights,
        means,
        log_variances: logvars,
    })
}

/// Class probabilities for a large image set, chunked.
pub fn classify_in_batches(
    model: &ModelParameters,
    images: &ArrayD<f64>,
    chunk: usize,
) -> Result<Array2<f64>> {
    let n = images.shape()[0];
    let k = model.arch.num_classes;
    let mut probs = Array2::zeros((n, k));
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let slice = images
            .slice_axis(Axis(0), ndarray::Slice::from(start..end))
            .to_owned();
        probs
            .slice_mut(ndarray::s![start..end, ..])
            .assign(&model.classify(&slice)?);
        start = end;
    }
    Ok(probs)
}

// ---------------------------------------------------------------------------
// V-nat and activated subspaces
// ---------------------------------------------------------------------------

/// V-nat vector of class `k` over an encoded population restricted to the
/// rows with `labels[i] == k`: per coordinate,
/// `ln E_{x|y=k}[ prior_var / posterior_var(x) ]`.
pub fn vnat_from(
    enc: &EncoderOutput,
    prior: &MixturePriorSpec,
    labels: &[usize],
    class: usize,
) -> Result<Array1<f64>> {
    let (n, k, d) = (enc.num_samples(), enc.num_components(), enc.latent_dim());
    if labels.len() != n {
        return Err(ExonError::invalid("label count mismatch"));
    }
    if class >= k || k != prior.num_components() || d != prior.latent_dim() {
        return Err(ExonError::invalid("class index or prior shape invalid"));
    }
    let members: Vec<usize> = (0..n).filter(|i| labels[*i] == class).collect();
    if members.is_empty() {
        return Err(ExonError::invalid(format!(
            "no images of class {class} in the population"
        )));
    }
    let mut v = Array1::zeros(d);
    for j in 0..d {
        let varp = prior.variances()[[class, j]];
        let mean_ratio = members
            .iter()
            .map(|&i| varp / enc.log_variances[[i, class, j]].exp())
            .sum::<f64>()
            / members.len() as f64;
        v[j] = mean_ratio.ln();
    }
    Ok(v)
}

/// V-nat of one class from a model and labeled images.
pub fn vnat(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    images: &ArrayD<f64>,
    class: usize,
) -> Result<Array1<f64>> {
    if images.shape()[0] == 0 {
        return Err(ExonError::invalid("vnat needs at least one image"));
    }
    let enc = encode_in_batches(model, images, 256)?;
    let labels = vec![class; images.shape()[0]];
    vnat_from(&enc, prior, &labels, class)
}

/// Coordinates whose V-nat exceeds `delta`.
pub fn activated_subspace(vnat: &Array1<f64>, delta: f64) -> Vec<usize> {
    vnat.iter()
        .enumerate()
        .filter(|(_, v)| **v > delta)
        .map(|(j, _)| j)
        .collect()
}

// ---------------------------------------------------------------------------
// Variance-ratio bound certificate
// ---------------------------------------------------------------------------

/// The three-quantity certificate with empirical standard errors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundCertificate {
    pub lower: f64,
    pub mid: f64,
    pub upper: f64,
    pub se_lower: f64,
    pub se_mid: f64,
    pub se_upper: f64,
}

impl BoundCertificate {
    /// `lower <= mid <= upper` with a slack of `k_se` standard errors on
    /// each comparison.
    pub fn holds_within(&self, k_se: f64) -> bool {
        let eps = 1e-9;
        self.lower - self.mid <= k_se * (self.se_lower + self.se_mid) + eps
            && self.mid - self.upper <= k_se * (self.se_mid + self.se_upper) + eps
    }
}

/// Certificate with the population conditioned by classifier
/// responsibilities (the conditioning used in the bound's derivation; exact
/// on moment-consistent populations, no labels needed).
pub fn certificate_soft(enc: &EncoderOutput, prior: &MixturePriorSpec) -> Result<BoundCertificate> {
    let (n, k, d) = (enc.num_samples(), enc.num_components(), enc.latent_dim());
    if k != prior.num_components() || d != prior.latent_dim() {
        return Err(ExonError::invalid("population and prior disagree on K or d"));
    }
    let variances = enc.variances();
    let (_, gauss) = kl_upper_bound_per_example(enc, prior)?;
    let mid = gauss.sum() / n as f64;
    let se_mid = standard_error(gauss.as_slice().unwrap());

    let mut lower = d as f64 / 2.0;
    let mut upper = -(d as f64) / 2.0;
    for kk in 0..k {
        let mass: f64 = (0..n).map(|i| enc.mixture_weights[[i, kk]]).sum();
        if mass <= 0.0 {
            continue;
        }
        let wk = prior.weights()[kk];
        let mut e_q_over_p = 0.0;
        let mut e_p_over_q = 0.0;
        for i in 0..n {
            let r = enc.mixture_weights[[i, kk]] / mass;
            for j in 0..d {
                let vq = variances[[i, kk, j]];
                let vp = prior.variances()[[kk, j]];
                e_q_over_p += r * vq / vp;
                e_p_over_q += r * vp / vq;
            }
        }
        lower -= wk / 2.0 * e_q_over_p;
        upper += wk / 2.0 * e_p_over_q;
    }
    Ok(BoundCertificate {
        lower,
        mid,
        upper,
        se_lower: 0.0,
        se_mid,
        se_upper: 0.0,
    })
}

/// Certificate conditioned on true labels, with per-class standard errors
/// propagated into the bounds.
pub fn certificate_from_labels(
    enc: &EncoderOutput,
    prior: &MixturePriorSpec,
    labels: &[usize],
) -> Result<BoundCertificate> {
    let (n, k, d) = (enc.num_samples(), enc.num_components(), enc.latent_dim());
    if labels.len() != n {
        return Err(ExonError::invalid("label count mismatch"));
    }
    if k != prior.num_components() || d != prior.latent_dim() {
        return Err(ExonError::invalid("population and prior disagree on K or d"));
    }
    let variances = enc.variances();
    let (_, gauss) = kl_upper_bound_per_example(enc, prior)?;
    let mid = gauss.sum() / n as f64;
    let se_mid = standard_error(gauss.as_slice().unwrap());

    let mut lower = d as f64 / 2.0;
    let mut upper = -(d as f64) / 2.0;
    let mut var_lower = 0.0;
    let mut var_upper = 0.0;
    for kk in 0..k {
        let members: Vec<usize> = (0..n).filter(|i| labels[*i] == kk).collect();
        if members.is_empty() {
            return Err(ExonError::invalid(format!(
                "class {kk} is absent from the dataset"
            )));
        }
        let wk = prior.weights()[kk];
        // per-image sums over coordinates
        let a: Vec<f64> = members
            .iter()
            .map(|&i| {
                (0..d)
                    .map(|j| variances[[i, kk, j]] / prior.variances()[[kk, j]])
                    .sum()
            })
            .collect();
        let b: Vec<f64> = members
            .iter()
            .map(|&i| {
                (0..d)
                    .map(|j| prior.variances()[[kk, j]] / variances[[i, kk, j]])
                    .sum()
            })
            .collect();
        lower -= wk / 2.0 * mean(&a);
        upper += wk / 2.0 * mean(&b);
        var_lower += (wk / 2.0).powi(2) * standard_error(&a).powi(2);
        var_upper += (wk / 2.0).powi(2) * standard_error(&b).powi(2);
    }
    Ok(BoundCertificate {
        lower,
        mid,
        upper,
        se_lower: var_lower.sqrt(),
        se_mid,
        se_upper: var_upper.sqrt(),
    })
}

/// Certificate for a model over a labeled image set.
pub fn theorem1_certificate(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    images: &ArrayD<f64>,
    labels: &[usize],
) -> Result<BoundCertificate> {
    if images.shape()[0] == 0 {
        return Err(ExonError::invalid("certificate needs a nonempty dataset"));
    }
    let enc = encode_in_batches(model, images, 256)?;
    certificate_from_labels(&enc, prior, labels)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len().max(1) as f64
}

fn standard_error(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1) as f64;
    (var / n as f64).sqrt()
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// Mean closed-form KL upper bound of the posterior against the prior over
/// an image set.
pub fn kl_metric(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    images: &ArrayD<f64>,
) -> Result<f64> {
    if images.shape()[0] == 0 {
        return Err(ExonError::invalid("kl_metric needs a nonempty set"));
    }
    let enc = encode_in_batches(model, images, 256)?;
    kl_metric_from(&enc, prior)
}

/// Same metric from an already-encoded population.
pub fn kl_metric_from(enc: &EncoderOutput, prior: &MixturePriorSpec) -> Result<f64> {
    let (cat, gauss) = kl_upper_bound_per_example(enc, prior)?;
    Ok((cat.sum() + gauss.sum()) / cat.len() as f64)
}

/// Percent of images whose argmax class probability disagrees with the
/// label.
pub fn classification_error(
    model: &ModelParameters,
    images: &ArrayD<f64>,
    labels: &[usize],
) -> Result<f64> {
    let n = images.shape()[0];
    if n == 0 || labels.len() != n {
        return Err(ExonError::invalid("empty dataset or label count mismatch"));
    }
    let probs = classify_in_batches(model, images, 256)?;
    Ok(classification_error_from(&probs, labels))
}

pub fn classification_error_from(probs: &Array2<f64>, labels: &[usize]) -> f64 {
    let n = probs.nrows();
    let wrong = probs
        .rows()
        .into_iter()
        .zip(labels)
        .filter(|(row, &y)| {
            let arg = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            arg != y
        })
        .count();
    100.0 * wrong as f64 / n as f64
}

// ---------------------------------------------------------------------------
// Latent-space studies
// ---------------------------------------------------------------------------

/// Decode the straight line from `z_a` to `z_b` at `steps` equally spaced
/// points (endpoints included).
pub fn interpolate(
    model: &ModelParameters,
    z_a: &Array1<f64>,
    z_b: &Array1<f64>,
    steps: usize,
) -> Result<ArrayD<f64>> {
    let d = model.arch.latent_dim;
    if z_a.len() != d || z_b.len() != d {
        return Err(ExonError::invalid("interpolation endpoints have wrong dimension"));
    }
    if steps < 2 {
        return Err(ExonError::invalid("interpolation needs at least 2 steps"));
    }
    let mut z = Array2::zeros((steps, d));
    for s in 0..steps {
        let t = s as f64 / (steps - 1) as f64;
        for j in 0..d {
            z[[s, j]] = (1.0 - t) * z_a[j] + t * z_b[j];
        }
    }
    model.decode(&z)
}

/// Mean absolute frame-to-frame pixel change along an image sequence.
pub fn mean_frame_change(frames: &ArrayD<f64>) -> f64 {
    let n = frames.shape()[0];
    if n < 2 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 1..n {
        let a = frames.index_axis(Axis(0), i - 1);
        let b = frames.index_axis(Axis(0), i);
        acc += a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / a.len() as f64;
    }
    acc / (n - 1) as f64
}

/// Add uniform noise `U(-range, range)` to the listed coordinates only and
/// decode both latents. Returns (original image, perturbed image, noise).
pub fn perturb_subspace(
    model: &ModelParameters,
    z: &Array1<f64>,
    index_set: &[usize],
    noise_range: f64,
    seed: u64,
) -> Result<(ArrayD<f64>, ArrayD<f64>, Array1<f64>)> {
    let d = model.arch.latent_dim;
    if z.len() != d {
        return Err(ExonError::invalid("latent vector has wrong dimension"));
    }
    if index_set.iter().any(|j| *j >= d) {
        return Err(ExonError::invalid("perturbation index out of range"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut noise = Array1::zeros(d);
    let mut z_pert = z.clone();
    for &j in index_set {
        let e = rng.random_range(-noise_range..=noise_range);
        noise[j] = e;
        z_pert[j] += e;
    }
    let mut both = Array2::zeros((2, d));
    both.row_mut(0).assign(z);
    both.row_mut(1).assign(&z_pert);
    let imgs = model.decode(&both)?;
    let original = imgs.index_axis(Axis(0), 0).to_owned();
    let perturbed = imgs.index_axis(Axis(0), 1).to_owned();
    Ok((original, perturbed, noise))
}

/// A rectangular grid over a 2-D latent space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub nx: usize,
    pub y_min: f64,
    pub y_max: f64,
    pub ny: usize,
}

impl GridSpec {
    /// Symmetric square grid: `n x n` points on `[-extent, extent]^2`.
    pub fn square(extent: f64, n: usize) -> Self {
        GridSpec {
            x_min: -extent,
            x_max: extent,
            nx: n,
            y_min: -extent,
            y_max: extent,
            ny: n,
        }
    }

    /// Row-major grid points (y varies over rows, x over columns).
    pub fn points(&self) -> Vec<(f64, f64)> {
        let lin = |lo: f64, hi: f64, n: usize, i: usize| {
            if n == 1 {
                (lo + hi) * 0.5
            } else {
                lo + (hi - lo) * i as f64 / (n - 1) as f64
            }
        };
        let mut pts = Vec::with_capacity(self.nx * self.ny);
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                pts.push((
                    lin(self.x_min, self.x_max, self.nx, ix),
                    lin(self.y_min, self.y_max, self.ny, iy),
                ));
            }
        }
        pts
    }
}

/// Decode every grid point, row-major. The model must have a 2-D latent
/// space.
pub fn grid_generate(model: &ModelParameters, grid: &GridSpec) -> Result<ArrayD<f64>> {
    if model.arch.latent_dim != 2 {
        return Err(ExonError::invalid(format!(
            "grid generation needs a 2-D latent space, model has {}",
            model.arch.latent_dim
        )));
    }
    if grid.nx == 0 || grid.ny == 0 {
        return Err(ExonError::invalid("grid must be nonempty"));
    }
    let pts = grid.points();
    let mut z = Array2::zeros((pts.len(), 2));
    for (i, (x, y)) in pts.iter().enumerate() {
        z[[i, 0]] = *x;
        z[[i, 1]] = *y;
    }
    // decode in chunks to bound memory on big grids
    let shape = model.arch.input_shape;
    let mut out = ArrayD::zeros(IxDyn(&[pts.len(), shape[0], shape[1], shape[2]]));
    let chunk = 256;
    let mut start = 0;
    while start < pts.len() {
        let end = (start + chunk).min(pts.len());
        let part = model.decode(&z.slice(ndarray::s![start..end, ..]).to_owned())?;
        out.slice_mut(ndarray::s![start..end, .., .., ..]).assign(&part);
        start = end;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// V-nat report and correlations
// ---------------------------------------------------------------------------

/// Pearson correlation matrix between the rows of `vectors`.
pub fn pearson_rows(vectors: &Array2<f64>) -> Array2<f64> {
    let k = vectors.nrows();
    let mut out = Array2::zeros((k, k));
    for a in 0..k {
        for b in 0..k {
            if b < a {
                out[[a, b]] = out[[b, a]];
                continue;
            }
            if a == b {
                out[[a, b]] = 1.0;
                continue;
            }
            let u = vectors.row(a);
            let v = vectors.row(b);
            let mu = u.mean().unwrap();
            let mv = v.mean().unwrap();
            let mut cov = 0.0;
            let mut su = 0.0;
            let mut sv = 0.0;
            for j in 0..u.len() {
                let du = u[j] - mu;
                let dv = v[j] - mv;
                cov += du * dv;
                su += du * du;
                sv += dv * dv;
            }
            out[[a, b]] = if su == 0.0 || sv == 0.0 {
                if u == v {
                    1.0
                } else {
                    0.0
                }
            } else {
                cov / (su.sqrt() * sv.sqrt())
            };
        }
    }
    out
}

/// Correlation matrix between per-class V-nat vectors.
pub fn vnat_correlation(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    images: &ArrayD<f64>,
    labels: &[usize],
) -> Result<Array2<f64>> {
    let k = model.arch.num_classes;
    let d = model.arch.latent_dim;
    let enc = encode_in_batches(model, images, 256)?;
    let mut vectors = Array2::zeros((k, d));
    for class in 0..k {
        let v = vnat_from(&enc, prior, labels, class)?;
        vectors.row_mut(class).assign(&v);
    }
    Ok(pearson_rows(&vectors))
}

/// Everything the analyze command reports for one checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VNatReport {
    /// `K x d`, row k is the V-nat vector of class k.
    pub per_class_vnat: Vec<Vec<f64>>,
    pub delta: f64,
    /// Activated coordinate sets per class at `delta`.
    pub activated: Vec<Vec<usize>>,
    pub bound: BoundCertificate,
    pub sample_count: Vec<usize>,
}

impl VNatReport {
    /// Re-derive the activated sets from the stored vectors and check the
    /// certificate ordering (3 standard errors of slack).
    pub fn validate(&self) -> Result<()> {
        for (k, row) in self.per_class_vnat.iter().enumerate() {
            let expect: Vec<usize> = row
                .iter()
                .enumerate()
                .filter(|(_, v)| **v > self.delta)
                .map(|(j, _)| j)
                .collect();
            if expect != self.activated[k] {
                return Err(ExonError::invalid(format!(
                    "activated set of class {k} does not match its V-nat vector"
                )));
            }
        }
        if !self.bound.holds_within(3.0) {
            return Err(ExonError::invalid("bound certificate ordering violated"));
        }
        Ok(())
    }
}

/// Build the analyze-command report.
pub fn vnat_report(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    images: &ArrayD<f64>,
    labels: &[usize],
    delta: f64,
) -> Result<VNatReport> {
    let k = model.arch.num_classes;
    let enc = encode_in_batches(model, images, 256)?;
    let mut per_class = Vec::with_capacity(k);
    let mut activated = Vec::with_capacity(k);
    let mut counts = Vec::with_capacity(k);
    for class in 0..k {
        let v = vnat_from(&enc, prior, labels, class)?;
        activated.push(activated_subspace(&v, delta));
        per_class.push(v.to_vec());
        counts.push(labels.iter().filter(|y| **y == class).count());
    }
    let bound = certificate_from_labels(&enc, prior, labels)?;
    Ok(VNatReport {
        per_class_vnat: per_class,
        delta,
        activated,
        bound,
        sample_count: counts,
    })
}

#[cfg(test)]
mod tests;
