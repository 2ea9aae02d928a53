//! Sampling and data-randomization primitives: Gumbel-Max component
//! selection, Gaussian reparameterization, mixup pair construction with
//! pseudo-labels, and stochastic image augmentation.
//!
//! Everything is driven by explicit seeded streams; noise enters training
//! tapes as constants, so recorded steps replay bit-identically.

use crate::autodiff::{Tape, Var};
use crate::error::{ExonError, Result};
use crate::networks::{EncodedVars, EncoderOutput, ModelParameters};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Log floor substituted for `ln(0)` when a mixture weight is exactly zero.
pub const LOG_FLOOR: f64 = -1e10;

/// Default softmax-relaxation temperature for the Gumbel-Max trick.
pub const DEFAULT_TEMPERATURE: f64 = 0.67;

fn sample_gumbel(rng: &mut ChaCha20Rng) -> f64 {
    // -ln(-ln(u)), u in (0, 1); clamp away from the endpoints
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

/// Relaxed one-hot component selection: `softmax((ln w + G) / temperature)`
/// with i.i.d. Gumbel noise `G`. Zero weights enter with their log clamped
/// at [`LOG_FLOOR`].
pub fn gumbel_max_select(
    weights: &Array1<f64>,
    temperature: f64,
    rng: &mut ChaCha20Rng,
) -> Result<Array1<f64>> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(ExonError::invalid("temperature must be positive"));
    }
    let sum: f64 = weights.sum();
    if weights.iter().any(|w| *w < 0.0) || (sum - 1.0).abs() > 1e-6 {
        return Err(ExonError::invalid("weights must form a simplex vector"));
    }
    let mut logits: Vec<f64> = weights
        .iter()
        .map(|w| (w.ln().max(LOG_FLOOR) + sample_gumbel(rng)) / temperature)
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for l in logits.iter_mut() {
        *l = (*l - max).exp();
        z += *l;
    }
    Ok(Array1::from_vec(logits.into_iter().map(|l| l / z).collect()))
}

/// Location-scale reparameterization: `mean + exp(log_variance / 2) * noise`.
pub fn reparameterize(
    mean: &Array1<f64>,
    log_variance: &Array1<f64>,
    noise: &Array1<f64>,
) -> Array1<f64> {
    assert_eq!(mean.len(), log_variance.len());
    assert_eq!(mean.len(), noise.len());
    mean + &(log_variance.mapv(|lv| (0.5 * lv).exp()) * noise)
}

/// One latent draw per input from the mixture posterior: a relaxed one-hot
/// over components via Gumbel-Max, convexly combining per-component
/// reparameterized draws.
pub fn sample_posterior(enc: &EncoderOutput, temperature: f64, seed: u64) -> Result<Array2<f64>> {
    enc.validate()?;
    let (n, k, d) = (enc.num_samples(), enc.num_components(), enc.latent_dim());
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut z = Array2::<f64>::zeros((n, d));
    for i in 0..n {
        let w = enc.mixture_weights.row(i).to_owned();
        let s = gumbel_max_select(&w, temperature, &mut rng)?;
        for kk in 0..k {
            for j in 0..d {
                let eps: f64 = rng.sample(StandardNormal);
                let sigma = (0.5 * enc.log_variances[[i, kk, j]]).exp();
                z[[i, j]] += s[kk] * (enc.means[[i, kk, j]] + sigma * eps);
            }
        }
    }
    Ok(z)
}

/// Tape-recorded posterior draw for a whole batch. Gumbel and Gaussian noise
/// are sampled here and enter the tape as constants; gradients flow to the
/// classifier (through the relaxed assignment) and to the encoder heads.
/// Returns `z: [N, d]`.
pub fn sample_posterior_on_tape(
    tape: &mut Tape,
    enc: &EncodedVars,
    temperature: f64,
    rng: &mut ChaCha20Rng,
) -> Var {
    let wk_shape = tape.shape(enc.log_weights).to_vec(); // [N, K]
    let mkd_shape = tape.shape(enc.means).to_vec(); // [N, K, d]
    let gumbel = ArrayD::from_shape_fn(IxDyn(&wk_shape), |_| sample_gumbel(rng));
    let gv = tape.constant(gumbel);
    let noisy = tape.add(enc.log_weights, gv);
    let scaled = tape.mul_scalar(noisy, 1.0 / temperature);
    let assign = tape.softmax_last(scaled); // [N, K]

    let eps = ArrayD::from_shape_fn(IxDyn(&mkd_shape), |_| rng.sample::<f64, _>(StandardNormal));
    let ev = tape.constant(eps);
    let half_lv = tape.mul_scalar(enc.log_variances, 0.5);
    let sigma = tape.exp(half_lv);
    let noise = tape.mul(sigma, ev);
    let draws = tape.add(enc.means, noise); // [N, K, d]
    let weighted = tape.scale_last(draws, assign);
    tape.sum_axis(weighted, 1)
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// What a dataset's stochastic augmentation does.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentSpec {
    /// Maximum absolute rotation in degrees (0 disables rotation).
    pub max_rotate_deg: f64,
    /// Reflection padding before a random crop back to the original size
    /// (0 disables cropping).
    pub crop_pad: usize,
    /// Random horizontal flip with probability 1/2.
    pub hflip: bool,
}

impl AugmentSpec {
    /// Random rotation (+-15 deg) and random cropping with 2px reflection
    /// padding.
    pub fn mnist() -> Self {
        AugmentSpec {
            max_rotate_deg: 15.0,
            crop_pad: 2,
            hflip: false,
        }
    }

    /// Random horizontal flip and random cropping with 4px reflection
    /// padding.
    pub fn cifar10() -> Self {
        AugmentSpec {
            max_rotate_deg: 0.0,
            crop_pad: 4,
            hflip: true,
        }
    }

    /// No-op augmentation.
    pub fn none() -> Self {
        AugmentSpec {
            max_rotate_deg: 0.0,
            crop_pad: 0,
            hflip: false,
        }
    }
}

/// One concrete augmentation outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub angle_deg: f64,
    /// Crop offsets into the padded image, each in `[0, 2*pad]`.
    pub offset_y: usize,
    pub offset_x: usize,
    pub pad: usize,
    pub flip: bool,
}

impl AugmentDraw {
    /// The draw that leaves the image unchanged.
    pub fn identity(pad: usize) -> Self {
        AugmentDraw {
            angle_deg: 0.0,
            offset_y: pad,
            offset_x: pad,
            pad,
            flip: false,
        }
    }

    pub fn sample(spec: &AugmentSpec, rng: &mut ChaCha20Rng) -> Self {
        AugmentDraw {
            angle_deg: if spec.max_rotate_deg > 0.0 {
                rng.random_range(-spec.max_rotate_deg..spec.max_rotate_deg)
            } else {
                0.0
            },
            offset_y: if spec.crop_pad > 0 {
                rng.random_range(0..=2 * spec.crop_pad)
            } else {
                0
            },
            offset_x: if spec.crop_pad > 0 {
                rng.random_range(0..=2 * spec.crop_pad)
            } else {
                0
            },
            pad: spec.crop_pad,
            flip: spec.hflip && rng.random::<bool>(),
        }
    }
}

/// Apply a sampled augmentation. `x` is one `[H, W, C]` image in `[-1, 1]`.
pub fn augment(x: &ArrayD<f64>, spec: &AugmentSpec, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    augment_with(x, &AugmentDraw::sample(spec, rng))
}

/// Deterministically apply one augmentation outcome: flip, then rotation,
/// then reflection-padded crop.
pub fn augment_with(x: &ArrayD<f64>, draw: &AugmentDraw) -> ArrayD<f64> {
    assert_eq!(x.ndim(), 3, "augment expects a single HWC image");
    let mut img = x.clone();
    if draw.flip {
        img = hflip(&img);
    }
    if draw.angle_deg != 0.0 {
        img = rotate_bilinear(&img, draw.angle_deg.to_radians());
    }
    if draw.pad > 0 {
        img = crop_reflect(&img, draw.pad, draw.offset_y, draw.offset_x);
    }
    img
}

fn hflip(x: &ArrayD<f64>) -> ArrayD<f64> {
    let mut out = x.clone();
    out.invert_axis(Axis(1));
    out.as_standard_layout().to_owned()
}

/// Rotate around the image center, bilinear sampling, background fill -1.
fn rotate_bilinear(x: &ArrayD<f64>, angle_rad: f64) -> ArrayD<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = angle_rad.sin_cos();
    let mut out = ArrayD::from_elem(IxDyn(&[h, w, c]), -1.0);
    for oy in 0..h {
        for ox in 0..w {
            // inverse map: source position that lands on (oy, ox)
            let dy = oy as f64 - cy;
            let dx = ox as f64 - cx;
            let sy = cy + dy * cos - dx * sin;
            let sx = cx + dy * sin + dx * cos;
            if sy < 0.0 || sy > (h - 1) as f64 || sx < 0.0 || sx > (w - 1) as f64 {
                continue;
            }
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ci in 0..c {
                let v00 = x[[y0, x0, ci]];
                let v01 = x[[y0, x1, ci]];
                let v10 = x[[y1, x0, ci]];
                let v11 = x[[y1, x1, ci]];
                out[[oy, ox, ci]] = v00 * (1.0 - fy) * (1.0 - fx)
                    + v01 * (1.0 - fy) * fx
                    + v10 * fy * (1.0 - fx)
                    + v11 * fy * fx;
            }
        }
    }
    out
}

/// Reflection-pad by `pad` (edge excluded) and crop back to the original
/// size at the given offsets.
fn crop_reflect(x: &ArrayD<f64>, pad: usize, off_y: usize, off_x: usize) -> ArrayD<f64> {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    assert!(off_y <= 2 * pad && off_x <= 2 * pad, "crop offset out of range");
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // mirror without repeating the border pixel
        while i < 0 || i >= n {
            if i < 0 {
                i = -i;
            }
            if i >= n {
                i = 2 * (n - 1) - i;
            }
        }
        i as usize
    };
    let mut out = ArrayD::zeros(IxDyn(&[h, w, c]));
    for oy in 0..h {
        for ox in 0..w {
            let sy = reflect(oy as isize + off_y as isize - pad as isize, h);
            let sx = reflect(ox as isize + off_x as isize - pad as isize, w);
            for ci in 0..c {
                out[[oy, ox, ci]] = x[[sy, sx, ci]];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Mixup pairs
// ---------------------------------------------------------------------------

/// How the interpolation coefficient is drawn.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RhoSampler {
    /// `rho ~ U(0, 1)` (default).
    Uniform,
    /// `rho ~ Beta(alpha, alpha)`.
    Beta(f64),
}

impl RhoSampler {
    pub fn sample(&self, rng: &mut ChaCha20Rng) -> f64 {
        match self {
            RhoSampler::Uniform => rng.random::<f64>(),
            RhoSampler::Beta(alpha) => {
                let dist = rand_distr::Beta::new(*alpha, *alpha).expect("valid alpha");
                rng.sample(dist)
            }
        }
    }
}

/// One interpolation pair: the two (augmented) endpoint images, their fixed
/// soft targets, the coefficient, and the interpolated image.
#[derive(Debug, Clone)]
pub struct MixupPair {
    pub x1: ArrayD<f64>,
    pub x2: ArrayD<f64>,
    pub rho: f64,
    pub y1_tilde: Array1<f64>,
    pub y2_tilde: Array1<f64>,
    pub x_tilde: ArrayD<f64>,
}

/// A random permutation of `0..n`.
pub fn permutation(n: usize, rng: &mut ChaCha20Rng) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx
}

/// Reorder the leading axis by `idx`.
pub fn apply_permutation(images: &ArrayD<f64>, idx: &[usize]) -> ArrayD<f64> {
    assert_eq!(images.shape()[0], idx.len());
    let mut out = images.clone();
    for (dst, &src) in idx.iter().enumerate() {
        out.index_axis_mut(Axis(0), dst)
            .assign(&images.index_axis(Axis(0), src));
    }
    out
}

/// Random within-batch pairing: returns a permuted copy of `images`.
pub fn permute_batch(images: &ArrayD<f64>, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
    let idx = permutation(images.shape()[0], rng);
    apply_permutation(images, &idx)
}

/// Build interpolation pairs for one batch.
///
/// For labeled batches (`labels1`/`labels2` given) the targets are one-hot
/// true labels. For unlabeled batches the target of each endpoint is the
/// snapshot classifier's eval-mode prediction on an independently augmented
/// view; targets are plain arrays with no gradient linkage. Both endpoints
/// are stochastically augmented before interpolation, with the pseudo-label
/// view drawn independently of the interpolated view.
#[allow(clippy::too_many_arguments)]
pub fn make_mixup_batch(
    batch1: &ArrayD<f64>,
    labels1: Option<&[usize]>,
    batch2: &ArrayD<f64>,
    labels2: Option<&[usize]>,
    rho_sampler: &RhoSampler,
    snapshot: &ModelParameters,
    augment_spec: &AugmentSpec,
    rng: &mut ChaCha20Rng,
) -> Result<Vec<MixupPair>> {
    let n = batch1.shape()[0];
    if n == 0 {
        return Err(ExonError::invalid("mixup batch must be nonempty"));
    }
    if batch2.shape() != batch1.shape() {
        return Err(ExonError::invalid("mixup batches must have equal shapes"));
    }
    if labels1.is_some() != labels2.is_some() {
        return Err(ExonError::invalid(
            "mixup batches must both be labeled or both unlabeled",
        ));
    }
    let k = snapshot.arch.num_classes;
    if let Some(l) = labels1 {
        if l.len() != n || labels2.unwrap().len() != n {
            return Err(ExonError::invalid("label count mismatch"));
        }
        if l.iter().chain(labels2.unwrap()).any(|y| *y >= k) {
            return Err(ExonError::invalid("label out of range"));
        }
    }

    let aug_batch = |src: &ArrayD<f64>, rng: &mut ChaCha20Rng| -> ArrayD<f64> {
        let mut out = src.clone();
        for i in 0..n {
            let img = src.index_axis(Axis(0), i).to_owned();
            out.index_axis_mut(Axis(0), i)
                .assign(&augment(&img, augment_spec, rng));
        }
        out
    };

    // fixed soft targets
    let (t1, t2): (Array2<f64>, Array2<f64>) = match labels1 {
        Some(l1) => {
            let onehot = |labels: &[usize]| {
                let mut t = Array2::zeros((n, k));
                for (i, &y) in labels.iter().enumerate() {
                    t[[i, y]] = 1.0;
                }
                t
            };
            (onehot(l1), onehot(labels2.unwrap()))
        }
        None => {
            let v1 = aug_batch(batch1, rng);
            let v2 = aug_batch(batch2, rng);
            (snapshot.classify(&v1)?, snapshot.classify(&v2)?)
        }
    };

    // independent views for the interpolation itself
    let i1 = aug_batch(batch1, rng);
    let i2 = aug_batch(batch2, rng);

    let mut pairs = Vec::with_capacity(n);
    for i in 0..n {
        let x1 = i1.index_axis(Axis(0), i).to_owned();
        let x2 = i2.index_axis(Axis(0), i).to_owned();
        let rho = rho_sampler.sample(rng);
        let x_tilde = &x1 * rho + &x2 * (1.0 - rho);
        pairs.push(MixupPair {
            x1,
            x2,
            rho,
            y1_tilde: t1.row(i).to_owned(),
            y2_tilde: t2.row(i).to_owned(),
            x_tilde,
        });
    }
    Ok(pairs)
}

/// Stack the interpolated images of a pair list into a `[N, H, W, C]` batch.
pub fn stack_mixed(pairs: &[MixupPair]) -> ArrayD<f64> {
    let mut shape = vec![pairs.len()];
    shape.extend_from_slice(pairs[0].x_tilde.shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (i, p) in pairs.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&p.x_tilde);
    }
    out
}

/// Targets of a pair list as `([N, K], [N, K], rho: [N])`.
pub fn pair_targets(pairs: &[MixupPair]) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let n = pairs.len();
    let k = pairs[0].y1_tilde.len();
    let mut t1 = Array2::zeros((n, k));
    let mut t2 = Array2::zeros((n, k));
    let mut rho = Array1::zeros(n);
    for (i, p) in pairs.iter().enumerate() {
        t1.row_mut(i).assign(&p.y1_tilde);
        t2.row_mut(i).assign(&p.y2_tilde);
        rho[i] = p.rho;
    }
    (t1, t2, rho)
}

/// One ancestral draw from a single prior component (interpolation
/// endpoints, perturbation demos).
pub fn sample_component(
    prior: &crate::priors::MixturePriorSpec,
    component: usize,
    rng: &mut ChaCha20Rng,
) -> Array1<f64> {
    let d = prior.latent_dim();
    let mut z = Array1::zeros(d);
    for j in 0..d {
        let eps: f64 = rng.sample(StandardNormal);
        z[j] = prior.centers()[[component, j]] + prior.variances()[[component, j]].sqrt() * eps;
    }
    z
}
