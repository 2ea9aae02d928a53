//! Customized Gaussian-mixture priors over the latent space.
//!
//! A [`MixturePriorSpec`] is the user-designed layout: per-class weights,
//! conceptual centers and diagonal variances. The two shipped layouts are
//! the 2-D circular arrangement for MNIST digits and the 256-D one-hot
//! arrangement for CIFAR-10. Specs are immutable once validated and are
//! (de)serialized through a human-editable TOML schema.

use crate::error::{ExonError, Result};
use ndarray::{Array1, Array2};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// A validated Gaussian-mixture prior: `p(z) = sum_k w_k N(z | m_k, diag{s_k^2})`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPriorSpec", into = "RawPriorSpec")]
pub struct MixturePriorSpec {
    num_components: usize,
    latent_dim: usize,
    weights: Array1<f64>,
    centers: Array2<f64>,
    variances: Array2<f64>,
}

/// Serialization shape with plain nested vectors; strictly validated on load.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawPriorSpec {
    num_components: usize,
    latent_dim: usize,
    weights: Vec<f64>,
    centers: Vec<Vec<f64>>,
    variances: Vec<Vec<f64>>,
}

impl TryFrom<RawPriorSpec> for MixturePriorSpec {
    type Error = ExonError;

    fn try_from(raw: RawPriorSpec) -> Result<Self> {
        let k = raw.num_components;
        let d = raw.latent_dim;
        let to_matrix = |rows: &[Vec<f64>], name: &str| -> Result<Array2<f64>> {
            if rows.len() != k {
                return Err(ExonError::invalid(format!(
                    "{name}: expected {k} rows, got {}",
                    rows.len()
                )));
            }
            let mut m = Array2::zeros((k, d));
            for (i, row) in rows.iter().enumerate() {
                if row.len() != d {
                    return Err(ExonError::invalid(format!(
                        "{name}[{i}]: expected {d} columns, got {}",
                        row.len()
                    )));
                }
                for (j, v) in row.iter().enumerate() {
                    m[[i, j]] = *v;
                }
            }
            Ok(m)
        };
        MixturePriorSpec::new(
            Array1::from_vec(raw.weights),
            to_matrix(&raw.centers, "centers")?,
            to_matrix(&raw.variances, "variances")?,
        )
    }
}

impl From<MixturePriorSpec> for RawPriorSpec {
    fn from(spec: MixturePriorSpec) -> Self {
        RawPriorSpec {
            num_components: spec.num_components,
            latent_dim: spec.latent_dim,
            weights: spec.weights.to_vec(),
            centers: spec.centers.rows().into_iter().map(|r| r.to_vec()).collect(),
            variances: spec
                .variances
                .rows()
                .into_iter()
                .map(|r| r.to_vec())
                .collect(),
        }
    }
}

impl MixturePriorSpec {
    /// Validate and construct a spec. Weights must be strictly positive and
    /// sum to 1 within 1e-9; variances strictly positive; shapes consistent.
    pub fn new(weights: Array1<f64>, centers: Array2<f64>, variances: Array2<f64>) -> Result<Self> {
        let k = weights.len();
        if k == 0 {
            return Err(ExonError::invalid("prior needs at least one component"));
        }
        let d = centers.ncols();
        if d == 0 {
            return Err(ExonError::invalid("latent dimension must be positive"));
        }
        if centers.nrows() != k || variances.nrows() != k || variances.ncols() != d {
            return Err(ExonError::invalid(format!(
                "inconsistent shapes: weights {k}, centers {:?}, variances {:?}",
                centers.shape(),
                variances.shape()
            )));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(ExonError::invalid("weights must be strictly positive"));
        }
        let sum: f64 = weights.sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(ExonError::invalid(format!(
                "weights must sum to 1 within 1e-9 (got {sum})"
            )));
        }
        if variances.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(ExonError::invalid("variances must be strictly positive"));
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(ExonError::invalid("centers must be finite"));
        }
        Ok(MixturePriorSpec {
            num_components: k,
            latent_dim: d,
            weights,
            centers,
            variances,
        })
    }

    pub fn num_components(&self) -> usize {
        self.num_components
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }

    pub fn weights(&self) -> &Array1<f64> {
        &self.weights
    }

    pub fn centers(&self) -> &Array2<f64> {
        &self.centers
    }

    pub fn variances(&self) -> &Array2<f64> {
        &self.variances
    }

    pub fn center(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.centers.row(k)
    }

    pub fn variance(&self, k: usize) -> ndarray::ArrayView1<'_, f64> {
        self.variances.row(k)
    }

    /// Load from a TOML file with strict schema validation.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| ExonError::Config(format!("prior spec: {e}")))
    }

    /// Serialize to canonical TOML text.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("prior spec serializes")
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }
}

/// Circular layout for digit classes: centers equally spaced on a circle of
/// radius `base_gap / sin(pi/K)`, component k (0-based class c = k-1) at
/// angle `pi/K * (2k - 1)`, counterclockwise from 3 o'clock; shared variance
/// (4, 4) and uniform weights.
pub fn build_mnist_prior(num_classes: usize, base_gap: f64) -> Result<MixturePriorSpec> {
    if num_classes == 0 {
        return Err(ExonError::invalid("num_classes must be positive"));
    }
    if !(base_gap.is_finite() && base_gap > 0.0) {
        return Err(ExonError::invalid("base_gap must be a positive real"));
    }
    let k = num_classes;
    let r = base_gap / (PI / k as f64).sin();
    let mut centers = Array2::zeros((k, 2));
    for c in 0..k {
        // class c maps to component k = c + 1
        let angle = PI / k as f64 * (2.0 * (c + 1) as f64 - 1.0);
        centers[[c, 0]] = r * angle.cos();
        centers[[c, 1]] = r * angle.sin();
    }
    let variances = Array2::from_elem((k, 2), 4.0);
    let weights = Array1::from_elem(k, 1.0 / k as f64);
    MixturePriorSpec::new(weights, centers, variances)
}

/// 256-D layout for CIFAR-10: center k is the one-hot vector of its class on
/// the first 10 coordinates, zero elsewhere; every component shares the
/// variance `diag{0.1 x10, 1.0 x246}`; uniform weights.
pub fn build_cifar_prior() -> MixturePriorSpec {
    let (k, d, label_dims) = (10, 256, 10);
    let mut centers = Array2::zeros((k, d));
    for c in 0..k {
        centers[[c, c]] = 1.0;
    }
    let mut variances = Array2::from_elem((k, d), 1.0);
    for c in 0..k {
        for j in 0..label_dims {
            variances[[c, j]] = 0.1;
        }
    }
    let weights = Array1::from_elem(k, 1.0 / k as f64);
    MixturePriorSpec::new(weights, centers, variances).expect("static layout is valid")
}

/// Log density of one Gaussian component `N(z | m, diag{s2})`.
fn component_log_density(z: &[f64], center: &[f64], variance: &[f64]) -> f64 {
    let mut acc = 0.0;
    for ((zv, m), v) in z.iter().zip(center).zip(variance) {
        let diff = zv - m;
        acc += -0.5 * ((2.0 * PI * v).ln() + diff * diff / v);
    }
    acc
}

/// `log p(z)` via a numerically stable log-sum-exp over components.
pub fn prior_log_density(spec: &MixturePriorSpec, z: &[f64]) -> Result<f64> {
    if z.len() != spec.latent_dim {
        return Err(ExonError::invalid(format!(
            "z has dimension {}, prior expects {}",
            z.len(),
            spec.latent_dim
        )));
    }
    let mut terms = Vec::with_capacity(spec.num_components);
    for k in 0..spec.num_components {
        let lw = spec.weights[k].ln();
        let ld = component_log_density(
            z,
            spec.centers.row(k).to_slice().unwrap(),
            spec.variances.row(k).to_slice().unwrap(),
        );
        terms.push(lw + ld);
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln())
}

/// Ancestral samples from the prior: component by weight, then the component
/// Gaussian. Returns the latent vectors and the sampled component indices.
pub fn sample_prior(
    spec: &MixturePriorSpec,
    n: usize,
    seed: u64,
) -> Result<(Array2<f64>, Vec<usize>)> {
    if n == 0 {
        return Err(ExonError::invalid("sample count must be >= 1"));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let d = spec.latent_dim;
    let mut z = Array2::zeros((n, d));
    let mut labels = Vec::with_capacity(n);
    // cumulative weights for inverse-CDF component selection
    let mut cdf = Vec::with_capacity(spec.num_components);
    let mut acc = 0.0;
    for w in spec.weights.iter() {
        acc += w;
        cdf.push(acc);
    }
    for i in 0..n {
        let u: f64 = rng.random();
        let k = cdf.iter().position(|c| u <= *c).unwrap_or(spec.num_components - 1);
        labels.push(k);
        for j in 0..d {
            let eps: f64 = rng.sample(StandardNormal);
            z[[i, j]] = spec.centers[[k, j]] + spec.variances[[k, j]].sqrt() * eps;
        }
    }
    Ok((z, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn mnist_prior_matches_designed_layout() {
        let spec = build_mnist_prior(10, 4.0).unwrap();
        assert_eq!(spec.num_components(), 10);
        assert_eq!(spec.latent_dim(), 2);
        // component for class 0 (paper k=1) sits at angle pi/10, radius 4/sin(pi/10)
        let r = 4.0 / (PI / 10.0).sin();
        assert_abs_diff_eq!(r, 12.94427190999916, epsilon = 1e-9);
        assert_abs_diff_eq!(spec.centers()[[0, 0]], 12.310734148701014, epsilon = 1e-9);
        assert_abs_diff_eq!(spec.centers()[[0, 1]], 4.0, epsilon = 1e-9);
        // all variances (4,4), all weights 0.1
        assert!(spec.variances().iter().all(|v| *v == 4.0));
        assert!(spec.weights().iter().all(|w| (*w - 0.1).abs() < 1e-15));
        // rotational symmetry: centers sum to zero
        let sum = spec.centers().sum_axis(ndarray::Axis(0));
        assert_abs_diff_eq!(sum[0], 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sum[1], 0.0, epsilon = 1e-9);
    }

    #[test]
    fn mnist_prior_centers_lie_on_a_circle() {
        let spec = build_mnist_prior(10, 4.0).unwrap();
        let r0 = spec.center(0).mapv(|v| v * v).sum().sqrt();
        for k in 1..10 {
            let r = spec.center(k).mapv(|v| v * v).sum().sqrt();
            assert!((r - r0).abs() < 1e-9);
        }
        // adjacent centers are base_gap * 2cos(pi/2 - pi/K)... the designed
        // chord for the generalized layout: |m1 - m0| = 2 r sin(pi/K)
        let gap = (&spec.center(1) - &spec.center(0)).mapv(|v| v * v).sum().sqrt();
        assert_abs_diff_eq!(gap, 2.0 * 4.0, epsilon = 1e-9);
    }

    #[test]
    fn mnist_prior_rejects_bad_gap() {
        assert!(build_mnist_prior(10, 0.0).is_err());
        assert!(build_mnist_prior(10, -1.0).is_err());
        assert!(build_mnist_prior(10, f64::NAN).is_err());
    }

    #[test]
    fn cifar_prior_is_one_hot_with_shared_covariance() {
        let spec = build_cifar_prior();
        assert_eq!(spec.num_components(), 10);
        assert_eq!(spec.latent_dim(), 256);
        // class 3 center: single nonzero entry, value 1, at index 2 (0-based fourth class is index 3)
        let c3 = spec.center(3);
        let nonzero: Vec<usize> = (0..256).filter(|j| c3[*j] != 0.0).collect();
        assert_eq!(nonzero, vec![3]);
        assert_eq!(c3[3], 1.0);
        // the spec example indexes classes from 1: "class 3" -> component 2
        let c2 = spec.center(2);
        let nonzero: Vec<usize> = (0..256).filter(|j| c2[*j] != 0.0).collect();
        assert_eq!(nonzero, vec![2]);
        // variance sums to 10*0.1 + 246*1 = 247
        for k in 0..10 {
            assert_abs_diff_eq!(spec.variance(k).sum(), 247.0, epsilon = 1e-12);
        }
        // identical across components
        for k in 1..10 {
            assert_eq!(spec.variance(k), spec.variance(0));
        }
    }

    #[test]
    fn log_density_standard_normal_at_mode() {
        let spec = MixturePriorSpec::new(
            Array1::from_vec(vec![1.0]),
            Array2::zeros((1, 1)),
            Array2::ones((1, 1)),
        )
        .unwrap();
        let ld = prior_log_density(&spec, &[0.0]).unwrap();
        assert_abs_diff_eq!(ld, -0.5 * (2.0 * PI).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(ld, -0.9189385332046727, epsilon = 1e-9);
    }

    #[test]
    fn log_density_symmetric_two_component_mixture() {
        let c = 1.7;
        let spec = MixturePriorSpec::new(
            Array1::from_vec(vec![0.5, 0.5]),
            Array2::from_shape_vec((2, 1), vec![-c, c]).unwrap(),
            Array2::ones((2, 1)),
        )
        .unwrap();
        let ld = prior_log_density(&spec, &[0.0]).unwrap();
        // equals the log of a single unit Gaussian evaluated at distance c
        let single = -0.5 * (2.0 * PI).ln() - 0.5 * c * c;
        assert_abs_diff_eq!(ld, single, epsilon = 1e-12);
    }

    #[test]
    fn log_density_matches_brute_force_sum() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        for _ in 0..20 {
            let k = 3;
            let d = 2;
            let weights = {
                let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
                let s: f64 = raw.iter().sum();
                Array1::from_vec(raw.into_iter().map(|w| w / s).collect())
            };
            let centers =
                Array2::from_shape_fn((k, d), |_| rng.random_range(-3.0..3.0));
            let variances =
                Array2::from_shape_fn((k, d), |_| rng.random_range(0.2..2.5));
            let spec =
                MixturePriorSpec::new(weights.clone(), centers.clone(), variances.clone()).unwrap();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-5.0..5.0)).collect();
            // brute force: direct sum of component densities
            let mut direct = 0.0;
            for kk in 0..k {
                let mut dens = weights[kk];
                for j in 0..d {
                    let diff = z[j] - centers[[kk, j]];
                    dens *= (-0.5 * diff * diff / variances[[kk, j]]).exp()
                        / (2.0 * PI * variances[[kk, j]]).sqrt();
                }
                direct += dens;
            }
            let ld = prior_log_density(&spec, &z).unwrap();
            assert_abs_diff_eq!(ld, direct.ln(), epsilon = 1e-12);
        }
    }

    #[test]
    fn log_density_rejects_dimension_mismatch() {
        let spec = build_mnist_prior(10, 4.0).unwrap();
        assert!(matches!(
            prior_log_density(&spec, &[0.0, 0.0, 0.0]),
            Err(ExonError::InvalidArgument(_))
        ));
    }

    #[test]
    fn sampler_matches_component_moments() {
        let spec = build_mnist_prior(10, 4.0).unwrap();
        let n = 10_000;
        let (z, labels) = sample_prior(&spec, n, 1234).unwrap();
        let mut counts = vec![0usize; 10];
        let mut sums = Array2::<f64>::zeros((10, 2));
        for (i, &k) in labels.iter().enumerate() {
            counts[k] += 1;
            sums[[k, 0]] += z[[i, 0]];
            sums[[k, 1]] += z[[i, 1]];
        }
        for k in 0..10 {
            let nk = counts[k] as f64;
            assert!(counts[k] > 700, "component {k} undersampled: {}", counts[k]);
            for j in 0..2 {
                let mean = sums[[k, j]] / nk;
                let tol = 3.0 * 2.0 / nk.sqrt(); // 3 * s / sqrt(nk), s = 2
                assert!(
                    (mean - spec.centers()[[k, j]]).abs() < tol,
                    "component {k} dim {j}: {mean} vs {}",
                    spec.centers()[[k, j]]
                );
            }
        }
    }

    #[test]
    fn sampler_degenerate_cases() {
        let single = MixturePriorSpec::new(
            Array1::from_vec(vec![1.0]),
            Array2::zeros((1, 3)),
            Array2::ones((1, 3)),
        )
        .unwrap();
        let (_, labels) = sample_prior(&single, 50, 7).unwrap();
        assert!(labels.iter().all(|&k| k == 0));

        // weights concentrated on the first component (validation requires
        // strictly positive weights, so use epsilon mass elsewhere)
        let eps = 1e-12;
        let spec = MixturePriorSpec::new(
            Array1::from_vec(vec![1.0 - 2.0 * eps, eps, eps]),
            Array2::zeros((3, 1)),
            Array2::ones((3, 1)),
        )
        .unwrap();
        let (_, labels) = sample_prior(&spec, 1000, 99).unwrap();
        assert!(labels.iter().all(|&k| k == 0));
        assert!(sample_prior(&spec, 0, 1).is_err());
    }

    #[test]
    fn validation_rejects_malformed_specs() {
        // weights not summing to one
        assert!(MixturePriorSpec::new(
            Array1::from_vec(vec![0.5, 0.4]),
            Array2::zeros((2, 1)),
            Array2::ones((2, 1)),
        )
        .is_err());
        // nonpositive variance
        assert!(MixturePriorSpec::new(
            Array1::from_vec(vec![0.5, 0.5]),
            Array2::zeros((2, 1)),
            Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap(),
        )
        .is_err());
        // shape mismatch
        assert!(MixturePriorSpec::new(
            Array1::from_vec(vec![0.5, 0.5]),
            Array2::zeros((3, 1)),
            Array2::ones((2, 1)),
        )
        .is_err());
        // zero weight
        assert!(MixturePriorSpec::new(
            Array1::from_vec(vec![1.0, 0.0]),
            Array2::zeros((2, 1)),
            Array2::ones((2, 1)),
        )
        .is_err());
    }

    #[test]
    fn toml_round_trip_is_bit_identical() {
        let spec = build_mnist_prior(10, 4.0).unwrap();
        let text = spec.to_toml();
        let back: MixturePriorSpec = toml::from_str(&text).unwrap();
        assert_eq!(spec, back);
        // canonical decimal text form is stable across a second round trip
        assert_eq!(text, back.to_toml());
    }

    #[test]
    fn toml_rejects_unknown_fields_and_bad_shapes() {
        let bad = "num_components = 1\nlatent_dim = 1\nweights = [1.0]\ncenters = [[0.0]]\nvariances = [[1.0]]\nextra = 3\n";
        assert!(toml::from_str::<MixturePriorSpec>(bad).is_err());
        let bad_shape = "num_components = 2\nlatent_dim = 1\nweights = [0.5, 0.5]\ncenters = [[0.0]]\nvariances = [[1.0], [1.0]]\n";
        assert!(toml::from_str::<MixturePriorSpec>(bad_shape).is_err());
    }

    proptest! {
        #[test]
        fn prop_log_density_matches_brute_force(
            k in 1usize..=5,
            d in 1usize..=4,
            seed in 0u64..5000,
        ) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let weights = Array1::from_vec(raw.into_iter().map(|w| w / s).collect());
            let centers = Array2::from_shape_fn((k, d), |_| rng.random_range(-8.0..8.0));
            // variances >= 1 keep the direct (non-log-space) oracle sum away
            // from f64 underflow at the extreme |z - m| this generator allows
            let variances = Array2::from_shape_fn((k, d), |_| rng.random_range(1.0..4.0));
            let spec = MixturePriorSpec::new(weights.clone(), centers.clone(), variances.clone()).unwrap();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-10.0..10.0)).collect();

            let mut direct = 0.0_f64;
            for kk in 0..k {
                let mut dens = weights[kk];
                for j in 0..d {
                    let diff = z[j] - centers[[kk, j]];
                    dens *= (-0.5 * diff * diff / variances[[kk, j]]).exp()
                        / (2.0 * PI * variances[[kk, j]]).sqrt();
                }
                direct += dens;
            }
            let ld = prior_log_density(&spec, &z).unwrap();
            prop_assert!((ld - direct.ln()).abs() < 1e-10);
        }

        #[test]
        fn prop_generalized_circle_layout(k in 2usize..=16, gap in 0.5f64..10.0) {
            let spec = build_mnist_prior(k, gap).unwrap();
            let r = gap / (PI / k as f64).sin();
            for c in 0..k {
                let rc = spec.center(c).mapv(|v| v * v).sum().sqrt();
                prop_assert!((rc - r).abs() < 1e-9);
            }
        }
    }
}
