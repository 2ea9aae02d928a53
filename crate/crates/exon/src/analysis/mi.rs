//! Mutual-information decomposition of the expected KL upper bound over a
//! finite population:
//!
//! `E[KLu] = I(x, y) + KL(w(y) || p(y)) + E_{w(y)}[I(x, z | y)] + E_{w(y)}[KL(q(z|y) || p(z|y))]`
//!
//! where `w(y)` is the classifier marginal over the population. The discrete
//! terms are exact; the latent-space terms integrate either by quadrature
//! (1-D latent spaces; spectrally accurate for Gaussian mixtures) or by
//! Monte Carlo with a reported standard error.

use crate::error::{ExonError, Result};
use crate::networks::EncoderOutput;
use crate::objective::{categorical_kl, kl_upper_bound_per_example, PROB_FLOOR};
use crate::priors::MixturePriorSpec;
use ndarray::Array1;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// How the latent-space integrals are evaluated.
#[derive(Debug, Clone, Copy)]
pub enum ZIntegration {
    /// Trapezoid rule on a shared grid spanning every component out to
    /// `half_width` standard deviations. Latent dimension must be 1.
    Quadrature { points: usize, half_width: f64 },
    /// Ancestral sampling with `samples` draws per term.
    MonteCarlo { samples: usize, seed: u64 },
}

/// The four decomposition terms and the directly computed left side.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MIDecomposition {
    pub mi_xy: f64,
    pub kl_marginal_y: f64,
    pub expected_mi_xz_given_y: f64,
    pub expected_kl_z_given_y: f64,
    pub lhs_expected_klu: f64,
    /// Standard error of the latent-term estimates (0 for quadrature).
    pub mc_standard_error: f64,
}

impl MIDecomposition {
    pub fn four_term_sum(&self) -> f64 {
        self.mi_xy + self.kl_marginal_y + self.expected_mi_xz_given_y + self.expected_kl_z_given_y
    }

    pub fn gap(&self) -> f64 {
        self.lhs_expected_klu - self.four_term_sum()
    }
}

fn log_gaussian_1d(z: f64, mu: f64, var: f64) -> f64 {
    let diff = z - mu;
    -0.5 * ((2.0 * PI * var).ln() + diff * diff / var)
}

fn log_gaussian(z: &[f64], mu: &[f64], var: &[f64]) -> f64 {
    let mut acc = 0.0;
    for j in 0..z.len() {
        acc += log_gaussian_1d(z[j], mu[j], var[j]);
    }
    acc
}

/// Decompose the expected KL upper bound of a posterior population against
/// its prior. The population is the empirical measure of the encoder
/// outputs (uniform over rows).
pub fn mi_decomposition(
    enc: &EncoderOutput,
    prior: &MixturePriorSpec,
    integration: ZIntegration,
) -> Result<MIDecomposition> {
    enc.validate()?;
    let (n, k, d) = (enc.num_samples(), enc.num_components(), enc.latent_dim());
    if k != prior.num_components() || d != prior.latent_dim() {
        return Err(ExonError::invalid("population and prior disagree on K or d"));
    }

    // exact discrete terms
    let (cat, gauss) = kl_upper_bound_per_example(enc, prior)?;
    let lhs = (cat.sum() + gauss.sum()) / n as f64;
    let mut w_bar = Array1::<f64>::zeros(k);
    for i in 0..n {
        w_bar += &enc.mixture_weights.row(i);
    }
    w_bar /= n as f64;
    let mi_xy = (0..n)
        .map(|i| categorical_kl(&enc.mixture_weights.row(i).to_owned(), &w_bar))
        .sum::<f64>()
        / n as f64;
    let kl_marginal_y = categorical_kl(&w_bar, prior.weights());

    // latent-space terms, conditioned per component with responsibilities
    // p(x_i | y=k) = w_ik / (n w_bar_k)
    let variances = enc.variances();
    let mut mi_xz = 0.0;
    let mut kl_z = 0.0;
    let mut se_sq = 0.0;
    match integration {
        ZIntegration::Quadrature { points, half_width } => {
            if d != 1 {
                return Err(ExonError::invalid(
                    "quadrature integration requires a 1-D latent space",
                ));
            }
            for kk in 0..k {
                if w_bar[kk] <= PROB_FLOOR {
                    continue;
                }
                // grid spanning every posterior component and the prior one
                let mut lo = prior.centers()[[kk, 0]] - half_width * prior.variances()[[kk, 0]].sqrt();
                let mut hi = prior.centers()[[kk, 0]] + half_width * prior.variances()[[kk, 0]].sqrt();
                for i in 0..n {
                    let s = variances[[i, kk, 0]].sqrt();
                    lo = lo.min(enc.means[[i, kk, 0]] - half_width * s);
                    hi = hi.max(enc.means[[i, kk, 0]] + half_width * s);
                }
                let h = (hi - lo) / (points - 1) as f64;
                let resp: Vec<f64> = (0..n)
                    .map(|i| enc.mixture_weights[[i, kk]] / (n as f64 * w_bar[kk]))
                    .collect();
                let mut mi_acc = 0.0;
                let mut klz_acc = 0.0;
                for g in 0..points {
                    let z = lo + g as f64 * h;
                    let weight = if g == 0 || g == points - 1 { 0.5 * h } else { h };
                    // q(z | y=k) as an exact mixture over the population
                    let mut qbar = 0.0;
                    let mut dens = vec![0.0; n];
                    for i in 0..n {
                        dens[i] =
                            log_gaussian_1d(z, enc.means[[i, kk, 0]], variances[[i, kk, 0]]).exp();
                        qbar += resp[i] * dens[i];
                    }
                    if qbar <= 0.0 {
                        continue;
                    }
                    let log_qbar = qbar.ln();
                    for i in 0..n {
                        if dens[i] > 0.0 && resp[i] > 0.0 {
                            mi_acc += weight * resp[i] * dens[i] * (dens[i].ln() - log_qbar);
                        }
                    }
                    let log_pk =
                        log_gaussian_1d(z, prior.centers()[[kk, 0]], prior.variances()[[kk, 0]]);
                    klz_acc += weight * qbar * (log_qbar - log_pk);
                }
                mi_xz += w_bar[kk] * mi_acc;
                kl_z += w_bar[kk] * klz_acc;
            }
        }
        ZIntegration::MonteCarlo { samples, seed } => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            for kk in 0..k {
                if w_bar[kk] <= PROB_FLOOR {
                    continue;
                }
                let resp: Vec<f64> = (0..n)
                    .map(|i| enc.mixture_weights[[i, kk]] / (n as f64 * w_bar[kk]))
                    .collect();
                let mut cdf = Vec::with_capacity(n);
                let mut acc = 0.0;
                for r in &resp {
                    acc += r;
                    cdf.push(acc);
                }
                let prior_mu: Vec<f64> = prior.center(kk).to_vec();
                let prior_var: Vec<f64> = prior.variance(kk).to_vec();
                let mut mi_sum = 0.0;
                let mut mi_sumsq = 0.0;
                let mut klz_sum = 0.0;
                let mut klz_sumsq = 0.0;
                let mut z = vec![0.0; d];
                for _ in 0..samples {
                    let u: f64 = rng.random();
                    let i = cdf.iter().position(|c| u <= *c).unwrap_or(n - 1);
                    let mu_i: Vec<f64> = (0..d).map(|j| enc.means[[i, kk, j]]).collect();
                    let var_i: Vec<f64> = (0..d).map(|j| variances[[i, kk, j]]).collect();
                    for j in 0..d {
                        let eps: f64 = rng.sample(StandardNormal);
                        z[j] = mu_i[j] + var_i[j].sqrt() * eps;
                    }
                    // log q(z | x_i, y=k) and log q(z | y=k)
                    let lqi = log_gaussian(&z, &mu_i, &var_i);
                    let mut qbar = 0.0;
                    for (ii, r) in resp.iter().enumerate() {
                        if *r <= 0.0 {
                            continue;
                        }
                        let mu: Vec<f64> = (0..d).map(|j| enc.means[[ii, kk, j]]).collect();
                        let var: Vec<f64> = (0..d).map(|j| variances[[ii, kk, j]]).collect();
                        qbar += r * log_gaussian(&z, &mu, &var).exp();
                    }
                    let log_qbar = qbar.max(f64::MIN_POSITIVE).ln();
                    let mi_term = lqi - log_qbar;
                    mi_sum += mi_term;
                    mi_sumsq += mi_term * mi_term;
                    // the same draw is distributed as q(z | y=k)
                    let klz_term = log_qbar - log_gaussian(&z, &prior_mu, &prior_var);
                    klz_sum += klz_term;
                    klz_sumsq += klz_term * klz_term;
                }
                let m = samples as f64;
                let mi_mean = mi_sum / m;
                let klz_mean = klz_sum / m;
                mi_xz += w_bar[kk] * mi_mean;
                kl_z += w_bar[kk] * klz_mean;
                let mi_var = (mi_sumsq / m - mi_mean * mi_mean).max(0.0) / m;
                let klz_var = (klz_sumsq / m - klz_mean * klz_mean).max(0.0) / m;
                se_sq += w_bar[kk] * w_bar[kk] * (mi_var + klz_var);
            }
        }
    }

    Ok(MIDecomposition {
        mi_xy,
        kl_marginal_y,
        expected_mi_xz_given_y: mi_xz,
        expected_kl_z_given_y: kl_z,
        lhs_expected_klu: lhs,
        mc_standard_error: se_sq.sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{Array2, Array3};

    /// A discrete toy population: `n` grid points, K=2, d=1.
    fn toy_population(n: usize, seed: u64) -> (EncoderOutput, MixturePriorSpec) {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let k = 2;
        let mut weights = Array2::zeros((n, k));
        let mut means = Array3::zeros((n, k, 1));
        let mut logvars = Array3::zeros((n, k, 1));
        for i in 0..n {
            let a: f64 = rng.random_range(0.1..0.9);
            weights[[i, 0]] = a;
            weights[[i, 1]] = 1.0 - a;
            for kk in 0..k {
                means[[i, kk, 0]] = rng.random_range(-2.0..2.0);
                logvars[[i, kk, 0]] = rng.random_range(-1.0..0.5);
            }
        }
        let enc = EncoderOutput {
            mixture_weights: weights,
            means,
            log_variances: logvars,
        };
        let prior = MixturePriorSpec::new(
            Array1::from_vec(vec![0.4, 0.6]),
            Array2::from_shape_vec((2, 1), vec![-1.0, 1.5]).unwrap(),
            Array2::from_shape_vec((2, 1), vec![1.2, 0.8]).unwrap(),
        )
        .unwrap();
        (enc, prior)
    }

    #[test]
    fn identity_holds_exhaustively_on_toy_model() {
        let (enc, prior) = toy_population(12, 3);
        let out = mi_decomposition(
            &enc,
            &prior,
            ZIntegration::Quadrature {
                points: 4001,
                half_width: 10.0,
            },
        )
        .unwrap();
        assert!(
            out.gap().abs() < 1e-6,
            "identity gap {} too large: {out:?}",
            out.gap()
        );
        assert!(out.mi_xy >= 0.0);
        assert!(out.kl_marginal_y >= 0.0);
        assert!(out.expected_mi_xz_given_y >= -1e-9);
        assert!(out.expected_kl_z_given_y >= -1e-9);
    }

    #[test]
    fn all_terms_vanish_when_population_matches_prior() {
        // classifier outputs identical to p(y) and encoder equal to the
        // prior for every x
        let n = 5;
        let prior = MixturePriorSpec::new(
            Array1::from_vec(vec![0.3, 0.7]),
            Array2::from_shape_vec((2, 1), vec![-1.0, 2.0]).unwrap(),
            Array2::from_shape_vec((2, 1), vec![0.5, 1.5]).unwrap(),
        )
        .unwrap();
        let mut weights = Array2::zeros((n, 2));
        let mut means = Array3::zeros((n, 2, 1));
        let mut logvars = Array3::zeros((n, 2, 1));
        for i in 0..n {
            for kk in 0..2 {
                weights[[i, kk]] = prior.weights()[kk];
                means[[i, kk, 0]] = prior.centers()[[kk, 0]];
                logvars[[i, kk, 0]] = prior.variances()[[kk, 0]].ln();
            }
        }
        let enc = EncoderOutput {
            mixture_weights: weights,
            means,
            log_variances: logvars,
        };
        let out = mi_decomposition(
            &enc,
            &prior,
            ZIntegration::Quadrature {
                points: 2001,
                half_width: 10.0,
            },
        )
        .unwrap();
        assert_abs_diff_eq!(out.lhs_expected_klu, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(out.mi_xy, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(out.kl_marginal_y, 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(out.expected_mi_xz_given_y, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(out.expected_kl_z_given_y, 0.0, epsilon = 1e-8);
    }

    #[test]
    fn monte_carlo_agrees_with_quadrature() {
        let (enc, prior) = toy_population(8, 5);
        let exact = mi_decomposition(
            &enc,
            &prior,
            ZIntegration::Quadrature {
                points: 4001,
                half_width: 10.0,
            },
        )
        .unwrap();
        let mc = mi_decomposition(
            &enc,
            &prior,
            ZIntegration::MonteCarlo {
                samples: 20_000,
                seed: 11,
            },
        )
        .unwrap();
        // discrete terms are identical
        assert_abs_diff_eq!(exact.mi_xy, mc.mi_xy, epsilon = 1e-12);
        assert_abs_diff_eq!(exact.kl_marginal_y, mc.kl_marginal_y, epsilon = 1e-12);
        // latent terms agree within 4 standard errors
        let z_exact = exact.expected_mi_xz_given_y + exact.expected_kl_z_given_y;
        let z_mc = mc.expected_mi_xz_given_y + mc.expected_kl_z_given_y;
        assert!(
            (z_exact - z_mc).abs() < 4.0 * mc.mc_standard_error + 1e-3,
            "quadrature {z_exact} vs MC {z_mc} (se {})",
            mc.mc_standard_error
        );
    }

    #[test]
    fn quadrature_requires_1d() {
        let prior = crate::priors::build_mnist_prior(2, 2.0).unwrap();
        let enc = EncoderOutput {
            mixture_weights: Array2::from_elem((3, 2), 0.5),
            means: Array3::zeros((3, 2, 2)),
            log_variances: Array3::zeros((3, 2, 2)),
        };
        assert!(mi_decomposition(
            &enc,
            &prior,
            ZIntegration::Quadrature {
                points: 100,
                half_width: 8.0
            }
        )
        .is_err());
    }
}
