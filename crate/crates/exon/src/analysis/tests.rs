use super::*;
use crate::networks::ArchitectureSpec;
use approx::assert_abs_diff_eq;
use ndarray::Array3;

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn random_simplex(k: usize, rng: &mut ChaCha20Rng) -> Array1<f64> {
    let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.05..1.0)).collect();
    let s: f64 = raw.iter().sum();
    Array1::from_vec(raw.into_iter().map(|v| v / s).collect())
}

/// Population whose prior is derived from its own aggregated moments, the
/// regime in which the variance-ratio sandwich is exact.
pub(super) fn consistent_population(
    seed: u64,
    n: usize,
    k: usize,
    d: usize,
) -> (EncoderOutput, MixturePriorSpec) {
    let mut r = rng(seed);
    let mut weights = Array2::zeros((n, k));
    let mut means = Array3::zeros((n, k, d));
    let mut logvars = Array3::zeros((n, k, d));
    for i in 0..n {
        weights.row_mut(i).assign(&random_simplex(k, &mut r));
        for kk in 0..k {
            for j in 0..d {
                means[[i, kk, j]] = r.random_range(-2.0..2.0);
                logvars[[i, kk, j]] = r.random_range(-1.5..1.0);
            }
        }
    }
    // prior weights: classifier marginal
    let mut w_bar = Array1::<f64>::zeros(k);
    for i in 0..n {
        w_bar += &weights.row(i);
    }
    w_bar /= n as f64;
    // prior component moments: responsibility-weighted aggregation
    let mut centers = Array2::zeros((k, d));
    let mut prior_vars = Array2::zeros((k, d));
    for kk in 0..k {
        let mass: f64 = (0..n).map(|i| weights[[i, kk]]).sum();
        for j in 0..d {
            let m: f64 = (0..n)
                .map(|i| weights[[i, kk]] / mass * means[[i, kk, j]])
                .sum();
            let var_of_means: f64 = (0..n)
                .map(|i| {
                    let dm = means[[i, kk, j]] - m;
                    weights[[i, kk]] / mass * dm * dm
                })
                .sum();
            let mean_var: f64 = (0..n)
                .map(|i| weights[[i, kk]] / mass * f64::exp(logvars[[i, kk, j]]))
                .sum();
            centers[[kk, j]] = m;
            prior_vars[[kk, j]] = var_of_means + mean_var;
        }
    }
    let enc = EncoderOutput {
        mixture_weights: weights,
        means,
        log_variances: logvars,
    };
    let prior = MixturePriorSpec::new(w_bar, centers, prior_vars).unwrap();
    (enc, prior)
}

fn prior_population(n: usize, prior: &MixturePriorSpec) -> EncoderOutput {
    let (k, d) = (prior.num_components(), prior.latent_dim());
    let mut weights = Array2::zeros((n, k));
    let mut means = Array3::zeros((n, k, d));
    let mut logvars = Array3::zeros((n, k, d));
    for i in 0..n {
        for kk in 0..k {
            weights[[i, kk]] = prior.weights()[kk];
            for j in 0..d {
                means[[i, kk, j]] = prior.centers()[[kk, j]];
                logvars[[i, kk, j]] = prior.variances()[[kk, j]].ln();
            }
        }
    }
    EncoderOutput {
        mixture_weights: weights,
        means,
        log_variances: logvars,
    }
}

#[test]
fn certificate_is_exactly_zero_when_encoder_equals_prior() {
    let prior = crate::priors::build_mnist_prior(4, 3.0).unwrap();
    let enc = prior_population(6, &prior);
    let cert = certificate_soft(&enc, &prior).unwrap();
    assert_abs_diff_eq!(cert.lower, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(cert.mid, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(cert.upper, 0.0, epsilon = 1e-12);
    // hard-label conditioning agrees when every class is present
    let labels: Vec<usize> = (0..6).map(|i| i % 4).collect();
    let hard = certificate_from_labels(&enc, &prior, &labels).unwrap();
    assert_abs_diff_eq!(hard.lower, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(hard.mid, 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(hard.upper, 0.0, epsilon = 1e-12);
}

#[test]
fn certificate_sandwich_holds_on_consistent_populations() {
    for trial in 0..200 {
        let mut r = rng(1000 + trial);
        let k = r.random_range(1..=4);
        let d = r.random_range(1..=3);
        let n = r.random_range(4..=24);
        let (enc, prior) = consistent_population(2000 + trial, n, k, d);
        let cert = certificate_soft(&enc, &prior).unwrap();
        assert!(
            cert.lower <= cert.mid + 1e-9 && cert.mid <= cert.upper + 1e-9,
            "trial {trial}: sandwich violated: {cert:?}"
        );
    }
}

#[test]
fn certificate_mid_equals_mean_weighted_gaussian_kl() {
    let (enc, prior) = consistent_population(9, 12, 3, 2);
    let cert = certificate_soft(&enc, &prior).unwrap();
    let (_, gauss) = kl_upper_bound_per_example(&enc, &prior).unwrap();
    let mean_gw = gauss.sum() / gauss.len() as f64;
    assert_abs_diff_eq!(cert.mid, mean_gw, epsilon = 1e-9);
}

#[test]
fn certificate_from_labels_names_missing_class() {
    let (enc, prior) = consistent_population(10, 8, 3, 2);
    let labels = vec![0usize; 8]; // classes 1 and 2 absent
    let err = certificate_from_labels(&enc, &prior, &labels).unwrap_err();
    assert!(err.to_string().contains("class 1"), "got: {err}");
}

#[test]
fn vnat_prescribed_ratios() {
    let prior = MixturePriorSpec::new(
        Array1::from_vec(vec![0.5, 0.5]),
        Array2::zeros((2, 2)),
        Array2::from_elem((2, 2), 4.0),
    )
    .unwrap();
    // population of class 0: encoder variance equal to the prior -> 0
    let n = 4;
    let mut enc = prior_population(n, &prior);
    let labels = vec![0usize; n];
    let v = vnat_from(&enc, &prior, &labels, 0).unwrap();
    assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
    assert_abs_diff_eq!(v[1], 0.0, epsilon = 1e-12);

    // encoder variance = prior/e -> exactly 1 everywhere
    for i in 0..n {
        for j in 0..2 {
            enc.log_variances[[i, 0, j]] = (4.0f64 / std::f64::consts::E).ln();
        }
    }
    let v = vnat_from(&enc, &prior, &labels, 0).unwrap();
    assert_abs_diff_eq!(v[0], 1.0, epsilon = 1e-12);

    // per-input variances {s^2/2, s^2/4} equally weighted -> ln 3
    let mut enc2 = prior_population(2, &prior);
    enc2.log_variances[[0, 0, 0]] = (4.0f64 / 2.0).ln();
    enc2.log_variances[[1, 0, 0]] = (4.0f64 / 4.0).ln();
    let v = vnat_from(&enc2, &prior, &[0, 0], 0).unwrap();
    assert_abs_diff_eq!(v[0], (3.0f64).ln(), epsilon = 1e-12);
    assert_abs_diff_eq!((3.0f64).ln(), 1.0986122886681098, epsilon = 1e-15);
}

#[test]
fn vnat_rejects_empty_class() {
    let (enc, prior) = consistent_population(11, 5, 2, 2);
    let labels = vec![0usize; 5];
    assert!(vnat_from(&enc, &prior, &labels, 1).is_err());
}

#[test]
fn activated_subspace_is_monotone_in_delta() {
    let mut r = rng(14);
    for _ in 0..50 {
        let v = Array1::from_shape_fn(16, |_| r.random_range(-2.0..4.0));
        let d1 = r.random_range(-1.0..2.0);
        let d2 = d1 + r.random_range(0.0..2.0);
        let a1 = activated_subspace(&v, d1);
        let a2 = activated_subspace(&v, d2);
        assert!(a2.iter().all(|j| a1.contains(j)), "monotonicity violated");
    }
    let v = Array1::from_vec(vec![0.5, 3.0, -1.0]);
    assert!(activated_subspace(&v, f64::INFINITY).is_empty());
    assert_eq!(activated_subspace(&v, 0.0), vec![0, 1]);
}

#[test]
fn interpolation_endpoints_and_degenerate_path() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 5).unwrap();
    let mut r = rng(15);
    let a = Array1::from_shape_fn(2, |_| r.random_range(-2.0..2.0));
    let b = Array1::from_shape_fn(2, |_| r.random_range(-2.0..2.0));
    let frames = interpolate(&model, &a, &b, 2).unwrap();
    assert_eq!(frames.shape()[0], 2);
    let mut za = Array2::zeros((1, 2));
    za.row_mut(0).assign(&a);
    let direct_a = model.decode(&za).unwrap();
    let f0 = frames.index_axis(Axis(0), 0);
    assert_eq!(f0, direct_a.index_axis(Axis(0), 0));

    let same = interpolate(&model, &a, &a, 5).unwrap();
    for i in 1..5 {
        assert_eq!(
            same.index_axis(Axis(0), 0),
            same.index_axis(Axis(0), i)
        );
    }

    assert!(interpolate(&model, &a, &b, 1).is_err());
    let wrong = Array1::zeros(3);
    assert!(interpolate(&model, &wrong, &b, 3).is_err());
}

#[test]
fn interpolation_frames_vary_along_a_real_path() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 5).unwrap();
    let a = Array1::from_vec(vec![-2.0, 0.0]);
    let b = Array1::from_vec(vec![2.0, 0.0]);
    let frames = interpolate(&model, &a, &b, 11).unwrap();
    assert_eq!(frames.shape()[0], 11);
    assert!(mean_frame_change(&frames) > 0.0);
}

#[test]
fn perturbation_with_empty_set_is_identity() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 7).unwrap();
    let z = Array1::from_vec(vec![0.5, -0.5]);
    let (orig, pert, noise) = perturb_subspace(&model, &z, &[], 2.0, 3).unwrap();
    assert_eq!(orig, pert);
    assert!(noise.iter().all(|v| *v == 0.0));
}

#[test]
fn perturbation_is_seeded_and_validates_indices() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 7).unwrap();
    let z = Array1::from_vec(vec![0.5, -0.5]);
    let (_, p1, n1) = perturb_subspace(&model, &z, &[1], 1.5, 9).unwrap();
    let (_, p2, n2) = perturb_subspace(&model, &z, &[1], 1.5, 9).unwrap();
    assert_eq!(p1, p2);
    assert_eq!(n1, n2);
    assert!(n1[1].abs() <= 1.5 && n1[0] == 0.0);
    assert!(perturb_subspace(&model, &z, &[5], 1.5, 9).is_err());
}

#[test]
fn grid_generation_matches_single_decode_and_validates_dim() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 8).unwrap();
    let grid = GridSpec {
        x_min: 0.0,
        x_max: 0.0,
        nx: 1,
        y_min: 0.0,
        y_max: 0.0,
        ny: 1,
    };
    let imgs = grid_generate(&model, &grid).unwrap();
    assert_eq!(imgs.shape()[0], 1);
    let direct = model.decode(&Array2::zeros((1, 2))).unwrap();
    assert_eq!(imgs, direct);

    // row-major ordering of points
    let g = GridSpec {
        x_min: -1.0,
        x_max: 1.0,
        nx: 3,
        y_min: 0.0,
        y_max: 1.0,
        ny: 2,
    };
    let pts = g.points();
    assert_eq!(pts.len(), 6);
    assert_eq!(pts[0], (-1.0, 0.0));
    assert_eq!(pts[1], (0.0, 0.0));
    assert_eq!(pts[3], (-1.0, 1.0));

    // non-2-D latent space is refused
    let arch3 = ArchitectureSpec {
        latent_dim: 3,
        ..ArchitectureSpec::toy()
    };
    let model3 = ModelParameters::new(arch3, 1.0, 8).unwrap();
    assert!(grid_generate(&model3, &grid).is_err());
}

#[test]
fn pearson_rows_properties() {
    let mut m = Array2::zeros((3, 5));
    let mut r = rng(20);
    for i in 0..3 {
        for j in 0..5 {
            m[[i, j]] = r.random_range(-1.0..1.0);
        }
    }
    // duplicate row: correlation 1
    let row0 = m.row(0).to_owned();
    m.row_mut(2).assign(&row0);
    let c = pearson_rows(&m);
    assert_abs_diff_eq!(c[[0, 2]], 1.0, epsilon = 1e-12);
    for i in 0..3 {
        assert_eq!(c[[i, i]], 1.0);
        for j in 0..3 {
            assert!((c[[i, j]] - c[[j, i]]).abs() < 1e-12);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&c[[i, j]]));
        }
    }
}

#[test]
fn kl_metric_zero_iff_population_is_prior() {
    let prior = crate::priors::build_mnist_prior(3, 2.0).unwrap();
    let enc = prior_population(4, &prior);
    assert_abs_diff_eq!(kl_metric_from(&enc, &prior).unwrap(), 0.0, epsilon = 1e-12);
    let (enc2, prior2) = consistent_population(21, 6, 3, 2);
    assert!(kl_metric_from(&enc2, &prior2).unwrap() > 0.0);
}

#[test]
fn classification_error_from_probs() {
    let mut probs = Array2::zeros((4, 3));
    probs[[0, 0]] = 0.9;
    probs[[0, 1]] = 0.05;
    probs[[0, 2]] = 0.05;
    probs[[1, 1]] = 1.0;
    probs[[2, 2]] = 0.6;
    probs[[2, 0]] = 0.4;
    probs[[3, 0]] = 0.5;
    probs[[3, 1]] = 0.3;
    assert_eq!(
        classification_error_from(&probs, &[0, 1, 2, 1]),
        25.0
    );
    // perfect classifier
    assert_eq!(classification_error_from(&probs, &[0, 1, 2, 0]), 0.0);
}

#[test]
fn classification_error_on_model_runs_end_to_end() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 30).unwrap();
    let mut r = rng(31);
    let images = ArrayD::from_shape_fn(IxDyn(&[12, 6, 6, 1]), |_| r.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..12).map(|i| i % 3).collect();
    let err = classification_error(&model, &images, &labels).unwrap();
    assert!((0.0..=100.0).contains(&err));
    // chance level for an untrained model on random data is about 2/3;
    // mostly this guards the plumbing, not the value
    assert!(classification_error(&model, &images, &[0, 1]).is_err());
}

#[test]
fn vnat_report_builds_and_validates() {
    let model = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 33).unwrap();
    let prior = crate::priors::build_mnist_prior(3, 2.0).unwrap();
    let mut r = rng(34);
    let images = ArrayD::from_shape_fn(IxDyn(&[9, 6, 6, 1]), |_| r.random_range(-1.0..1.0));
    let labels: Vec<usize> = (0..9).map(|i| i % 3).collect();
    let report = vnat_report(&model, &prior, &images, &labels, 1.0).unwrap();
    assert_eq!(report.per_class_vnat.len(), 3);
    assert_eq!(report.sample_count, vec![3, 3, 3]);
    report.validate().unwrap();
    // serialization round trip
    let text = serde_json::to_string(&report).unwrap();
    let back: VNatReport = serde_json::from_str(&text).unwrap();
    back.validate().unwrap();
}

#[test]
fn mean_frame_change_basics() {
    let mut frames = ArrayD::zeros(IxDyn(&[3, 2, 2, 1]));
    frames.index_axis_mut(Axis(0), 1).fill(1.0);
    frames.index_axis_mut(Axis(0), 2).fill(1.0);
    // changes: 1.0 then 0.0, mean 0.5
    assert_abs_diff_eq!(mean_frame_change(&frames), 0.5, epsilon = 1e-12);
}
