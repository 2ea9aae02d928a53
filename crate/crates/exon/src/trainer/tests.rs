use super::*;
use crate::data::ScalingRecord;
use crate::networks::ArchitectureSpec;
use approx::assert_abs_diff_eq;
use ndarray::IxDyn;

/// Class-structured synthetic images for the toy architecture: oriented
/// stripes plus noise, so a classifier genuinely has something to learn.
fn class_image(class: usize, rng: &mut ChaCha20Rng) -> ArrayD<f64> {
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

fn image_set(per_class: usize, seed: u64) -> (ArrayD<f64>, Vec<usize>) {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let n = per_class * 3;
    let mut images = ArrayD::zeros(IxDyn(&[n, 6, 6, 1]));
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 3;
        images
            .index_axis_mut(ndarray::Axis(0), i)
            .assign(&class_image(class, &mut rng));
        labels.push(class);
    }
    (images, labels)
}

pub(super) fn synthetic_split(
    labeled_per_class: usize,
    unlabeled_total: usize,
    test_per_class: usize,
    seed: u64,
) -> DatasetSplit {
    let (labeled_images, labeled_labels) = image_set(labeled_per_class, seed);
    let (unlabeled_images, _) = image_set(unlabeled_total.div_ceil(3), seed + 1);
    let unlabeled_images = unlabeled_images
        .slice_axis(ndarray::Axis(0), ndarray::Slice::from(0..unlabeled_total))
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

pub(super) fn toy_config() -> TrainingConfig {
    TrainingConfig {
        dataset: DatasetTag::Mnist,
        epochs: 1,
        batch_unlabeled: 8,
        batch_labeled: 6,
        beta: 1.0,
        lambda1: 50.0,
        ramp_horizon: 2,
        base_lr: 0.005,
        lr_milestones: vec![],
        lr_exp_start: 1000,
        weight_decay: 5e-4,
        drop_rate: 0.1,
        n_labeled: 9,
        seed: 7,
        split_seed: 3,
        temperature: 0.67,
        rho_sampler: RhoSampler::Uniform,
        augment: AugmentSpec::none(),
        checkpoint_every: 1,
        eval_every: 1,
        eval_test_cap: None,
        grid_points: 5,
        arch_override: Some(ArchitectureSpec {
            drop_rate: 0.1,
            ..ArchitectureSpec::toy()
        }),
    }
}

fn toy_prior() -> MixturePriorSpec {
    crate::priors::build_mnist_prior(3, 2.0).unwrap()
}

#[test]
fn defaults_match_experiment_table() {
    let m = TrainingConfig::mnist();
    assert_eq!(m.epochs, 100);
    assert_eq!((m.batch_unlabeled, m.batch_labeled), (128, 32));
    assert_eq!(m.drop_rate, 0.5);
    assert_eq!(m.lambda1, 6000.0);
    assert_eq!(m.ramp_horizon, 10);
    assert_eq!(m.base_lr, 0.003);
    assert_eq!(m.n_labeled, 100);
    assert_eq!(m.beta, 0.25);
    assert!(m.lr_milestones.is_empty());
    assert_eq!(m.weight_decay, 5e-4);

    let c = TrainingConfig::cifar10();
    assert_eq!(c.epochs, 600);
    assert_eq!((c.batch_unlabeled, c.batch_labeled), (128, 32));
    assert_eq!(c.drop_rate, 0.1);
    assert_eq!(c.lambda1, 5000.0);
    assert_eq!(c.ramp_horizon, 50);
    assert_eq!(c.base_lr, 0.001);
    assert_eq!(c.lr_milestones, vec![250, 350, 450, 550]);
    assert_eq!(c.n_labeled, 4000);
}

#[test]
fn lr_schedule_matches_stated_rules() {
    let m = TrainingConfig::mnist();
    for epoch in [0, 1, 5, 10] {
        assert_eq!(lr_schedule(epoch, &m), 0.003);
    }
    // after the switch: base * exp(-5 (c/100)^2)
    let at11 = 0.003 * (-5.0f64 * (0.11f64).powi(2)).exp();
    assert_abs_diff_eq!(lr_schedule(11, &m), at11, epsilon = 1e-15);
    assert_abs_diff_eq!(at11, 0.002823881307055217, epsilon = 1e-12);
    let at100 = 0.003 * (-5.0f64).exp();
    assert_abs_diff_eq!(lr_schedule(100, &m), at100, epsilon = 1e-15);

    let c = TrainingConfig::cifar10();
    assert_eq!(lr_schedule(1, &c), 0.001);
    assert_eq!(lr_schedule(249, &c), 0.001);
    assert_abs_diff_eq!(lr_schedule(250, &c), 1e-4, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_schedule(300, &c), 1e-4, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_schedule(400, &c), 1e-5, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_schedule(500, &c), 1e-6, epsilon = 1e-18);
    assert_abs_diff_eq!(lr_schedule(550, &c), 1e-7, epsilon = 1e-18);
    // after 550 the exponential tail multiplies in: span 50
    let frac = 1.0 - (600.0 - 560.0) / 50.0;
    let at560 = 1e-7 * f64::exp(-5.0 * frac * frac);
    assert_abs_diff_eq!(lr_schedule(560, &c), at560, epsilon = 1e-20);
    let at600 = 1e-7 * (-5.0f64).exp();
    assert_abs_diff_eq!(lr_schedule(600, &c), at600, epsilon = 1e-20);
}

#[test]
fn optimizer_zero_gradients_shrink_parameters_exactly() {
    let model0 = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 5).unwrap();
    let mut model = model0.clone();
    let mut opt = Optimizer::new(&model, 5e-4);
    let zero_grads: Vec<Arr> = model_tensors(&model)
        .into_iter()
        .map(|t| Arr::zeros(t.raw_dim()))
        .collect();
    let lr = 0.01;
    opt.apply(&mut model, &zero_grads, lr);
    let shrink = 1.0 - lr * 5e-4;
    for (before, after) in model_tensors(&model0).iter().zip(model_tensors(&model)) {
        for (b, a) in before.iter().zip(after.iter()) {
            assert_eq!(*a, b * shrink, "decay must be exactly multiplicative");
        }
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_bit_identical() {
    let model0 = ModelParameters::new(ArchitectureSpec::toy(), 1.0, 6).unwrap();
    let mut model = model0.clone();
    let mut opt = Optimizer::new(&model, 5e-4);
    // nonzero gradients, lr = 0: the update and the decay both vanish
    let grads: Vec<Arr> = model_tensors(&model)
        .into_iter()
        .map(|t| Arr::from_elem(t.raw_dim(), 0.37))
        .collect();
    opt.apply(&mut model, &grads, 0.0);
    for (before, after) in model_tensors(&model0).iter().zip(model_tensors(&model)) {
        assert_eq!(before, &after);
    }
}

#[test]
fn train_step_is_reproducible_under_a_fixed_seed() {
    let split = synthetic_split(3, 8, 3, 1);
    let config = toy_config();
    let prior = toy_prior();
    let run = || {
        let mut model =
            ModelParameters::new(config.architecture(), config.beta, config.seed).unwrap();
        let mut opt = Optimizer::new(&model, config.weight_decay);
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let ids: Vec<usize> = (0..split.labeled_images.shape()[0]).collect();
        let uids: Vec<usize> = (0..split.unlabeled_images.shape()[0]).collect();
        train_step(
            &mut model,
            &mut opt,
            &StepBatches {
                labeled_images: &split.labeled_images,
                labeled_labels: &split.labeled_labels,
                unlabeled_images: Some(&split.unlabeled_images),
                labeled_ids: &ids,
                unlabeled_ids: &uids,
            },
            &prior,
            1,
            &config,
            &mut rng,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn smoke_loss_decreases_over_50_steps() {
    // median over 5 seeds of (mean of last 5 totals - mean of first 5)
    let mut deltas = Vec::new();
    for seed in 0..5u64 {
        let split = synthetic_split(4, 24, 3, 100 + seed);
        let mut config = toy_config();
        config.seed = seed;
        config.lambda1 = 20.0;
        let prior = toy_prior();
        let mut model =
            ModelParameters::new(config.architecture(), config.beta, config.seed).unwrap();
        let mut opt = Optimizer::new(&model, config.weight_decay);
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let l = split.labeled_images.shape()[0];
        let u = split.unlabeled_images.shape()[0];
        let mut totals = Vec::new();
        for step in 0..50 {
            let lab: Vec<usize> = (0..6).map(|i| (step + i) % l).collect();
            let unl: Vec<usize> = (0..8).map(|i| (3 * step + i) % u).collect();
            let xl = take_rows(&split.labeled_images, &lab);
            let yl: Vec<usize> = lab.iter().map(|i| split.labeled_labels[*i]).collect();
            let xu = take_rows(&split.unlabeled_images, &unl);
            let b = train_step(
                &mut model,
                &mut opt,
                &StepBatches {
                    labeled_images: &xl,
                    labeled_labels: &yl,
                    unlabeled_images: Some(&xu),
                    labeled_ids: &lab,
                    unlabeled_ids: &unl,
                },
                &prior,
                1,
                &config,
                &mut rng,
            )
            .unwrap();
            totals.push(b.total);
        }
        let head: f64 = totals[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = totals[45..].iter().sum::<f64>() / 5.0;
        deltas.push(tail - head);
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median = deltas[2];
    assert!(
        median < 0.0,
        "median loss change over 50 steps should be negative: {deltas:?}"
    );
}

#[test]
fn fit_one_epoch_produces_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let split = synthetic_split(3, 12, 3, 4);
    let config = toy_config();
    let prior = toy_prior();
    let artifacts = fit(&config, &split, &prior, dir.path()).unwrap();

    // exactly one per-epoch checkpoint
    assert_eq!(artifacts.checkpoints.len(), 1);
    assert!(artifacts.final_checkpoint.join("manifest.json").exists());
    assert!(artifacts.final_checkpoint.join("optimizer.bin").exists());
    assert!(artifacts.best_checkpoint.is_some());
    assert!(artifacts.config_path.exists());
    assert!(artifacts.final_test_error.is_some());
    assert!(artifacts.final_kl_metric.is_some());

    // parseable metrics log: step records plus one eval record
    let records = read_metrics(&artifacts.metrics_path).unwrap();
    let steps = 12usize.div_ceil(config.batch_unlabeled);
    assert_eq!(records.len(), steps + 1);
    for r in &records {
        assert_eq!(r.epoch, 1);
        // recorded lambda2 equals the ramp value at this epoch
        assert_abs_diff_eq!(
            r.lambda2,
            ramp_up(1, config.lambda1, config.ramp_horizon),
            epsilon = 1e-12
        );
    }
    assert!(records.last().unwrap().test_error.is_some());

    // the config snapshot round-trips
    let text = std::fs::read_to_string(&artifacts.config_path).unwrap();
    let back: TrainingConfig = toml::from_str(&text).unwrap();
    assert_eq!(back, config);
}

#[test]
fn fit_is_deterministic_for_the_first_steps() {
    let split = synthetic_split(3, 40, 3, 4);
    let mut config = toy_config();
    config.batch_unlabeled = 4; // 10 steps per epoch
    config.eval_every = 100;
    let prior = toy_prior();

    let dir_a = tempfile::tempdir().unwrap();
    let a = fit(&config, &split, &prior, dir_a.path()).unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let b = fit(&config, &split, &prior, dir_b.path()).unwrap();

    let ra = read_metrics(&a.metrics_path).unwrap();
    let rb = read_metrics(&b.metrics_path).unwrap();
    assert!(ra.len() >= 10);
    for (x, y) in ra.iter().take(10).zip(rb.iter().take(10)) {
        assert_eq!(x, y);
    }
}

#[test]
fn fit_resumes_from_latest_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let split = synthetic_split(3, 12, 3, 4);
    let prior = toy_prior();
    let mut config = toy_config();
    config.epochs = 2;
    fit(&config, &split, &prior, dir.path()).unwrap();
    let first = read_metrics(&dir.path().join("metrics.jsonl")).unwrap();
    let first_len = first.len();
    assert_eq!(first.last().unwrap().epoch, 2);

    // same directory, longer run: continues at epoch 3 with no reinit
    config.epochs = 4;
    let artifacts = fit(&config, &split, &prior, dir.path()).unwrap();
    let all = read_metrics(&artifacts.metrics_path).unwrap();
    assert!(all.len() > first_len);
    assert_eq!(all[first_len].epoch, 3);
    assert_eq!(all.last().unwrap().epoch, 4);
    // epochs are contiguous
    let mut seen: Vec<usize> = all.iter().map(|r| r.epoch).collect();
    seen.dedup();
    assert_eq!(seen, vec![1, 2, 3, 4]);
}

#[test]
fn fit_rejects_mismatched_prior_or_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let split = synthetic_split(3, 12, 3, 4);
    let config = toy_config();
    let wrong_prior = crate::priors::build_mnist_prior(5, 2.0).unwrap();
    assert!(fit(&config, &split, &wrong_prior, dir.path()).is_err());

    let mut wrong_cfg = toy_config();
    wrong_cfg.arch_override = None; // now expects 28x28 mnist images
    assert!(fit(&wrong_cfg, &split, &toy_prior(), dir.path()).is_err());
}

#[test]
fn latest_checkpoint_finds_highest_epoch() {
    let dir = tempfile::tempdir().unwrap();
    assert!(latest_checkpoint(dir.path()).is_none());
    std::fs::create_dir(dir.path().join("ckpt-epoch-0003")).unwrap();
    std::fs::create_dir(dir.path().join("ckpt-epoch-0010")).unwrap();
    std::fs::create_dir(dir.path().join("ckpt-best")).unwrap();
    let (epoch, path) = latest_checkpoint(dir.path()).unwrap();
    assert_eq!(epoch, 10);
    assert!(path.ends_with("ckpt-epoch-0010"));
}
