//! Optimization orchestration: schedules, the Adam optimizer with decoupled
//! weight decay, the epoch loop with metrics logging, checkpointing, and
//! resume.
//!
//! Batches pair one labeled and one unlabeled slice per step; the unlabeled
//! loader defines the epoch length (`ceil(U / batch)`) and the much smaller
//! labeled loader cycles with reshuffling. Every epoch reseeds its noise
//! stream from the run seed and the epoch number, so an interrupted run
//! resumed from a checkpoint replays the remaining epochs exactly.

use crate::analysis;
use crate::autodiff::Arr;
use crate::data::{take_rows, DatasetSplit, DatasetTag};
use crate::error::{ExonError, Result};
use crate::networks::checkpoint::{
    load_checkpoint, read_named_tensors, save_checkpoint, write_named_tensors, CheckpointMeta,
};
use crate::networks::{ArchitectureSpec, ModelParameters};
use crate::objective::{ramp_up, total_objective, LossBreakdown, ObjectiveSettings};
use crate::priors::MixturePriorSpec;
use crate::stochastic::{AugmentSpec, RhoSampler};
use ndarray::ArrayD;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Full description of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub dataset: DatasetTag,
    pub epochs: usize,
    /// Unlabeled and labeled batch sizes (U, L).
    pub batch_unlabeled: usize,
    pub batch_labeled: usize,
    /// Fixed decoder observation variance.
    pub beta: f64,
    /// Weight of the supervised penalty and labeled SCI term.
    pub lambda1: f64,
    /// Ramp-up horizon T of the unlabeled SCI weight.
    pub ramp_horizon: usize,
    pub base_lr: f64,
    /// Epochs at which the learning rate is multiplied by 0.1 (cumulative).
    pub lr_milestones: Vec<usize>,
    /// With no milestones: epoch after which the exponential decay applies.
    pub lr_exp_start: usize,
    /// Decoupled weight-decay factor per step.
    pub weight_decay: f64,
    /// Classifier spatial-dropout rate.
    pub drop_rate: f64,
    pub n_labeled: usize,
    /// Optimization seed (initialization, noise, batching).
    pub seed: u64,
    /// Labeled-split seed, independent of the optimization seed.
    pub split_seed: u64,
    /// Gumbel relaxation temperature.
    pub temperature: f64,
    pub rho_sampler: RhoSampler,
    pub augment: AugmentSpec,
    pub checkpoint_every: usize,
    /// Run the test-set evaluation every this many epochs (always at the
    /// end).
    pub eval_every: usize,
    /// Cap the per-epoch evaluation subset (the final evaluation is always
    /// on the full test set).
    pub eval_test_cap: Option<usize>,
    /// Grid side length for the generated-image diversity score (2-D latent
    /// spaces only).
    pub grid_points: usize,
    /// Test-only override of the architecture; `None` derives it from the
    /// dataset tag and drop rate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arch_override: Option<ArchitectureSpec>,
}

impl TrainingConfig {
    /// MNIST defaults from the experiment table: 100 epochs, batches
    /// (128, 32), drop 0.5, lambda1 6000 with a 10-epoch ramp, lr 0.003.
    pub fn mnist() -> Self {
        TrainingConfig {
            dataset: DatasetTag::Mnist,
            epochs: 100,
            batch_unlabeled: 128,
            batch_labeled: 32,
            beta: 0.25,
            lambda1: 6000.0,
            ramp_horizon: 10,
            base_lr: 0.003,
            lr_milestones: vec![],
            lr_exp_start: 10,
            weight_decay: 5e-4,
            drop_rate: 0.5,
            n_labeled: 100,
            seed: 0,
            split_seed: 1,
            temperature: crate::stochastic::DEFAULT_TEMPERATURE,
            rho_sampler: RhoSampler::Uniform,
            augment: AugmentSpec::mnist(),
            checkpoint_every: 10,
            eval_every: 1,
            eval_test_cap: None,
            grid_points: 31,
            arch_override: None,
        }
    }

    /// CIFAR-10 defaults from the experiment table: 600 epochs, batches
    /// (128, 32), drop 0.1, lambda1 5000 with a 50-epoch ramp, lr 0.001
    /// stepped at 250/350/450/550.
    pub fn cifar10() -> Self {
        TrainingConfig {
            dataset: DatasetTag::Cifar10,
            epochs: 600,
            batch_unlabeled: 128,
            batch_labeled: 32,
            beta: 0.01,
            lambda1: 5000.0,
            ramp_horizon: 50,
            base_lr: 0.001,
            lr_milestones: vec![250, 350, 450, 550],
            lr_exp_start: 550,
            weight_decay: 5e-4,
            drop_rate: 0.1,
            n_labeled: 4000,
            seed: 0,
            split_seed: 1,
            temperature: crate::stochastic::DEFAULT_TEMPERATURE,
            rho_sampler: RhoSampler::Uniform,
            augment: AugmentSpec::cifar10(),
            checkpoint_every: 10,
            eval_every: 1,
            eval_test_cap: None,
            grid_points: 31,
            arch_override: None,
        }
    }

    pub fn for_dataset(tag: DatasetTag) -> Self {
        match tag {
            DatasetTag::Mnist => TrainingConfig::mnist(),
            DatasetTag::Cifar10 => TrainingConfig::cifar10(),
        }
    }

    /// The architecture this config trains.
    pub fn architecture(&self) -> ArchitectureSpec {
        if let Some(arch) = &self.arch_override {
            return arch.clone();
        }
        let mut arch = match self.dataset {
            DatasetTag::Mnist => ArchitectureSpec::mnist(),
            DatasetTag::Cifar10 => ArchitectureSpec::cifar10(),
        };
        arch.drop_rate = self.drop_rate;
        arch
    }

    /// The default prior layout for this config's dataset.
    pub fn default_prior(&self) -> Result<MixturePriorSpec> {
        match self.dataset {
            DatasetTag::Mnist => crate::priors::build_mnist_prior(10, 4.0),
            DatasetTag::Cifar10 => Ok(crate::priors::build_cifar_prior()),
        }
    }

    pub fn objective_settings(&self, epoch: usize) -> ObjectiveSettings {
        ObjectiveSettings {
            lambda1: self.lambda1,
            lambda2: ramp_up(epoch, self.lambda1, self.ramp_horizon),
            temperature: self.temperature,
            rho_sampler: self.rho_sampler,
            augment: self.augment,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_unlabeled == 0 || self.batch_labeled == 0 {
            return Err(ExonError::Config("epochs and batch sizes must be positive".into()));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(ExonError::Config("beta must be positive".into()));
        }
        if self.lambda1 < 0.0 || self.base_lr <= 0.0 || self.weight_decay < 0.0 {
            return Err(ExonError::Config("negative schedule constant".into()));
        }
        Ok(())
    }
}

/// Learning rate at a 1-based epoch `c`: milestones multiply by 0.1 once
/// passed; past the exponential window start the rate is further scaled by
/// `exp(-5 (1 - (E - c)/span)^2)` where the span is the full run without
/// milestones and the tail window after the last milestone otherwise.
pub fn lr_schedule(epoch: usize, config: &TrainingConfig) -> f64 {
    let mut lr = config.base_lr;
    for &m in &config.lr_milestones {
        if epoch >= m {
            lr *= 0.1;
        }
    }
    let (start, span) = if config.lr_milestones.is_empty() {
        (config.lr_exp_start, config.epochs as f64)
    } else {
        let last = *config.lr_milestones.last().unwrap();
        (last, (config.epochs.saturating_sub(last)).max(1) as f64)
    };
    if epoch > start {
        let frac = 1.0 - (config.epochs as f64 - epoch as f64) / span;
        lr *= (-5.0 * frac * frac).exp();
    }
    lr
}

/// Adam with decoupled weight decay. Moment tensors align with the model's
/// trainable tensors in (classifier, encoder, decoder) order.
#[derive(Clone)]
pub struct Optimizer {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<Arr>,
    v: Vec<Arr>,
}

impl Optimizer {
    pub fn new(model: &ModelParameters, weight_decay: f64) -> Self {
        let zeros: Vec<Arr> = model_tensors(model)
            .into_iter()
            .map(|t| Arr::zeros(t.raw_dim()))
            .collect();
        Optimizer {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update: Adam with bias correction, then the decoupled
    /// multiplicative shrink `p *= 1 - lr * weight_decay`.
    pub fn apply(&mut self, model: &mut ModelParameters, grads: &[Arr], lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let shrink = 1.0 - lr * self.weight_decay;
        for (idx, param) in model_tensors_mut(model).into_iter().enumerate() {
            let g = &grads[idx];
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(param)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    *p *= shrink;
                });
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::with_capacity(2 * self.m.len() + 1);
        tensors.push((
            "step".to_string(),
            ndarray::arr1(&[self.step as f64]).into_dyn(),
        ));
        for (i, m) in self.m.iter().enumerate() {
            tensors.push((format!("m/{i}"), m.clone()));
        }
        for (i, v) in self.v.iter().enumerate() {
            tensors.push((format!("v/{i}"), v.clone()));
        }
        write_named_tensors(path, &tensors)
    }

    pub fn load(path: &Path, model: &ModelParameters, weight_decay: f64) -> Result<Self> {
        let tensors = read_named_tensors(path)?;
        let mut opt = Optimizer::new(model, weight_decay);
        for (name, value) in tensors {
            if name == "step" {
                opt.step = value[[0]] as u64;
            } else if let Some(i) = name.strip_prefix("m/") {
                let i: usize = i.parse().map_err(|_| {
                    ExonError::Checkpoint(format!("bad optimizer tensor name {name}"))
                })?;
                opt.m[i] = value;
            } else if let Some(i) = name.strip_prefix("v/") {
                let i: usize = i.parse().map_err(|_| {
                    ExonError::Checkpoint(format!("bad optimizer tensor name {name}"))
                })?;
                opt.v[i] = value;
            }
        }
        Ok(opt)
    }
}

fn model_tensors(model: &ModelParameters) -> Vec<&Arr> {
    let mut out = Vec::new();
    for net in [&model.classifier, &model.encoder, &model.decoder] {
        for t in &net.params.tensors {
            out.push(&t.value);
        }
    }
    out
}

fn model_tensors_mut(model: &mut ModelParameters) -> Vec<&mut Arr> {
    let mut out = Vec::new();
    for net in [
        &mut model.classifier,
        &mut model.encoder,
        &mut model.decoder,
    ] {
        for t in &mut net.params.tensors {
            out.push(&mut t.value);
        }
    }
    out
}

/// One step's batches plus the dataset indices they came from (for the
/// non-finite-loss diagnostic).
pub struct StepBatches<'a> {
    pub labeled_images: &'a ArrayD<f64>,
    pub labeled_labels: &'a [usize],
    pub unlabeled_images: Option<&'a ArrayD<f64>>,
    pub labeled_ids: &'a [usize],
    pub unlabeled_ids: &'a [usize],
}

/// Evaluate the objective on one batch pair, update the parameters, apply
/// the pending batch-norm statistics, and return the loss numbers.
pub fn train_step(
    model: &mut ModelParameters,
    opt: &mut Optimizer,
    batches: &StepBatches<'_>,
    prior: &MixturePriorSpec,
    epoch: usize,
    config: &TrainingConfig,
    rng: &mut ChaCha20Rng,
) -> Result<LossBreakdown> {
    let settings = config.objective_settings(epoch);
    let graph = total_objective(
        model,
        prior,
        (batches.labeled_images, batches.labeled_labels),
        batches.unlabeled_images,
        &settings,
        rng,
    )?;
    if !graph.breakdown.is_finite() {
        return Err(ExonError::NonFiniteLoss {
            epoch,
            step: opt.step as usize,
            detail: format!(
                "breakdown {:?}; labeled ids {:?}; unlabeled ids {:?}",
                graph.breakdown, batches.labeled_ids, batches.unlabeled_ids
            ),
        });
    }
    let grads_by_node = graph.tape.backward(graph.total);
    let mut grads = Vec::new();
    for bound in [
        &graph.bound.classifier,
        &graph.bound.encoder,
        &graph.bound.decoder,
    ] {
        for v in &bound.vars {
            let g = grads_by_node
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Arr::zeros(graph.tape.value(*v).raw_dim()));
            grads.push(g);
        }
    }
    let lr = lr_schedule(epoch, config);
    opt.apply(model, &grads, lr);
    model.apply_bn_updates(&graph.bn_updates);
    Ok(graph.breakdown)
}

/// One line of the metrics log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub lambda2: f64,
    pub reconstruction: f64,
    pub kl_categorical: f64,
    pub kl_gaussian_weighted: f64,
    pub supervised_ce: f64,
    pub sci_labeled: f64,
    pub sci_unlabeled: f64,
    pub lambda1: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_error: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_metric: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub negative_ssim: Option<f64>,
}

impl MetricsRecord {
    fn from_breakdown(epoch: usize, step: usize, lr: f64, b: &LossBreakdown) -> Self {
        MetricsRecord {
            epoch,
            step,
            lr,
            lambda2: b.lambda2,
            reconstruction: b.reconstruction,
            kl_categorical: b.kl_categorical,
            kl_gaussian_weighted: b.kl_gaussian_weighted,
            supervised_ce: b.supervised_ce,
            sci_labeled: b.sci_labeled,
            sci_unlabeled: b.sci_unlabeled,
            lambda1: b.lambda1,
            total: b.total,
            test_error: None,
            kl_metric: None,
            negative_ssim: None,
        }
    }
}

/// Where a finished (or interrupted) run lives on disk.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunArtifacts {
    pub out_dir: PathBuf,
    pub config_path: PathBuf,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
    pub best_checkpoint: Option<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub final_test_error: Option<f64>,
    pub final_kl_metric: Option<f64>,
    pub final_negative_ssim: Option<f64>,
    /// Written later by the analyze command.
    pub vnat_report: Option<PathBuf>,
}

fn checkpoint_dir(out: &Path, epoch: usize) -> PathBuf {
    out.join(format!("ckpt-epoch-{epoch:04}"))
}

/// Highest-epoch checkpoint already present under `out_dir`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Option<(usize, PathBuf)> {
    let mut best: Option<(usize, PathBuf)> = None;
    let entries = fs::read_dir(out_dir).ok()?;
    for entry in entries.flatten() {
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name.strip_prefix("ckpt-epoch-") {
            if let Ok(epoch) = num.parse::<usize>() {
                if best.as_ref().map(|(e, _)| epoch > *e).unwrap_or(true) {
                    best = Some((epoch, entry.path()));
                }
            }
        }
    }
    best
}

/// Run the full epoch loop. If `out_dir` already holds checkpoints of this
/// run, training resumes after the latest one; the metrics log is appended.
pub fn fit(
    config: &TrainingConfig,
    split: &DatasetSplit,
    prior: &MixturePriorSpec,
    out_dir: &Path,
) -> Result<RunArtifacts> {
    config.validate()?;
    let arch = config.architecture();
    if split.labeled_images.shape()[1..] != arch.input_shape {
        return Err(ExonError::invalid(format!(
            "split images {:?} do not match the architecture input {:?}",
            &split.labeled_images.shape()[1..],
            arch.input_shape
        )));
    }
    if prior.num_components() != arch.num_classes || prior.latent_dim() != arch.latent_dim {
        return Err(ExonError::invalid(
            "prior spec does not match the architecture's K or d",
        ));
    }
    fs::create_dir_all(out_dir)?;
    let config_path = out_dir.join("config.toml");
    fs::write(
        &config_path,
        toml::to_string_pretty(config).map_err(|e| ExonError::Serialization(e.to_string()))?,
    )?;
    let metrics_path = out_dir.join("metrics.jsonl");

    // fresh start or resume
    let (mut model, mut opt, start_epoch) = match latest_checkpoint(out_dir) {
        Some((epoch, dir)) => {
            let (model, meta) = load_checkpoint(&dir)?;
            if meta.seed != config.seed {
                return Err(ExonError::Checkpoint(format!(
                    "checkpoint seed {} does not match config seed {}",
                    meta.seed, config.seed
                )));
            }
            let opt = Optimizer::load(&dir.join("optimizer.bin"), &model, config.weight_decay)?;
            (model, opt, epoch)
        }
        None => {
            let model = ModelParameters::new(arch.clone(), config.beta, config.seed)?;
            let opt = Optimizer::new(&model, config.weight_decay);
            (model, opt, 0)
        }
    };

    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&metrics_path)?;

    let l_total = split.labeled_images.shape()[0];
    let u_total = split.unlabeled_images.shape()[0];
    let steps_per_epoch = if u_total > 0 {
        u_total.div_ceil(config.batch_unlabeled)
    } else {
        l_total.div_ceil(config.batch_labeled)
    };

    let mut checkpoints = Vec::new();
    let mut best: Option<(f64, PathBuf)> = None;
    let mut final_eval = (None, None, None);

    for epoch in (start_epoch + 1)..=config.epochs {
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        rng.set_stream(epoch as u64);

        let mut unlabeled_order: Vec<usize> = (0..u_total).collect();
        unlabeled_order.shuffle(&mut rng);
        let mut labeled_order: Vec<usize> = (0..l_total).collect();
        labeled_order.shuffle(&mut rng);
        let mut labeled_cursor = 0usize;

        for step in 0..steps_per_epoch {
            // labeled slice cycles with reshuffling
            let mut lab_ids = Vec::with_capacity(config.batch_labeled.min(l_total));
            while lab_ids.len() < config.batch_labeled && l_total > 0 {
                if labeled_cursor == l_total {
                    labeled_order.shuffle(&mut rng);
                    labeled_cursor = 0;
                }
                lab_ids.push(labeled_order[labeled_cursor]);
                labeled_cursor += 1;
            }
            let xl = take_rows(&split.labeled_images, &lab_ids);
            let yl: Vec<usize> = lab_ids.iter().map(|i| split.labeled_labels[*i]).collect();

            let (xu, unlab_ids): (Option<ArrayD<f64>>, Vec<usize>) = if u_total > 0 {
                let lo = step * config.batch_unlabeled;
                let hi = ((step + 1) * config.batch_unlabeled).min(u_total);
                let ids: Vec<usize> = unlabeled_order[lo..hi].to_vec();
                (Some(take_rows(&split.unlabeled_images, &ids)), ids)
            } else {
                (None, Vec::new())
            };

            let breakdown = train_step(
                &mut model,
                &mut opt,
                &StepBatches {
                    labeled_images: &xl,
                    labeled_labels: &yl,
                    unlabeled_images: xu.as_ref(),
                    labeled_ids: &lab_ids,
                    unlabeled_ids: &unlab_ids,
                },
                prior,
                epoch,
                config,
                &mut rng,
            )?;
            let record =
                MetricsRecord::from_breakdown(epoch, step, lr_schedule(epoch, config), &breakdown);
            writeln!(log, "{}", serde_json::to_string(&record).unwrap())?;
        }

        // end-of-epoch evaluation
        let is_last = epoch == config.epochs;
        if epoch % config.eval_every.max(1) == 0 || is_last {
            let (test_images, test_labels) = eval_slice(split, if is_last {
                None
            } else {
                config.eval_test_cap
            });
            let err = analysis::classification_error(&model, &test_images, &test_labels)?;
            let klm = analysis::kl_metric(&model, prior, &test_images)?;
            // the diversity score needs a 2-D latent space for the grid and
            // images at least as large as the SSIM window
            let nssim = if arch.latent_dim == 2 && arch.input_shape[0] >= 11 && arch.input_shape[1] >= 11
            {
                let extent = grid_extent(prior);
                let grid = analysis::GridSpec::square(extent, config.grid_points);
                Some(analysis::negative_ssim(&analysis::grid_generate(
                    &model, &grid,
                )?)?)
            } else {
                None
            };
            let mut record = MetricsRecord::from_breakdown(
                epoch,
                steps_per_epoch,
                lr_schedule(epoch, config),
                &LossBreakdown {
                    reconstruction: 0.0,
                    kl_categorical: 0.0,
                    kl_gaussian_weighted: 0.0,
                    supervised_ce: 0.0,
                    sci_labeled: 0.0,
                    sci_unlabeled: 0.0,
                    lambda1: config.lambda1,
                    lambda2: ramp_up(epoch, config.lambda1, config.ramp_horizon),
                    total: 0.0,
                },
            );
            record.test_error = Some(err);
            record.kl_metric = Some(klm);
            record.negative_ssim = nssim;
            writeln!(log, "{}", serde_json::to_string(&record).unwrap())?;
            if is_last {
                final_eval = (Some(err), Some(klm), nssim);
            }
            // track the best-error checkpoint
            if best.as_ref().map(|(e, _)| err < *e).unwrap_or(true) {
                let dir = out_dir.join("ckpt-best");
                save_checkpoint(
                    &dir,
                    &model,
                    CheckpointMeta {
                        epoch,
                        seed: config.seed,
                    },
                )?;
                opt.save(&dir.join("optimizer.bin"))?;
                best = Some((err, dir));
            }
        }

        if epoch % config.checkpoint_every.max(1) == 0 || is_last {
            let dir = checkpoint_dir(out_dir, epoch);
            save_checkpoint(
                &dir,
                &model,
                CheckpointMeta {
                    epoch,
                    seed: config.seed,
                },
            )?;
            opt.save(&dir.join("optimizer.bin"))?;
            checkpoints.push(dir);
        }
        log.flush()?;
    }

    let final_checkpoint = checkpoints
        .last()
        .cloned()
        .unwrap_or_else(|| checkpoint_dir(out_dir, config.epochs));
    Ok(RunArtifacts {
        out_dir: out_dir.to_path_buf(),
        config_path,
        metrics_path,
        checkpoints,
        best_checkpoint: best.map(|(_, p)| p),
        final_checkpoint,
        final_test_error: final_eval.0,
        final_kl_metric: final_eval.1,
        final_negative_ssim: final_eval.2,
        vnat_report: None,
    })
}

fn eval_slice(split: &DatasetSplit, cap: Option<usize>) -> (ArrayD<f64>, Vec<usize>) {
    let n = split.test_images.shape()[0];
    match cap {
        Some(c) if c < n => {
            let ids: Vec<usize> = (0..c).collect();
            (
                take_rows(&split.test_images, &ids),
                split.test_labels[..c].to_vec(),
            )
        }
        _ => (split.test_images.clone(), split.test_labels.clone()),
    }
}

/// Grid extent covering the prior support: the largest center coordinate
/// plus two standard deviations of the widest component.
pub fn grid_extent(prior: &MixturePriorSpec) -> f64 {
    let max_center = prior
        .centers()
        .iter()
        .map(|v| v.abs())
        .fold(0.0, f64::max);
    let max_sd = prior
        .variances()
        .iter()
        .map(|v| v.sqrt())
        .fold(0.0, f64::max);
    max_center + 2.0 * max_sd
}

/// Parse a metrics log back into records.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(line)
                .map_err(|e| ExonError::Serialization(format!("bad metrics line: {e}")))?,
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
