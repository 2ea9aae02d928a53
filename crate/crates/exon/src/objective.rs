//! Every term of the training objective: reconstruction, the closed-form KL
//! upper bound (categorical part plus weight-averaged component Gaussian
//! KLs), supervised cross-entropy, the soft-label consistency interpolation
//! (SCI) losses, and the ramp-up schedule for the unlabeled weight.
//!
//! Each term exists twice: as a plain array function (the contract used by
//! analysis and tests) and as part of the recorded training graph built by
//! [`total_objective`]. The objective is minimized in its beta-divided form:
//! reconstruction carries weight `1/beta` and the KL bound weight 1, which
//! follows the same optimization path as the undivided form with
//! better-conditioned magnitudes.

use crate::autodiff::{Tape, Var};
use crate::error::{ExonError, Result};
use crate::networks::{
    BoundModel, EncoderOutput, ModelBnUpdates, ModelMode, ModelParameters,
};
use crate::priors::MixturePriorSpec;
use crate::stochastic::{
    self, apply_permutation, make_mixup_batch, pair_targets, permutation, sample_posterior_on_tape,
    stack_mixed, AugmentSpec, MixupPair, RhoSampler,
};
use ndarray::{Array1, Array2, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Probability floor applied before logs in entropies and the categorical KL.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-term values of one objective evaluation. Every loss field is a
/// per-example mean within its own batch (combined batch for the ELBO terms,
/// labeled batch for the supervised terms, unlabeled batch for the unlabeled
/// SCI term), all unweighted; `total` applies the schedule weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub reconstruction: f64,
    pub kl_categorical: f64,
    pub kl_gaussian_weighted: f64,
    pub supervised_ce: f64,
    pub sci_labeled: f64,
    pub sci_unlabeled: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Recombine the parts into the scalar the trainer minimizes:
    /// `recon/beta + kl_cat + kl_gw + (1 + l1/beta) ce + (l1/beta) sciL + (l2/beta) sciU`.
    pub fn combine(&self, beta: f64) -> f64 {
        self.reconstruction / beta
            + self.kl_categorical
            + self.kl_gaussian_weighted
            + (1.0 + self.lambda1 / beta) * self.supervised_ce
            + self.lambda1 / beta * self.sci_labeled
            + self.lambda2 / beta * self.sci_unlabeled
    }

    /// Check the recombination identity and KL nonnegativity.
    pub fn validate(&self, beta: f64) -> Result<()> {
        let expect = self.combine(beta);
        let rel = (self.total - expect).abs() / expect.abs().max(1.0);
        if rel > 1e-6 {
            return Err(ExonError::invalid(format!(
                "loss parts do not recombine: total {} vs {}",
                self.total, expect
            )));
        }
        if self.kl_categorical < -1e-7 || self.kl_gaussian_weighted < -1e-7 {
            return Err(ExonError::invalid("negative KL part"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        [
            self.reconstruction,
            self.kl_categorical,
            self.kl_gaussian_weighted,
            self.supervised_ce,
            self.sci_labeled,
            self.sci_unlabeled,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }
}

// ---------------------------------------------------------------------------
// Plain operations
// ---------------------------------------------------------------------------

/// Mean over the batch of half the summed squared pixel difference.
pub fn reconstruction_loss(x: &ArrayD<f64>, x_hat: &ArrayD<f64>) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(ExonError::invalid(format!(
            "shape mismatch: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let n = x.shape()[0].max(1);
    let sse: f64 = x
        .iter()
        .zip(x_hat.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(0.5 * sse / n as f64)
}

/// KL divergence between diagonal Gaussians:
/// `1/2 sum_j [ (mq - mp)^2/vp + vq/vp + ln(vp/vq) - 1 ]`.
pub fn gaussian_kl(
    mu_q: &Array1<f64>,
    var_q: &Array1<f64>,
    mu_p: &Array1<f64>,
    var_p: &Array1<f64>,
) -> Result<f64> {
    let d = mu_q.len();
    if var_q.len() != d || mu_p.len() != d || var_p.len() != d {
        return Err(ExonError::invalid("gaussian_kl: dimension mismatch"));
    }
    if var_q.iter().chain(var_p.iter()).any(|v| *v <= 0.0) {
        return Err(ExonError::invalid(
            "gaussian_kl: variances must be strictly positive",
        ));
    }
    let mut acc = 0.0;
    for j in 0..d {
        let diff = mu_q[j] - mu_p[j];
        acc += diff * diff / var_p[j] + var_q[j] / var_p[j] + (var_p[j] / var_q[j]).ln() - 1.0;
    }
    Ok(0.5 * acc)
}

/// Exact discrete KL with the `0 ln 0 := 0` convention and a probability
/// floor on the reference distribution.
pub fn categorical_kl(w: &Array1<f64>, p: &Array1<f64>) -> f64 {
    w.iter()
        .zip(p.iter())
        .map(|(wi, pi)| {
            if *wi <= 0.0 {
                0.0
            } else {
                wi * (wi.ln() - pi.max(PROB_FLOOR).ln())
            }
        })
        .sum()
}

/// Per-example closed-form upper bound parts:
/// `KL(w(y|x) || p(y))` and `sum_k w_k(x) KL(q_k(x) || p_k)`.
pub fn kl_upper_bound_per_example(
    enc: &EncoderOutput,
    prior: &MixturePriorSpec,
) -> Result<(Array1<f64>, Array1<f64>)> {
    let (n, k, d) = (enc.num_samples(), enc.num_components(), enc.latent_dim());
    if k != prior.num_components() || d != prior.latent_dim() {
        return Err(ExonError::invalid(format!(
            "encoder output is K={k}, d={d} but prior is K={}, d={}",
            prior.num_components(),
            prior.latent_dim()
        )));
    }
    let mut cat = Array1::zeros(n);
    let mut gauss = Array1::zeros(n);
    for i in 0..n {
        let w = enc.mixture_weights.row(i).to_owned();
        cat[i] = categorical_kl(&w, prior.weights());
        let mut acc = 0.0;
        for kk in 0..k {
            if w[kk] == 0.0 {
                continue;
            }
            let mu_q = enc.means.index_axis(Axis(0), i).row(kk).to_owned();
            let var_q = enc
                .log_variances
                .index_axis(Axis(0), i)
                .row(kk)
                .mapv(f64::exp);
            let kl = gaussian_kl(
                &mu_q,
                &var_q,
                &prior.center(kk).to_owned(),
                &prior.variance(kk).to_owned(),
            )?;
            acc += w[kk] * kl;
        }
        gauss[i] = acc;
    }
    Ok((cat, gauss))
}

/// Batch means of the two closed-form upper-bound parts.
pub fn kl_upper_bound(enc: &EncoderOutput, prior: &MixturePriorSpec) -> Result<(f64, f64)> {
    let (cat, gauss) = kl_upper_bound_per_example(enc, prior)?;
    let n = cat.len().max(1) as f64;
    Ok((cat.sum() / n, gauss.sum() / n))
}

/// Cross entropy `H(p, q) = -sum p ln max(q, floor)` of one simplex pair.
pub fn cross_entropy(p: &Array1<f64>, q: &Array1<f64>) -> f64 {
    p.iter()
        .zip(q.iter())
        .map(|(pi, qi)| -pi * qi.max(PROB_FLOOR).ln())
        .sum()
}

/// Batch-averaged supervised cross-entropy of one-hot labels against
/// predicted class probabilities.
pub fn supervised_ce(labels: &Array2<f64>, probs: &Array2<f64>) -> Result<f64> {
    if labels.dim() != probs.dim() {
        return Err(ExonError::invalid("supervised_ce: shape mismatch"));
    }
    let n = labels.nrows().max(1);
    let mut acc = 0.0;
    for (lr, pr) in labels.rows().into_iter().zip(probs.rows()) {
        acc += cross_entropy(&lr.to_owned(), &pr.to_owned());
    }
    Ok(acc / n as f64)
}

/// SCI value for one pair given the classifier output on the mixed image:
/// `rho H(y1, f) + (1 - rho) H(y2, f)`.
pub fn sci_from_probs(
    y1: &Array1<f64>,
    y2: &Array1<f64>,
    rho: f64,
    f_mixed: &Array1<f64>,
) -> f64 {
    rho * cross_entropy(y1, f_mixed) + (1.0 - rho) * cross_entropy(y2, f_mixed)
}

/// SCI loss of one pair, evaluating the classifier on the mixed image in
/// training mode (dropout active, batch statistics). Gradients never reach
/// the stored targets, which are plain data.
pub fn sci_loss(
    pair: &MixupPair,
    model: &ModelParameters,
    rng: &mut ChaCha20Rng,
) -> Result<f64> {
    let mut shape = vec![1];
    shape.extend_from_slice(pair.x_tilde.shape());
    let x = pair
        .x_tilde
        .clone()
        .into_shape_with_order(IxDyn(&shape))
        .unwrap();
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let xv = tape.constant(x);
    let mut bn = ModelBnUpdates::default();
    let mut mode = ModelMode::Train { rng, bn: &mut bn };
    let logits = model.classifier_logits_on_tape(&mut tape, &bound, xv, &mut mode);
    let probs = crate::autodiff::softmax_last_arr(&tape.value(logits));
    let f = probs.index_axis(Axis(0), 0).to_owned().into_dimensionality().unwrap();
    Ok(sci_from_probs(&pair.y1_tilde, &pair.y2_tilde, pair.rho, &f))
}

/// Ramp-up weight for the unlabeled SCI term:
/// `lambda1 * exp(-5 (1 - min(1, c/T))^2)` for the 1-based epoch counter `c`.
pub fn ramp_up(epoch: usize, lambda1: f64, horizon: usize) -> f64 {
    let frac = if horizon == 0 {
        1.0
    } else {
        (epoch as f64 / horizon as f64).min(1.0)
    };
    lambda1 * (-5.0 * (1.0 - frac) * (1.0 - frac)).exp()
}

// ---------------------------------------------------------------------------
// Recorded training graph
// ---------------------------------------------------------------------------

/// Knobs the objective needs beyond the model and prior.
#[derive(Debug, Clone)]
pub struct ObjectiveSettings {
    pub lambda1: f64,
    /// Already ramped for the current epoch.
    pub lambda2: f64,
    pub temperature: f64,
    pub rho_sampler: RhoSampler,
    pub augment: AugmentSpec,
}

/// One recorded objective evaluation: the tape, parameter bindings, the
/// scalar root to minimize, pending batch-norm updates, and the numbers.
pub struct StepGraph {
    pub tape: Tape,
    pub bound: BoundModel,
    pub total: Var,
    pub breakdown: LossBreakdown,
    pub bn_updates: ModelBnUpdates,
}

/// The SCI pair sets of one step. Targets are plain data: pseudo-labels are
/// snapshot predictions with no gradient linkage.
#[derive(Debug, Clone, Default)]
pub struct StepPairs {
    pub labeled: Vec<MixupPair>,
    pub unlabeled: Vec<MixupPair>,
}

/// Build the SCI pairs for one step: within-batch random pairing, stochastic
/// augmentation of both endpoints, one-hot targets for labeled pairs and
/// detached snapshot predictions for unlabeled pairs.
pub fn build_step_pairs(
    model: &ModelParameters,
    labeled: (&ArrayD<f64>, &[usize]),
    unlabeled: Option<&ArrayD<f64>>,
    settings: &ObjectiveSettings,
    rng: &mut ChaCha20Rng,
) -> Result<StepPairs> {
    let (xl, yl) = labeled;
    let l = xl.shape()[0];
    let labeled_pairs: Vec<MixupPair> = if l > 0 && settings.lambda1 > 0.0 {
        let idx = permutation(l, rng);
        let x2 = apply_permutation(xl, &idx);
        let y2: Vec<usize> = idx.iter().map(|i| yl[*i]).collect();
        make_mixup_batch(
            xl,
            Some(yl),
            &x2,
            Some(&y2),
            &settings.rho_sampler,
            model,
            &settings.augment,
            rng,
        )?
    } else {
        Vec::new()
    };
    let unlabeled_pairs: Vec<MixupPair> = match unlabeled {
        Some(xu) if xu.shape()[0] > 0 && settings.lambda2 > 0.0 => {
            let x2 = stochastic::permute_batch(xu, rng);
            make_mixup_batch(
                xu,
                None,
                &x2,
                None,
                &settings.rho_sampler,
                model,
                &settings.augment,
                rng,
            )?
        }
        _ => Vec::new(),
    };
    Ok(StepPairs {
        labeled: labeled_pairs,
        unlabeled: unlabeled_pairs,
    })
}

/// Assemble the full objective for one step, building the SCI pairs first.
pub fn total_objective(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    labeled: (&ArrayD<f64>, &[usize]),
    unlabeled: Option<&ArrayD<f64>>,
    settings: &ObjectiveSettings,
    rng: &mut ChaCha20Rng,
) -> Result<StepGraph> {
    validate_objective_inputs(model, prior, labeled, settings)?;
    let pairs = build_step_pairs(model, labeled, unlabeled, settings, rng)?;
    total_objective_from_pairs(model, prior, labeled, unlabeled, &pairs, settings, rng)
}

fn validate_objective_inputs(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    labeled: (&ArrayD<f64>, &[usize]),
    settings: &ObjectiveSettings,
) -> Result<()> {
    let (xl, yl) = labeled;
    let l = xl.shape()[0];
    if yl.len() != l {
        return Err(ExonError::invalid("labeled batch size and label count differ"));
    }
    if l == 0 && settings.lambda1 > 0.0 {
        return Err(ExonError::invalid(
            "labeled batch must be nonempty when lambda1 > 0",
        ));
    }
    let k = model.arch.num_classes;
    if k != prior.num_components() || model.arch.latent_dim != prior.latent_dim() {
        return Err(ExonError::invalid("model and prior disagree on K or d"));
    }
    if yl.iter().any(|y| *y >= k) {
        return Err(ExonError::invalid("label out of range"));
    }
    Ok(())
}

/// Assemble the objective with pre-built pairs. Given a fixed noise stream
/// state and fixed pairs, the recorded graph is a deterministic function of
/// the parameters, which is what finite-difference verification needs.
pub fn total_objective_from_pairs(
    model: &ModelParameters,
    prior: &MixturePriorSpec,
    labeled: (&ArrayD<f64>, &[usize]),
    unlabeled: Option<&ArrayD<f64>>,
    pairs: &StepPairs,
    settings: &ObjectiveSettings,
    rng: &mut ChaCha20Rng,
) -> Result<StepGraph> {
    validate_objective_inputs(model, prior, labeled, settings)?;
    let (xl, yl) = labeled;
    let l = xl.shape()[0];
    let u = unlabeled.map(|x| x.shape()[0]).unwrap_or(0);
    if l + u == 0 {
        return Err(ExonError::invalid("objective needs at least one example"));
    }

    // combined batch for the ELBO block
    let combined = match unlabeled {
        Some(xu) if u > 0 => {
            ndarray::concatenate(Axis(0), &[xl.view(), xu.view()]).expect("batch concat")
        }
        _ => xl.clone(),
    };

    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let mut bn = ModelBnUpdates::default();
    let mut mode = ModelMode::Train { rng, bn: &mut bn };

    let xv = tape.constant(combined);
    let enc = model.encode_on_tape(&mut tape, &bound, xv, &mut mode);
    let z = match &mut mode {
        ModelMode::Train { rng, .. } => {
            sample_posterior_on_tape(&mut tape, &enc, settings.temperature, rng)
        }
        ModelMode::Eval => unreachable!(),
    };
    let x_hat = model.decode_on_tape(&mut tape, &bound, z, &mut mode);

    // reconstruction: mean over batch of 1/2 |x - x_hat|^2
    let diff = tape.sub(x_hat, xv);
    let sq = tape.sqr(diff);
    let flat = tape.flatten_batch(sq);
    let per_example = tape.sum_axis(flat, 1);
    let mean_sse = tape.mean_all(per_example);
    let recon = tape.mul_scalar(mean_sse, 0.5);

    let (kl_cat, kl_gw) = klu_on_tape(&mut tape, &enc, prior);

    // supervised cross-entropy on the labeled slice
    let ce = if l > 0 {
        let k = model.arch.num_classes;
        let logw_l = tape.slice_rows(enc.log_weights, 0, l);
        let mut onehot = Array2::<f64>::zeros((l, k));
        for (i, &y) in yl.iter().enumerate() {
            onehot[[i, y]] = 1.0;
        }
        let oh = tape.constant(onehot.into_dyn());
        let picked = tape.mul(oh, logw_l);
        let per = tape.sum_axis(picked, 1);
        let m = tape.mean_all(per);
        tape.neg(m)
    } else {
        tape.scalar_constant(0.0)
    };

    // SCI terms
    let sci_l = sci_on_tape(&mut tape, model, &bound, &pairs.labeled, &mut mode);
    let sci_u = sci_on_tape(&mut tape, model, &bound, &pairs.unlabeled, &mut mode);

    // total = recon/beta + kl_cat + kl_gw + (1 + l1/b) ce + (l1/b) sciL + (l2/b) sciU
    let beta = model.beta;
    let recon_w = tape.mul_scalar(recon, 1.0 / beta);
    let ce_w = tape.mul_scalar(ce, 1.0 + settings.lambda1 / beta);
    let sci_l_w = tape.mul_scalar(sci_l, settings.lambda1 / beta);
    let sci_u_w = tape.mul_scalar(sci_u, settings.lambda2 / beta);
    let mut total = tape.add(recon_w, kl_cat);
    total = tape.add(total, kl_gw);
    total = tape.add(total, ce_w);
    total = tape.add(total, sci_l_w);
    total = tape.add(total, sci_u_w);

    let breakdown = LossBreakdown {
        reconstruction: tape.scalar(recon),
        kl_categorical: tape.scalar(kl_cat),
        kl_gaussian_weighted: tape.scalar(kl_gw),
        supervised_ce: tape.scalar(ce),
        sci_labeled: tape.scalar(sci_l),
        sci_unlabeled: tape.scalar(sci_u),
        lambda1: settings.lambda1,
        lambda2: settings.lambda2,
        total: tape.scalar(total),
    };

    drop(mode);
    Ok(StepGraph {
        tape,
        bound,
        total,
        breakdown,
        bn_updates: bn,
    })
}

/// Record both closed-form KL upper-bound parts as batch means. The prior
/// enters as constants; gradients flow through the encoder outputs.
pub fn klu_on_tape(
    tape: &mut Tape,
    enc: &crate::networks::EncodedVars,
    prior: &MixturePriorSpec,
) -> (Var, Var) {
    let n = tape.shape(enc.weights)[0];

    // categorical part against the prior weights
    let log_p = prior.weights().mapv(|w| w.max(PROB_FLOOR).ln());
    let log_p_b = broadcast_rows(&log_p, n);
    let log_p_v = tape.constant(log_p_b);
    let log_ratio = tape.sub(enc.log_weights, log_p_v);
    let w_logr = tape.mul(enc.weights, log_ratio);
    let cat_per = tape.sum_axis(w_logr, 1);
    let kl_cat = tape.mean_all(cat_per);

    // weighted component Gaussian KLs against the prior components
    let centers_v = tape.constant(broadcast_kd(prior.centers(), n));
    let inv_varp_v = tape.constant(broadcast_kd(&prior.variances().mapv(|v| 1.0 / v), n));
    let log_varp_v = tape.constant(broadcast_kd(&prior.variances().mapv(f64::ln), n));
    let dm = tape.sub(enc.means, centers_v);
    let dm2 = tape.sqr(dm);
    let t1 = tape.mul(dm2, inv_varp_v);
    let var_q = tape.exp(enc.log_variances);
    let t2 = tape.mul(var_q, inv_varp_v);
    let t3 = tape.sub(log_varp_v, enc.log_variances);
    let s12 = tape.add(t1, t2);
    let s123 = tape.add(s12, t3);
    let inner = tape.add_scalar(s123, -1.0);
    let half = tape.mul_scalar(inner, 0.5);
    let per_component = tape.sum_axis(half, 2); // [N, K]
    let weighted = tape.mul(per_component, enc.weights);
    let gw_per = tape.sum_axis(weighted, 1);
    let kl_gw = tape.mean_all(gw_per);

    (kl_cat, kl_gw)
}

/// Mean SCI loss of a pair list, recorded on the tape (classifier in
/// training mode on the mixed images).
fn sci_on_tape(
    tape: &mut Tape,
    model: &ModelParameters,
    bound: &BoundModel,
    pairs: &[MixupPair],
    mode: &mut ModelMode,
) -> Var {
    if pairs.is_empty() {
        return tape.scalar_constant(0.0);
    }
    let mixed = stack_mixed(pairs);
    let (t1, t2, rho) = pair_targets(pairs);
    let xv = tape.constant(mixed);
    let logits = model.classifier_logits_on_tape(tape, bound, xv, mode);
    let logf = tape.log_softmax_last(logits);
    let t1v = tape.constant(t1.into_dyn());
    let t2v = tape.constant(t2.into_dyn());
    let h1p = tape.mul(t1v, logf);
    let h1 = tape.sum_axis(h1p, 1); // [P] of -H(y1, f) sign pending
    let h2p = tape.mul(t2v, logf);
    let h2 = tape.sum_axis(h2p, 1);
    let rho_v = tape.constant(rho.clone().into_dyn());
    let one_minus = tape.constant(rho.mapv(|r| 1.0 - r).into_dyn());
    let a = tape.mul(rho_v, h1);
    let b = tape.mul(one_minus, h2);
    let s = tape.add(a, b);
    let m = tape.mean_all(s);
    tape.neg(m)
}

fn broadcast_rows(v: &Array1<f64>, n: usize) -> ArrayD<f64> {
    let k = v.len();
    let mut out = ArrayD::zeros(IxDyn(&[n, k]));
    for i in 0..n {
        for j in 0..k {
            out[[i, j]] = v[j];
        }
    }
    out
}

fn broadcast_kd(m: &Array2<f64>, n: usize) -> ArrayD<f64> {
    let (k, d) = m.dim();
    let mut out = ArrayD::zeros(IxDyn(&[n, k, d]));
    for i in 0..n {
        for kk in 0..k {
            for j in 0..d {
                out[[i, kk, j]] = m[[kk, j]];
            }
        }
    }
    out
}
