//! Encoder, decoder, and classifier definitions and their forward contracts.
//!
//! Three architectures ship: the MNIST stack (2-D latent space, dense
//! encoder/decoder, small conv classifier), the CIFAR-10 stack (256-D latent
//! space, conv encoder/decoder, 4.5M-parameter conv classifier), and a tiny
//! toy stack exercising every layer kind, used by gradient-verification
//! tests.
//!
//! The MNIST decoder ends in tanh rather than the ReLU of the original
//! description: data is scaled to [-1, 1], which a ReLU output cannot reach
//! on the negative side, and the CIFAR-10 decoder already ends in tanh.

pub mod checkpoint;
pub mod layers;

use crate::autodiff::{softmax_last_arr, Tape, Var};
use crate::error::{ExonError, Result};
use layers::{Act, BnUpdate, Bound, DenseHead, ForwardMode, NetBuilder, Network};
use ndarray::{Array2, Array3, ArrayD, Axis, IxDyn};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

/// Which architecture family a model instantiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchId {
    Mnist,
    Cifar10,
    /// Minimal stack for gradient and pipeline tests.
    Toy,
}

impl std::fmt::Display for ArchId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ArchId::Mnist => write!(f, "mnist"),
            ArchId::Cifar10 => write!(f, "cifar10"),
            ArchId::Toy => write!(f, "toy"),
        }
    }
}

/// Static description of one model family: shapes, sizes, and the layer
/// stacks of its three networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchitectureSpec {
    pub id: ArchId,
    /// Input image shape, HWC.
    pub input_shape: [usize; 3],
    pub latent_dim: usize,
    pub num_classes: usize,
    /// Spatial-dropout rate used by the classifier.
    pub drop_rate: f64,
}

impl ArchitectureSpec {
    pub fn mnist() -> Self {
        ArchitectureSpec {
            id: ArchId::Mnist,
            input_shape: [28, 28, 1],
            latent_dim: 2,
            num_classes: 10,
            drop_rate: 0.5,
        }
    }

    pub fn cifar10() -> Self {
        ArchitectureSpec {
            id: ArchId::Cifar10,
            input_shape: [32, 32, 3],
            latent_dim: 256,
            num_classes: 10,
            drop_rate: 0.1,
        }
    }

    pub fn toy() -> Self {
        ArchitectureSpec {
            id: ArchId::Toy,
            input_shape: [6, 6, 1],
            latent_dim: 2,
            num_classes: 3,
            drop_rate: 0.3,
        }
    }

    pub fn image_len(&self) -> usize {
        self.input_shape.iter().product()
    }
}

/// Posterior mixture parameters for a batch: per-input mixture weights plus
/// per-component Gaussian means and log-variances.
#[derive(Debug, Clone)]
pub struct EncoderOutput {
    /// `[N, K]`, rows on the simplex.
    pub mixture_weights: Array2<f64>,
    /// `[N, K, d]`
    pub means: Array3<f64>,
    /// `[N, K, d]`
    pub log_variances: Array3<f64>,
}

impl EncoderOutput {
    pub fn num_samples(&self) -> usize {
        self.mixture_weights.nrows()
    }

    pub fn num_components(&self) -> usize {
        self.mixture_weights.ncols()
    }

    pub fn latent_dim(&self) -> usize {
        self.means.shape()[2]
    }

    /// Check the simplex and finiteness invariants.
    pub fn validate(&self) -> Result<()> {
        let (n, k) = self.mixture_weights.dim();
        if self.means.shape() != [n, k, self.latent_dim()]
            || self.log_variances.shape() != self.means.shape()
        {
            return Err(ExonError::invalid("encoder output shapes disagree"));
        }
        for row in self.mixture_weights.rows() {
            if row.iter().any(|w| !w.is_finite() || *w < 0.0) {
                return Err(ExonError::invalid("mixture weights must be nonnegative"));
            }
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(ExonError::invalid(format!(
                    "mixture weights must sum to 1 within 1e-6 (got {s})"
                )));
            }
        }
        if self.means.iter().any(|v| !v.is_finite())
            || self.log_variances.iter().any(|v| !v.is_finite())
        {
            return Err(ExonError::invalid("encoder output must be finite"));
        }
        Ok(())
    }

    /// Per-input variances `exp(log_variances)`.
    pub fn variances(&self) -> Array3<f64> {
        self.log_variances.mapv(f64::exp)
    }
}

/// The three parameter sets plus the fixed decoder variance.
#[derive(Debug, Clone)]
pub struct ModelParameters {
    pub arch: ArchitectureSpec,
    /// Fixed decoder observation variance; immutable during a run.
    pub beta: f64,
    /// Classifier network (eta). Emits logits; softmax is applied by
    /// [`ModelParameters::classify`].
    pub classifier: Network,
    /// Encoder trunk (xi) shared by the mixture heads.
    pub encoder: Network,
    pub mean_heads: Vec<DenseHead>,
    pub logvar_heads: Vec<DenseHead>,
    /// Decoder network (theta).
    pub decoder: Network,
}

/// Tape bindings for all three parameter sets.
pub struct BoundModel {
    pub classifier: Bound,
    pub encoder: Bound,
    pub decoder: Bound,
}

/// Batch-norm running-statistics updates collected during one training step,
/// kept separate per network so indices stay meaningful.
#[derive(Default)]
pub struct ModelBnUpdates {
    pub classifier: Vec<BnUpdate>,
    pub encoder: Vec<BnUpdate>,
    pub decoder: Vec<BnUpdate>,
}

/// Model-level forward mode. Training passes need a noise stream (dropout,
/// and the caller's sampling) and somewhere to collect batch-norm updates.
pub enum ModelMode<'a> {
    Train {
        rng: &'a mut ChaCha20Rng,
        bn: &'a mut ModelBnUpdates,
    },
    Eval,
}

/// Tape handles produced by [`ModelParameters::encode_on_tape`].
pub struct EncodedVars {
    /// `[N, K]` softmax mixture weights.
    pub weights: Var,
    /// `[N, K]` log-softmax of the classifier logits.
    pub log_weights: Var,
    /// `[N, K]` raw classifier logits.
    pub logits: Var,
    /// `[N, K, d]`
    pub means: Var,
    /// `[N, K, d]`
    pub log_variances: Var,
}

impl ModelParameters {
    /// Build a freshly initialized model. `beta` must be positive.
    pub fn new(arch: ArchitectureSpec, beta: f64, seed: u64) -> Result<Self> {
        if !(beta.is_finite() && beta > 0.0) {
            return Err(ExonError::invalid("beta must be a positive real"));
        }
        let (classifier, encoder, mean_heads, logvar_heads, decoder) = match arch.id {
            ArchId::Mnist => build_mnist(&arch, seed),
            ArchId::Cifar10 => build_cifar10(&arch, seed),
            ArchId::Toy => build_toy(&arch, seed),
        };
        Ok(ModelParameters {
            arch,
            beta,
            classifier,
            encoder,
            mean_heads,
            logvar_heads,
            decoder,
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            classifier: self.classifier.bind(tape),
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
        }
    }

    fn check_image_batch(&self, x: &ArrayD<f64>) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.arch.input_shape {
            return Err(ExonError::invalid(format!(
                "expected image batch [N, {:?}], got {:?}",
                self.arch.input_shape, s
            )));
        }
        Ok(())
    }

    /// Classifier logits for an on-tape image batch.
    pub fn classifier_logits_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        mode: &mut ModelMode,
    ) -> Var {
        match mode {
            ModelMode::Train { rng, bn } => {
                let mut fm = ForwardMode::Train {
                    rng,
                    bn_updates: &mut bn.classifier,
                };
                self.classifier.forward(tape, &bound.classifier, x, &mut fm)
            }
            ModelMode::Eval => {
                self.classifier
                    .forward(tape, &bound.classifier, x, &mut ForwardMode::Eval)
            }
        }
    }

    /// Full posterior parameters for an on-tape image batch. The mixture
    /// weights are the classifier's softmax output.
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        x: Var,
        mode: &mut ModelMode,
    ) -> EncodedVars {
        let logits = self.classifier_logits_on_tape(tape, bound, x, mode);
        let weights = tape.softmax_last(logits);
        let log_weights = tape.log_softmax_last(logits);
        let trunk = match mode {
            ModelMode::Train { rng, bn } => {
                let mut fm = ForwardMode::Train {
                    rng,
                    bn_updates: &mut bn.encoder,
                };
                self.encoder.forward(tape, &bound.encoder, x, &mut fm)
            }
            ModelMode::Eval => self
                .encoder
                .forward(tape, &bound.encoder, x, &mut ForwardMode::Eval),
        };
        let mean_parts: Vec<Var> = self
            .mean_heads
            .iter()
            .map(|h| h.forward(tape, &bound.encoder, trunk))
            .collect();
        let logvar_parts: Vec<Var> = self
            .logvar_heads
            .iter()
            .map(|h| h.forward(tape, &bound.encoder, trunk))
            .collect();
        let means = tape.stack_axis1(&mean_parts);
        let log_variances = tape.stack_axis1(&logvar_parts);
        EncodedVars {
            weights,
            log_weights,
            logits,
            means,
            log_variances,
        }
    }

    /// Decode an on-tape latent batch `[N, d]` to images.
    pub fn decode_on_tape(
        &self,
        tape: &mut Tape,
        bound: &BoundModel,
        z: Var,
        mode: &mut ModelMode,
    ) -> Var {
        match mode {
            ModelMode::Train { rng, bn } => {
                let mut fm = ForwardMode::Train {
                    rng,
                    bn_updates: &mut bn.decoder,
                };
                self.decoder.forward(tape, &bound.decoder, z, &mut fm)
            }
            ModelMode::Eval => self
                .decoder
                .forward(tape, &bound.decoder, z, &mut ForwardMode::Eval),
        }
    }

    /// Fold one step's collected batch-norm statistics into the running
    /// buffers.
    pub fn apply_bn_updates(&mut self, updates: &ModelBnUpdates) {
        self.classifier.apply_bn_updates(&updates.classifier);
        self.encoder.apply_bn_updates(&updates.encoder);
        self.decoder.apply_bn_updates(&updates.decoder);
    }

    /// Eval-mode class probabilities `[N, K]` (deterministic: dropout off,
    /// frozen batch-norm statistics).
    pub fn classify(&self, x: &ArrayD<f64>) -> Result<Array2<f64>> {
        self.check_image_batch(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let logits = self.classifier_logits_on_tape(&mut tape, &bound, xv, &mut ModelMode::Eval);
        let probs = softmax_last_arr(&tape.value(logits));
        Ok(probs.into_dimensionality::<ndarray::Ix2>().unwrap())
    }

    /// Eval-mode posterior parameters.
    pub fn encode(&self, x: &ArrayD<f64>) -> Result<EncoderOutput> {
        self.check_image_batch(x)?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let enc = self.encode_on_tape(&mut tape, &bound, xv, &mut ModelMode::Eval);
        let out = EncoderOutput {
            mixture_weights: tape
                .to_owned_value(enc.weights)
                .into_dimensionality::<ndarray::Ix2>()
                .unwrap(),
            means: tape
                .to_owned_value(enc.means)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
            log_variances: tape
                .to_owned_value(enc.log_variances)
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap(),
        };
        out.validate()?;
        Ok(out)
    }

    /// Eval-mode decode of a latent batch `[N, d]`.
    pub fn decode(&self, z: &Array2<f64>) -> Result<ArrayD<f64>> {
        if z.ncols() != self.arch.latent_dim {
            return Err(ExonError::invalid(format!(
                "latent batch has dimension {}, model expects {}",
                z.ncols(),
                self.arch.latent_dim
            )));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let zv = tape.constant(z.clone().into_dyn());
        let out = self.decode_on_tape(&mut tape, &bound, zv, &mut ModelMode::Eval);
        Ok(tape.to_owned_value(out))
    }

    /// Total trainable parameter count across the three networks.
    pub fn num_params(&self) -> usize {
        self.classifier.params.num_params()
            + self.encoder.params.num_params()
            + self.decoder.params.num_params()
    }

    /// Architecture fingerprint covering the spec and every layer of the
    /// three stacks.
    pub fn arch_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.arch).unwrap());
        for net in [&self.classifier, &self.encoder, &self.decoder] {
            for line in net.describe() {
                h.update(line.as_bytes());
                h.update(b"\n");
            }
        }
        let digest = h.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn build_mnist(
    arch: &ArchitectureSpec,
    seed: u64,
) -> (Network, Network, Vec<DenseHead>, Vec<DenseHead>, Network) {
    let k = arch.num_classes;
    let d = arch.latent_dim;
    let rate = arch.drop_rate;

    let classifier = NetBuilder::new("classifier", &arch.input_shape, seed ^ 0xC1A5)
        .conv2d(32, 5, 1)
        .batch_norm()
        .activation(Act::LeakyRelu(0.1))
        .max_pool2()
        .spatial_dropout(rate)
        .conv2d(64, 3, 1)
        .batch_norm()
        .activation(Act::LeakyRelu(0.1))
        .max_pool2()
        .spatial_dropout(rate)
        .conv2d(128, 3, 1)
        .batch_norm()
        .activation(Act::LeakyRelu(0.1))
        .max_pool2()
        .spatial_dropout(rate)
        .global_avg_pool()
        .dense(64)
        .batch_norm()
        .activation(Act::Relu)
        .dense(k)
        .build();

    let mut enc = NetBuilder::new("encoder", &arch.input_shape, seed ^ 0xE4C0)
        .flatten()
        .dense(256)
        .activation(Act::Relu)
        .dense(128)
        .activation(Act::Relu);
    let mean_heads = enc.heads(d, k, "mean");
    let logvar_heads = enc.heads(d, k, "logvar");
    let encoder = enc.build();

    let decoder = NetBuilder::new("decoder", &[d], seed ^ 0xDEC0)
        .dense(128)
        .activation(Act::Relu)
        .dense(256)
        .activation(Act::Relu)
        .dense(arch.image_len())
        .activation(Act::Tanh)
        .reshape(&arch.input_shape)
        .build();

    (classifier, encoder, mean_heads, logvar_heads, decoder)
}

fn build_cifar10(
    arch: &ArchitectureSpec,
    seed: u64,
) -> (Network, Network, Vec<DenseHead>, Vec<DenseHead>, Network) {
    let k = arch.num_classes;
    let d = arch.latent_dim;
    let rate = arch.drop_rate;
    let lrelu = Act::LeakyRelu(0.1);

    let mut c = NetBuilder::new("classifier", &arch.input_shape, seed ^ 0xC1A5);
    for _ in 0..3 {
        c = c.conv2d(128, 3, 1).batch_norm().activation(lrelu);
    }
    c = c.max_pool2().spatial_dropout(rate);
    for _ in 0..3 {
        c = c.conv2d(256, 3, 1).batch_norm().activation(lrelu);
    }
    c = c.max_pool2().spatial_dropout(rate);
    let classifier = c
        .conv2d(512, 3, 1)
        .batch_norm()
        .activation(lrelu)
        .conv2d(256, 3, 1)
        .batch_norm()
        .activation(lrelu)
        .conv2d(128, 3, 1)
        .batch_norm()
        .activation(lrelu)
        .global_avg_pool()
        .dense(k)
        .build();

    let mut enc = NetBuilder::new("encoder", &arch.input_shape, seed ^ 0xE4C0)
        .conv2d(32, 5, 2)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d(64, 4, 2)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d(128, 4, 2)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d(256, 4, 1)
        .batch_norm()
        .activation(Act::Relu)
        .flatten()
        .dense(1024)
        .batch_norm();
    let mean_heads = enc.heads(d, k, "mean");
    let logvar_heads = enc.heads(d, k, "logvar");
    let encoder = enc.build();

    let decoder = NetBuilder::new("decoder", &[d], seed ^ 0xDEC0)
        .dense(4 * 4 * 512)
        .batch_norm()
        .activation(Act::Relu)
        .reshape(&[4, 4, 512])
        .conv2d_transpose(256, 5, 2)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d_transpose(128, 5, 2)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d_transpose(64, 5, 2)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d_transpose(32, 5, 1)
        .batch_norm()
        .activation(Act::Relu)
        .conv2d(3, 4, 1)
        .activation(Act::Tanh)
        .build();

    (classifier, encoder, mean_heads, logvar_heads, decoder)
}

fn build_toy(
    arch: &ArchitectureSpec,
    seed: u64,
) -> (Network, Network, Vec<DenseHead>, Vec<DenseHead>, Network) {
    let k = arch.num_classes;
    let d = arch.latent_dim;

    let classifier = NetBuilder::new("classifier", &arch.input_shape, seed ^ 0xC1A5)
        .conv2d(4, 3, 1)
        .batch_norm()
        .activation(Act::LeakyRelu(0.1))
        .max_pool2()
        .spatial_dropout(arch.drop_rate)
        .global_avg_pool()
        .dense(k)
        .build();

    let mut enc = NetBuilder::new("encoder", &arch.input_shape, seed ^ 0xE4C0)
        .flatten()
        .dense(16)
        .activation(Act::Relu);
    let mean_heads = enc.heads(d, k, "mean");
    let logvar_heads = enc.heads(d, k, "logvar");
    let encoder = enc.build();

    let decoder = NetBuilder::new("decoder", &[d], seed ^ 0xDEC0)
        .dense(16)
        .activation(Act::Relu)
        .dense(arch.image_len())
        .activation(Act::Tanh)
        .reshape(&arch.input_shape)
        .build();

    (classifier, encoder, mean_heads, logvar_heads, decoder)
}

/// Convenience: batch images `[N, H, W, C]` from a flat slice of samples.
pub fn stack_images(images: &[ArrayD<f64>]) -> ArrayD<f64> {
    assert!(!images.is_empty());
    let mut shape = vec![images.len()];
    shape.extend_from_slice(images[0].shape());
    let mut out = ArrayD::zeros(IxDyn(&shape));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(img);
    }
    out
}
