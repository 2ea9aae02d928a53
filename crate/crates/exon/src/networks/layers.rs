//! Sequential layer stacks over the autodiff tape.
//!
//! A [`Network`] owns its parameters ([`ParamSet`]) and a list of [`Layer`]s
//! referencing them by index. Parameters are bound onto a tape once per step
//! so gradients accumulate across repeated forward calls.

use crate::autodiff::{Arr, Tape, Var};
use ndarray::{Array1, IxDyn};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

/// One named tensor (trainable parameter or running-statistic buffer).
#[derive(Debug, Clone)]
pub struct ParamTensor {
    pub name: String,
    pub value: Arr,
}

/// Parameters of one network: trainable tensors plus non-trainable buffers
/// (batch-norm running statistics).
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    pub tensors: Vec<ParamTensor>,
    pub buffers: Vec<ParamTensor>,
}

impl ParamSet {
    fn add_tensor(&mut self, name: impl Into<String>, value: Arr) -> usize {
        self.tensors.push(ParamTensor {
            name: name.into(),
            value,
        });
        self.tensors.len() - 1
    }

    fn add_buffer(&mut self, name: impl Into<String>, value: Arr) -> usize {
        self.buffers.push(ParamTensor {
            name: name.into(),
            value,
        });
        self.buffers.len() - 1
    }

    /// Total number of trainable scalars.
    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }
}

/// Activation applied by an [`Layer::Activation`] entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Linear,
}

impl Act {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Act::Relu => tape.relu(x),
            Act::LeakyRelu(a) => tape.leaky_relu(x, a),
            Act::Tanh => tape.tanh(x),
            Act::Linear => x,
        }
    }

    fn describe(self) -> String {
        match self {
            Act::Relu => "ReLU".into(),
            Act::LeakyRelu(a) => format!("LeakyReLU({a})"),
            Act::Tanh => "tanh".into(),
            Act::Linear => "Linear".into(),
        }
    }
}

/// One step of a sequential stack. Indices refer into the owning
/// [`Network`]'s [`ParamSet`].
#[derive(Debug, Clone)]
pub enum Layer {
    Dense {
        w: usize,
        b: usize,
    },
    Conv2d {
        w: usize,
        b: usize,
        stride: usize,
    },
    ConvTranspose2d {
        w: usize,
        b: usize,
        stride: usize,
    },
    BatchNorm {
        gamma: usize,
        beta: usize,
        mean_buf: usize,
        var_buf: usize,
        momentum: f64,
        eps: f64,
    },
    Activation(Act),
    MaxPool2,
    GlobalAvgPool,
    SpatialDropout {
        rate: f64,
    },
    Flatten,
    Reshape(Vec<usize>),
    /// Softmax over the last axis (classifier head).
    Softmax,
}

/// Pending running-statistics update produced by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_buf: usize,
    pub var_buf: usize,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
    pub momentum: f64,
}

/// Forward-pass mode. Training passes sample dropout masks from the given
/// stream and record batch-norm statistics; eval passes are deterministic.
pub enum ForwardMode<'a> {
    Train {
        rng: &'a mut ChaCha20Rng,
        bn_updates: &'a mut Vec<BnUpdate>,
    },
    Eval,
}

/// Tape bindings for one [`ParamSet`], aligned with `tensors`.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

/// A sequential network.
#[derive(Debug, Clone, Default)]
pub struct Network {
    pub layers: Vec<Layer>,
    pub params: ParamSet,
    descriptions: Vec<String>,
}

impl Network {
    /// Bind every trainable tensor onto the tape as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound {
            vars: self
                .params
                .tensors
                .iter()
                .map(|t| tape.leaf(t.value.clone()))
                .collect(),
        }
    }

    /// Run the stack. `x` must already be on the tape.
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var, mode: &mut ForwardMode) -> Var {
        let mut h = x;
        for layer in &self.layers {
            h = match layer {
                Layer::Dense { w, b } => {
                    let y = tape.matmul(h, bound.vars[*w]);
                    tape.add_rowvec(y, bound.vars[*b])
                }
                Layer::Conv2d { w, b, stride } => {
                    let y = tape.conv2d(h, bound.vars[*w], *stride);
                    tape.add_channel(y, bound.vars[*b])
                }
                Layer::ConvTranspose2d { w, b, stride } => {
                    let y = tape.conv2d_transpose(h, bound.vars[*w], *stride);
                    tape.add_channel(y, bound.vars[*b])
                }
                Layer::BatchNorm {
                    gamma,
                    beta,
                    mean_buf,
                    var_buf,
                    momentum,
                    eps,
                } => match mode {
                    ForwardMode::Train { bn_updates, .. } => {
                        let (y, mean, var) =
                            tape.batch_norm_train(h, bound.vars[*gamma], bound.vars[*beta], *eps);
                        bn_updates.push(BnUpdate {
                            mean_buf: *mean_buf,
                            var_buf: *var_buf,
                            mean,
                            var,
                            momentum: *momentum,
                        });
                        y
                    }
                    ForwardMode::Eval => {
                        let rm = to_1d(&self.params.buffers[*mean_buf].value);
                        let rv = to_1d(&self.params.buffers[*var_buf].value);
                        tape.batch_norm_eval(h, bound.vars[*gamma], bound.vars[*beta], &rm, &rv, *eps)
                    }
                },
                Layer::Activation(a) => a.apply(tape, h),
                Layer::MaxPool2 => tape.max_pool2(h),
                Layer::GlobalAvgPool => tape.global_avg_pool(h),
                Layer::SpatialDropout { rate } => match mode {
                    ForwardMode::Train { rng, .. } => {
                        let shape = tape.shape(h).to_vec();
                        assert_eq!(shape.len(), 4, "spatial dropout expects NHWC");
                        let (n, c) = (shape[0], shape[3]);
                        let keep = 1.0 - rate;
                        let mut mask = Arr::zeros(IxDyn(&[n, 1, 1, c]));
                        for v in mask.iter_mut() {
                            *v = if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 };
                        }
                        let mask = mask
                            .broadcast(IxDyn(&shape))
                            .expect("dropout mask broadcast")
                            .to_owned();
                        let m = tape.constant(mask);
                        tape.mul(h, m)
                    }
                    ForwardMode::Eval => h,
                },
                Layer::Flatten => tape.flatten_batch(h),
                Layer::Reshape(dims) => {
                    let n = tape.shape(h)[0];
                    let mut shape = vec![n];
                    shape.extend_from_slice(dims);
                    tape.reshape(h, &shape)
                }
                Layer::Softmax => tape.softmax_last(h),
            };
        }
        h
    }

    /// Apply collected running-statistics updates in call order.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let apply = |buf: &mut Arr, new: &Array1<f64>, momentum: f64| {
                for (b, n) in buf.iter_mut().zip(new.iter()) {
                    *b = momentum * *b + (1.0 - momentum) * n;
                }
            };
            apply(&mut self.params.buffers[u.mean_buf].value, &u.mean, u.momentum);
            apply(&mut self.params.buffers[u.var_buf].value, &u.var, u.momentum);
        }
    }

    /// Human-readable layer descriptions (architecture manifest content).
    pub fn describe(&self) -> &[String] {
        &self.descriptions
    }
}

fn to_1d(a: &Arr) -> Array1<f64> {
    a.view()
        .into_dimensionality::<ndarray::Ix1>()
        .expect("1-D buffer")
        .to_owned()
}

/// Builds a [`Network`], tracking the running feature shape so layer
/// constructors can size their parameters.
pub struct NetBuilder {
    net: Network,
    shape: Vec<usize>,
    rng: ChaCha20Rng,
    prefix: String,
    bn_momentum: f64,
    bn_eps: f64,
}

impl NetBuilder {
    /// `input_shape` excludes the batch axis (e.g. `[28, 28, 1]` or `[d]`).
    pub fn new(prefix: &str, input_shape: &[usize], seed: u64) -> Self {
        NetBuilder {
            net: Network::default(),
            shape: input_shape.to_vec(),
            rng: ChaCha20Rng::seed_from_u64(seed),
            prefix: prefix.to_string(),
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    /// Fan-in-scaled uniform init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    fn init(&mut self, shape: &[usize], fan_in: usize) -> Arr {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Arr::from_shape_fn(IxDyn(shape), |_| self.rng.random_range(-bound..bound))
    }

    fn describe(&mut self, text: String) {
        self.net.descriptions.push(text);
    }

    pub fn dense(mut self, units: usize) -> Self {
        assert_eq!(self.shape.len(), 1, "dense expects flat input");
        let fan_in = self.shape[0];
        let w = self.init(&[fan_in, units], fan_in);
        let name = format!("{}/dense{}", self.prefix, self.net.layers.len());
        let wi = self.net.params.add_tensor(format!("{name}/w"), w);
        let bi = self
            .net
            .params
            .add_tensor(format!("{name}/b"), Arr::zeros(IxDyn(&[units])));
        self.net.layers.push(Layer::Dense { w: wi, b: bi });
        self.shape = vec![units];
        self.describe(format!("Dense({units})"));
        self
    }

    pub fn conv2d(mut self, filters: usize, kernel: usize, stride: usize) -> Self {
        assert_eq!(self.shape.len(), 3, "conv expects HWC input");
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let fan_in = kernel * kernel * c;
        let wt = self.init(&[kernel, kernel, c, filters], fan_in);
        let name = format!("{}/conv{}", self.prefix, self.net.layers.len());
        let wi = self.net.params.add_tensor(format!("{name}/w"), wt);
        let bi = self
            .net
            .params
            .add_tensor(format!("{name}/b"), Arr::zeros(IxDyn(&[filters])));
        self.net.layers.push(Layer::Conv2d {
            w: wi,
            b: bi,
            stride,
        });
        self.shape = vec![h.div_ceil(stride), w.div_ceil(stride), filters];
        self.describe(format!("Conv2D({filters}, {kernel}, {stride}, same)"));
        self
    }

    pub fn conv2d_transpose(mut self, filters: usize, kernel: usize, stride: usize) -> Self {
        assert_eq!(self.shape.len(), 3, "convT expects HWC input");
        let (h, w, c) = (self.shape[0], self.shape[1], self.shape[2]);
        let fan_in = kernel * kernel * c;
        let wt = self.init(&[kernel, kernel, filters, c], fan_in);
        let name = format!("{}/convT{}", self.prefix, self.net.layers.len());
        let wi = self.net.params.add_tensor(format!("{name}/w"), wt);
        let bi = self
            .net
            .params
            .add_tensor(format!("{name}/b"), Arr::zeros(IxDyn(&[filters])));
        self.net.layers.push(Layer::ConvTranspose2d {
            w: wi,
            b: bi,
            stride,
        });
        self.shape = vec![h * stride, w * stride, filters];
        self.describe(format!("Conv2DTranspose({filters}, {kernel}, {stride}, same)"));
        self
    }

    pub fn batch_norm(mut self) -> Self {
        let c = *self.shape.last().unwrap();
        let name = format!("{}/bn{}", self.prefix, self.net.layers.len());
        let gi = self
            .net
            .params
            .add_tensor(format!("{name}/gamma"), Arr::ones(IxDyn(&[c])));
        let bi = self
            .net
            .params
            .add_tensor(format!("{name}/beta"), Arr::zeros(IxDyn(&[c])));
        let mi = self
            .net
            .params
            .add_buffer(format!("{name}/running_mean"), Arr::zeros(IxDyn(&[c])));
        let vi = self
            .net
            .params
            .add_buffer(format!("{name}/running_var"), Arr::ones(IxDyn(&[c])));
        self.net.layers.push(Layer::BatchNorm {
            gamma: gi,
            beta: bi,
            mean_buf: mi,
            var_buf: vi,
            momentum: self.bn_momentum,
            eps: self.bn_eps,
        });
        self.describe("BN".into());
        self
    }

    pub fn activation(mut self, act: Act) -> Self {
        self.net.layers.push(Layer::Activation(act));
        self.describe(act.describe());
        self
    }

    pub fn max_pool2(mut self) -> Self {
        assert_eq!(self.shape.len(), 3);
        self.shape = vec![self.shape[0] / 2, self.shape[1] / 2, self.shape[2]];
        self.net.layers.push(Layer::MaxPool2);
        self.describe("MaxPool2D(2, 2)".into());
        self
    }

    pub fn global_avg_pool(mut self) -> Self {
        assert_eq!(self.shape.len(), 3);
        self.shape = vec![self.shape[2]];
        self.net.layers.push(Layer::GlobalAvgPool);
        self.describe("GlobalAveragePooling2D".into());
        self
    }

    pub fn spatial_dropout(mut self, rate: f64) -> Self {
        self.net.layers.push(Layer::SpatialDropout { rate });
        self.describe(format!("SpatialDropout2D({rate})"));
        self
    }

    pub fn flatten(mut self) -> Self {
        self.shape = vec![self.shape.iter().product()];
        self.net.layers.push(Layer::Flatten);
        self.describe("Flatten".into());
        self
    }

    pub fn reshape(mut self, dims: &[usize]) -> Self {
        assert_eq!(
            dims.iter().product::<usize>(),
            self.shape.iter().product::<usize>(),
            "reshape must preserve element count"
        );
        self.shape = dims.to_vec();
        self.net.layers.push(Layer::Reshape(dims.to_vec()));
        self.describe(format!("Reshape{dims:?}"));
        self
    }

    pub fn softmax(mut self) -> Self {
        self.net.layers.push(Layer::Softmax);
        self.describe("softmax".into());
        self
    }

    pub fn build(self) -> Network {
        self.net
    }

    /// Add K parallel dense heads reading the current feature vector. The
    /// trunk shape is unchanged; heads are applied explicitly by the caller.
    pub fn heads(&mut self, head_units: usize, num_heads: usize, label: &str) -> Vec<DenseHead> {
        assert_eq!(self.shape.len(), 1, "heads expect flat features");
        let fan_in = self.shape[0];
        let mut heads = Vec::with_capacity(num_heads);
        for k in 0..num_heads {
            let w = self.init(&[fan_in, head_units], fan_in);
            let name = format!("{}/{label}{k}", self.prefix);
            let wi = self.net.params.add_tensor(format!("{name}/w"), w);
            let bi = self
                .net
                .params
                .add_tensor(format!("{name}/b"), Arr::zeros(IxDyn(&[head_units])));
            heads.push(DenseHead { w: wi, b: bi });
        }
        self.describe(format!("{num_heads} x Dense({head_units}), Linear [{label}]"));
        heads
    }
}

/// Parameter handles for one linear head.
#[derive(Debug, Clone, Copy)]
pub struct DenseHead {
    pub w: usize,
    pub b: usize,
}

impl DenseHead {
    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Var {
        let y = tape.matmul(x, bound.vars[self.w]);
        tape.add_rowvec(y, bound.vars[self.b])
    }
}
