//! Tape-based reverse-mode automatic differentiation on dynamic-rank `f64`
//! arrays.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] walks it in
//! reverse and accumulates gradients for every recorded node. Values are
//! stored as [`ndarray::ArcArray`] so backward closures can capture what they
//! need without deep copies.
//!
//! The engine is deliberately small: the set of operations is exactly what
//! the encoder/decoder/classifier stacks and the training objective require.
//! Stochastic pieces (dropout masks, Gumbel noise, reparameterization noise)
//! are sampled by the caller and enter the tape as constants, so a recorded
//! tape is a deterministic function of its leaves.

pub mod check;
pub mod conv;

use ndarray::{ArcArray, Array1, Array2, ArrayD, ArrayViewD, Axis, Ix1, Ix2, IxDyn};

pub type Arr = ArrayD<f64>;
type Shared = ArcArray<f64, IxDyn>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackwardFn = Box<dyn Fn(&Arr) -> Vec<Arr>>;

struct Node {
    value: Shared,
    parents: Vec<Var>,
    backward: Option<BackwardFn>,
}

/// Gradients of a scalar root with respect to every node of a tape.
pub struct Gradients {
    by_node: Vec<Option<Arr>>,
}

impl Gradients {
    /// Gradient for `v`, if it received one.
    pub fn get(&self, v: Var) -> Option<&Arr> {
        self.by_node[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Arr> {
        self.by_node[v.0].take()
    }
}

/// Records a single forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Arr, parents: Vec<Var>, backward: Option<BackwardFn>) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite() || x.is_nan() || x.is_infinite()));
        self.nodes.push(Node {
            value: value.into_shared(),
            parents,
            backward,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf (parameters, inputs you want gradients for).
    pub fn leaf(&mut self, value: Arr) -> Var {
        self.push(value, vec![], None)
    }

    /// Non-differentiable input. Mechanically identical to [`Tape::leaf`];
    /// the distinction is for the reader.
    pub fn constant(&mut self, value: Arr) -> Var {
        self.leaf(value)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.leaf(ndarray::arr0(value).into_dyn())
    }

    pub fn value(&self, v: Var) -> ArrayViewD<'_, f64> {
        self.nodes[v.0].value.view()
    }

    fn shared(&self, v: Var) -> Shared {
        self.nodes[v.0].value.clone()
    }

    pub fn to_owned_value(&self, v: Var) -> Arr {
        self.nodes[v.0].value.to_owned()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Extract a 0-dim value.
    pub fn scalar(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        assert_eq!(val.ndim(), 0, "scalar() on non-scalar node");
        *val.first().unwrap()
    }

    /// Reverse pass from a scalar root. Gradients accumulate for every node
    /// reachable from `root`; unreachable nodes keep `None`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(
            self.nodes[root.0].value.ndim(),
            0,
            "backward root must be a scalar"
        );
        let mut grads: Vec<Option<Arr>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(ndarray::arr0(1.0).into_dyn());
        for id in (0..=root.0).rev() {
            let Some(grad) = grads[id].clone() else {
                continue;
            };
            let node = &self.nodes[id];
            if let Some(back) = &node.backward {
                let parent_grads = back(&grad);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (p, pg) in node.parents.iter().zip(parent_grads) {
                    debug_assert_eq!(pg.shape(), self.nodes[p.0].value.shape());
                    match &mut grads[p.0] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
        }
        Gradients { by_node: grads }
    }

    // ---- elementwise binaries -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch");
        let out = &va.view() + &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.clone()])),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        assert_eq!(va.shape(), vb.shape(), "sub: shape mismatch");
        let out = &va.view() - &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| vec![g.clone(), g.mapv(|x| -x)])),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch");
        let out = &va.view() * &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g * &vb.view(), g * &va.view()]
            })),
        )
    }

    // ---- scalar ops ------------------------------------------------------

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x + c);
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.clone()])))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x * c);
        self.push(out, vec![a], Some(Box::new(move |g| vec![g.mapv(|x| x * c)])))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn sqr(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x * x);
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g * &va.mapv(|x| 2.0 * x).view()])),
        )
    }

    // ---- unaries ---------------------------------------------------------

    pub fn exp(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = va.mapv(f64::exp);
        let saved = out.clone().into_shared();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| vec![g * &saved.view()])),
        )
    }

    /// Natural log with the inputs clamped at `floor` before taking the log.
    /// Gradient is zero where the clamp was active.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x.max(floor).ln());
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g * &va.mapv(|x| if x > floor { 1.0 / x } else { 0.0 }).view()]
            })),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = va.mapv(f64::tanh);
        let saved = out.clone().into_shared();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g * &saved.mapv(|y| 1.0 - y * y).view()]
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| x.max(0.0));
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g * &va.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }).view()]
            })),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, alpha: f64) -> Var {
        let va = self.shared(a);
        let out = va.mapv(|x| if x > 0.0 { x } else { alpha * x });
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g * &va.mapv(|x| if x > 0.0 { 1.0 } else { alpha }).view()]
            })),
        )
    }

    // ---- shape -----------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = self.shared(a);
        let old_shape: Vec<usize> = va.shape().to_vec();
        let out = va
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape: element count mismatch");
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                vec![g
                    .clone()
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward")]
            })),
        )
    }

    /// `[N, d1, d2, ...] -> [N, d1*d2*...]`
    pub fn flatten_batch(&mut self, a: Var) -> Var {
        let shape = self.shape(a).to_vec();
        let n = shape[0];
        let m: usize = shape[1..].iter().product();
        self.reshape(a, &[n, m])
    }

    /// Rows `start..end` of the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let va = self.shared(a);
        let n = va.shape()[0];
        assert!(start <= end && end <= n, "slice_rows out of range");
        let full_shape: Vec<usize> = va.shape().to_vec();
        let out = va.slice_axis(Axis(0), ndarray::Slice::from(start..end)).to_owned();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(IxDyn(&full_shape));
                dx.slice_axis_mut(Axis(0), ndarray::Slice::from(start..end))
                    .assign(g);
                vec![dx]
            })),
        )
    }

    /// Stack K arrays of shape `[N, d]` into `[N, K, d]`.
    pub fn stack_axis1(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        assert_eq!(first.len(), 2, "stack_axis1 expects [N, d] parts");
        let (n, d) = (first[0], first[1]);
        let k = parts.len();
        let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, k, d]));
        for (i, &p) in parts.iter().enumerate() {
            let vp = self.value(p);
            assert_eq!(vp.shape(), &[n, d], "stack_axis1: inconsistent part shape");
            out.index_axis_mut(Axis(1), i).assign(&vp);
        }
        self.push(
            out,
            parts.to_vec(),
            Some(Box::new(move |g| {
                (0..k)
                    .map(|i| g.index_axis(Axis(1), i).to_owned().into_dyn())
                    .collect()
            })),
        )
    }

    // ---- reductions ------------------------------------------------------

    pub fn sum_all(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let shape: Vec<usize> = va.shape().to_vec();
        let out = ndarray::arr0(va.sum()).into_dyn();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let gv = *g.first().unwrap();
                vec![ArrayD::from_elem(IxDyn(&shape), gv)]
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len() as f64;
        let s = self.sum_all(a);
        self.mul_scalar(s, 1.0 / n)
    }

    /// Sum over one axis, removing it.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Var {
        let va = self.shared(a);
        let in_shape: Vec<usize> = va.shape().to_vec();
        let out = va.sum_axis(Axis(axis));
        self.push(
            out.into_dyn(),
            vec![a],
            Some(Box::new(move |g| {
                let mut gex = g.clone();
                gex.insert_axis_inplace(Axis(axis));
                let gb = gex
                    .broadcast(IxDyn(&in_shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                vec![gb]
            })),
        )
    }

    // ---- broadcasting helpers ---------------------------------------------

    /// Row-vector bias add: `[N, M] + [M]`.
    pub fn add_rowvec(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        assert_eq!(va.ndim(), 2);
        assert_eq!(vb.ndim(), 1);
        assert_eq!(va.shape()[1], vb.shape()[0], "add_rowvec: width mismatch");
        let out = &va.view() + &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                vec![g.clone(), g.sum_axis(Axis(0))]
            })),
        )
    }

    /// Channel bias add for NHWC: `[N, H, W, C] + [C]`.
    pub fn add_channel(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        assert_eq!(va.ndim(), 4);
        assert_eq!(vb.ndim(), 1);
        assert_eq!(
            va.shape()[3],
            vb.shape()[0],
            "add_channel: channel mismatch"
        );
        let out = &va.view() + &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                let db = g4.sum_axis(Axis(0)).sum_axis(Axis(0)).sum_axis(Axis(0));
                vec![g.clone(), db.into_dyn()]
            })),
        )
    }

    /// Scale the last axis: `t[N, K, d] * s[N, K]` broadcast over `d`.
    pub fn scale_last(&mut self, t: Var, s: Var) -> Var {
        let (vt, vs) = (self.shared(t), self.shared(s));
        assert_eq!(vt.ndim(), 3);
        assert_eq!(vs.ndim(), 2);
        assert_eq!(&vt.shape()[..2], vs.shape(), "scale_last: shape mismatch");
        let vs_e = vs.view().insert_axis(Axis(2));
        let out = &vt.view() * &vs_e;
        self.push(
            out,
            vec![t, s],
            Some(Box::new(move |g| {
                let vs_e = vs.view().insert_axis(Axis(2));
                let dt = g * &vs_e;
                let ds = (g * &vt.view()).sum_axis(Axis(2));
                vec![dt, ds]
            })),
        )
    }

    // ---- matmul / dense ----------------------------------------------------

    /// `[n, k] x [k, m] -> [n, m]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let a2 = va.view().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
        let b2 = vb.view().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
        assert_eq!(a2.shape()[1], b2.shape()[0], "matmul: inner dim mismatch");
        let out = a2.dot(&b2).into_dyn();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let a2 = va.view().into_dimensionality::<Ix2>().unwrap();
                let b2 = vb.view().into_dimensionality::<Ix2>().unwrap();
                let da = g2.dot(&b2.t()).into_dyn();
                let db = a2.t().dot(&g2).into_dyn();
                vec![da, db]
            })),
        )
    }

    // ---- softmax family ----------------------------------------------------

    /// Softmax along the last axis.
    pub fn softmax_last(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = softmax_last_arr(&va.view());
        let saved = out.clone().into_shared();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                // dx = y * (g - sum(g*y, last))
                let y = saved.view();
                let gy = g * &y;
                let s = gy.sum_axis(Axis(y.ndim() - 1));
                let s_e = s.insert_axis(Axis(y.ndim() - 1));
                let dx = &y * &(g - &s_e);
                vec![dx]
            })),
        )
    }

    /// Log-softmax along the last axis (numerically stable).
    pub fn log_softmax_last(&mut self, a: Var) -> Var {
        let va = self.shared(a);
        let out = log_softmax_last_arr(&va.view());
        let soft = out.mapv(f64::exp).into_shared();
        self.push(
            out,
            vec![a],
            Some(Box::new(move |g| {
                let last = soft.ndim() - 1;
                let s = g.sum_axis(Axis(last));
                let s_e = s.insert_axis(Axis(last));
                let dx = g - &(&soft.view() * &s_e);
                vec![dx]
            })),
        )
    }

    // ---- conv / pool stack -------------------------------------------------

    /// 2-D convolution, NHWC layout, TF-style `same` padding.
    /// `x: [N, H, W, Ci]`, `w: [kh, kw, Ci, Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let (vx, vw) = (self.shared(x), self.shared(w));
        let out = conv::conv2d_forward(&vx.view(), &vw.view(), stride);
        let x_shape: Vec<usize> = vx.shape().to_vec();
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g| {
                let dx = conv::conv2d_dinput(g, &vw.view(), &x_shape, stride);
                let dw = conv::conv2d_dkernel(&vx.view(), g, vw.shape(), stride);
                vec![dx, dw]
            })),
        )
    }

    /// Transposed 2-D convolution (fractionally-strided), NHWC, `same`
    /// padding: output spatial size is exactly `input * stride`.
    /// `x: [N, H, W, Ci]`, `w: [kh, kw, Co, Ci]`.
    pub fn conv2d_transpose(&mut self, x: Var, w: Var, stride: usize) -> Var {
        let (vx, vw) = (self.shared(x), self.shared(w));
        // Forward of convT == input-gradient of a forward conv whose kernel
        // maps Co -> Ci with the same stride.
        let (n, h, wd, _ci) = dims4(vx.shape());
        let co = vw.shape()[2];
        let out_shape = [n, h * stride, wd * stride, co];
        let out = conv::conv2d_dinput(&vx.to_owned(), &vw.view(), &out_shape, stride);
        self.push(
            out,
            vec![x, w],
            Some(Box::new(move |g| {
                let dx = conv::conv2d_forward(&g.view(), &vw.view(), stride);
                let dw = conv::conv2d_dkernel(&g.view(), &vx.to_owned(), vw.shape(), stride);
                vec![dx, dw]
            })),
        )
    }

    /// 2x2 max pooling with stride 2 (valid; trailing odd row/col dropped).
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let vx = self.shared(x);
        let (out, idx) = conv::max_pool2_forward(&vx.view());
        let x_shape: Vec<usize> = vx.shape().to_vec();
        self.push(
            out,
            vec![x],
            Some(Box::new(move |g| {
                vec![conv::max_pool2_backward(g, &idx, &x_shape)]
            })),
        )
    }

    /// Mean over spatial axes: `[N, H, W, C] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Var {
        let vx = self.shared(x);
        let (n, h, w, c) = dims4(vx.shape());
        let scale = 1.0 / (h * w) as f64;
        let x4 = vx.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let out = x4.sum_axis(Axis(1)).sum_axis(Axis(1)).mapv(|v| v * scale);
        self.push(
            out.into_dyn(),
            vec![x],
            Some(Box::new(move |g| {
                let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                let mut dx = ArrayD::<f64>::zeros(IxDyn(&[n, h, w, c]));
                {
                    let mut dx4 = dx.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g2[[ni, ci]] * scale;
                            dx4.slice_mut(ndarray::s![ni, .., .., ci]).fill(gv);
                        }
                    }
                }
                vec![dx]
            })),
        )
    }

    /// Batch normalization over all axes but the last (channel) axis, using
    /// the batch statistics. Returns the output together with the batch mean
    /// and (biased) variance so the caller can update running statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> (Var, Array1<f64>, Array1<f64>) {
        let (vx, vg) = (self.shared(x), self.shared(gamma));
        let c = *vx.shape().last().unwrap();
        assert_eq!(vg.shape(), &[c]);
        let m = (vx.len() / c) as f64;

        let x2 = flatten_to_2d(&vx.view());
        let mean = x2.mean_axis(Axis(0)).unwrap();
        let var = x2.map_axis(Axis(0), |col| {
            let mu = col.mean().unwrap();
            col.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / m
        });
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());

        let x_hat2 = (&x2 - &mean) * &inv_std;
        let x_hat = x_hat2
            .clone()
            .into_shape_with_order(IxDyn(vx.shape()))
            .unwrap()
            .into_shared();
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap().to_owned();
        let out2 = &x_hat2 * &g1 + &self.value(beta).into_dimensionality::<Ix1>().unwrap();
        let out = out2.into_shape_with_order(IxDyn(vx.shape())).unwrap();

        let inv_std_c = inv_std.clone();
        let out_var = self.push(
            out,
            vec![x, gamma, beta],
            Some(Box::new(move |g| {
                let g2 = flatten_to_2d(&g.view());
                let xh2 = flatten_to_2d(&x_hat.view());
                let dgamma = (&g2 * &xh2).sum_axis(Axis(0));
                let dbeta = g2.sum_axis(Axis(0));
                let gsum = g2.sum_axis(Axis(0));
                let gxh_sum = (&g2 * &xh2).sum_axis(Axis(0));
                let g1v = vg.view().into_dimensionality::<Ix1>().unwrap();
                // dx = gamma*inv_std/m * (m*g - sum(g) - x_hat*sum(g*x_hat))
                let coeff = &g1v.to_owned() * &inv_std_c / m;
                let dx2 = (&g2 * m - &gsum - &(&xh2 * &gxh_sum)) * &coeff;
                let dx = dx2.into_shape_with_order(IxDyn(g.shape())).unwrap();
                vec![dx, dgamma.into_dyn(), dbeta.into_dyn()]
            })),
        );
        (out_var, mean, var)
    }

    /// Batch normalization in inference mode: affine transform with the
    /// frozen running statistics. `y = (x - mean) * gamma/sqrt(var+eps) + beta`
    /// assembled as one fused channel-affine node.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Array1<f64>,
        running_var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let inv_std = self.constant(running_var.mapv(|v| 1.0 / (v + eps).sqrt()).into_dyn());
        let mean = self.constant(running_mean.clone().into_dyn());
        let scale = self.mul(gamma, inv_std);
        let ms = self.mul(mean, scale);
        let shift = self.sub(beta, ms);
        self.channel_affine(x, scale, shift)
    }

    /// Fused per-channel affine: `y = x * scale + shift` with `scale` and
    /// `shift` 1-D vectors broadcast over the last axis.
    pub fn channel_affine(&mut self, x: Var, scale: Var, shift: Var) -> Var {
        let (vx, vs, vh) = (self.shared(x), self.shared(scale), self.shared(shift));
        let c = *vx.shape().last().unwrap();
        assert_eq!(vs.shape(), &[c]);
        assert_eq!(vh.shape(), &[c]);
        let out = &(&vx.view() * &vs.view()) + &vh.view();
        self.push(
            out,
            vec![x, scale, shift],
            Some(Box::new(move |g| {
                let dx = g * &vs.view();
                let g2 = flatten_to_2d(&g.view());
                let x2 = flatten_to_2d(&vx.view());
                let dscale = (&g2 * &x2).sum_axis(Axis(0));
                let dshift = g2.sum_axis(Axis(0));
                vec![dx, dscale.into_dyn(), dshift.into_dyn()]
            })),
        )
    }

    /// Subtract a `[C]` vector broadcast over the last axis.
    pub fn sub_channelvec(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let c = *va.shape().last().unwrap();
        assert_eq!(vb.shape(), &[c]);
        let out = &va.view() - &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = flatten_to_2d(&g.view());
                vec![g.clone(), g2.sum_axis(Axis(0)).mapv(|v| -v).into_dyn()]
            })),
        )
    }

    /// Multiply by a `[C]` vector broadcast over the last axis.
    pub fn mul_channelvec(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let c = *va.shape().last().unwrap();
        assert_eq!(vb.shape(), &[c]);
        let out = &va.view() * &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let da = g * &vb.view();
                let ga2 = flatten_to_2d(&(g * &va.view()).view());
                vec![da, ga2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }

    /// Add a `[C]` vector broadcast over the last axis.
    pub fn add_channelvec(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.shared(a), self.shared(b));
        let c = *va.shape().last().unwrap();
        assert_eq!(vb.shape(), &[c]);
        let out = &va.view() + &vb.view();
        self.push(
            out,
            vec![a, b],
            Some(Box::new(move |g| {
                let g2 = flatten_to_2d(&g.view());
                vec![g.clone(), g2.sum_axis(Axis(0)).into_dyn()]
            })),
        )
    }
}

fn dims4(shape: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "expected 4-D NHWC array");
    (shape[0], shape[1], shape[2], shape[3])
}

/// View any array as `[M, C]` where `C` is the last axis.
fn flatten_to_2d(a: &ArrayViewD<'_, f64>) -> Array2<f64> {
    let c = *a.shape().last().unwrap();
    let m = a.len() / c;
    a.to_owned()
        .into_shape_with_order((m, c))
        .expect("flatten_to_2d")
}

/// Stable softmax along the last axis of a plain array.
pub fn softmax_last_arr(a: &ArrayViewD<'_, f64>) -> Arr {
    let mut out = a.to_owned();
    let last = out.ndim() - 1;
    for mut row in out.lanes_mut(Axis(last)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Stable log-softmax along the last axis of a plain array.
pub fn log_softmax_last_arr(a: &ArrayViewD<'_, f64>) -> Arr {
    let mut out = a.to_owned();
    let last = out.ndim() - 1;
    for mut row in out.lanes_mut(Axis(last)) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .map(|v| (*v - max).exp())
                .sum::<f64>()
                .ln();
        for v in row.iter_mut() {
            *v -= lse;
        }
    }
    out
}
