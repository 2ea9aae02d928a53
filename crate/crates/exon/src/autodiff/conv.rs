//! im2col-based convolution kernels (NHWC, TF-style `same` padding) plus
//! 2x2 max pooling. Forward / input-gradient / kernel-gradient are exposed
//! separately so transposed convolution can reuse them with roles swapped.

use ndarray::{Array2, ArrayD, ArrayViewD, IxDyn};

/// `same` padding split for one spatial axis.
fn same_pad(input: usize, kernel: usize, stride: usize) -> (usize, usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    let beg = total / 2;
    (out, beg, total - beg)
}

fn as_std<'a>(a: &'a ArrayViewD<'_, f64>) -> ndarray::CowArray<'a, f64, IxDyn> {
    a.as_standard_layout()
}

/// Lower `x: [N, H, W, Ci]` into patch rows `[N*OH*OW, kh*kw*Ci]`.
fn im2col(
    x: &ArrayViewD<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
) -> (Array2<f64>, usize, usize) {
    let (n, h, w, ci) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, pad_top, _) = same_pad(h, kh, stride);
    let (ow, pad_left, _) = same_pad(w, kw, stride);
    let xs = as_std(x);
    let xsl = xs.as_slice().unwrap();
    let mut cols = Array2::<f64>::zeros((n * oh * ow, kh * kw * ci));
    let csl = cols.as_slice_mut().unwrap();
    let row_len = kh * kw * ci;
    for ni in 0..n {
        let x_base = ni * h * w * ci;
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((ni * oh + ohi) * ow + owi) * row_len;
                for khi in 0..kh {
                    let ih = (ohi * stride + khi) as isize - pad_top as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kwi in 0..kw {
                        let iw = (owi * stride + kwi) as isize - pad_left as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let src = x_base + ((ih as usize) * w + iw as usize) * ci;
                        let dst = row + (khi * kw + kwi) * ci;
                        csl[dst..dst + ci].copy_from_slice(&xsl[src..src + ci]);
                    }
                }
            }
        }
    }
    (cols, oh, ow)
}

/// Scatter-add patch rows back into an input-shaped array.
fn col2im(
    cols: &Array2<f64>,
    x_shape: &[usize],
    kh: usize,
    kw: usize,
    stride: usize,
) -> ArrayD<f64> {
    let (n, h, w, ci) = (x_shape[0], x_shape[1], x_shape[2], x_shape[3]);
    let (oh, pad_top, _) = same_pad(h, kh, stride);
    let (ow, pad_left, _) = same_pad(w, kw, stride);
    let mut out = ArrayD::<f64>::zeros(IxDyn(x_shape));
    let osl = out.as_slice_mut().unwrap();
    let csl = cols.as_slice().unwrap();
    let row_len = kh * kw * ci;
    for ni in 0..n {
        let x_base = ni * h * w * ci;
        for ohi in 0..oh {
            for owi in 0..ow {
                let row = ((ni * oh + ohi) * ow + owi) * row_len;
                for khi in 0..kh {
                    let ih = (ohi * stride + khi) as isize - pad_top as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    for kwi in 0..kw {
                        let iw = (owi * stride + kwi) as isize - pad_left as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        let dst = x_base + ((ih as usize) * w + iw as usize) * ci;
                        let src = row + (khi * kw + kwi) * ci;
                        for c in 0..ci {
                            osl[dst + c] += csl[src + c];
                        }
                    }
                }
            }
        }
    }
    out
}

/// `x: [N, H, W, Ci]`, `w: [kh, kw, Ci, Co]` -> `[N, OH, OW, Co]`.
pub fn conv2d_forward(x: &ArrayViewD<'_, f64>, w: &ArrayViewD<'_, f64>, stride: usize) -> ArrayD<f64> {
    let (kh, kw, ci, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(x.shape()[3], ci, "conv2d: channel mismatch");
    let n = x.shape()[0];
    let (cols, oh, ow) = im2col(x, kh, kw, stride);
    let w2 = as_std(w)
        .to_owned()
        .into_shape_with_order((kh * kw * ci, co))
        .unwrap();
    let out = cols.dot(&w2);
    out.into_shape_with_order(IxDyn(&[n, oh, ow, co])).unwrap()
}

/// Gradient w.r.t. the conv input. `g: [N, OH, OW, Co]`.
pub fn conv2d_dinput(
    g: &ArrayD<f64>,
    w: &ArrayViewD<'_, f64>,
    x_shape: &[usize],
    stride: usize,
) -> ArrayD<f64> {
    let (kh, kw, ci, co) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let g2 = g
        .view()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((g.len() / co, co))
        .unwrap();
    let w2 = as_std(w)
        .to_owned()
        .into_shape_with_order((kh * kw * ci, co))
        .unwrap();
    let dcols = g2.dot(&w2.t());
    col2im(&dcols, x_shape, kh, kw, stride)
}

/// Gradient w.r.t. the conv kernel. `x: [N, H, W, Ci]`, `g: [N, OH, OW, Co]`.
pub fn conv2d_dkernel(
    x: &ArrayViewD<'_, f64>,
    g: &ArrayD<f64>,
    w_shape: &[usize],
    stride: usize,
) -> ArrayD<f64> {
    let (kh, kw, ci, co) = (w_shape[0], w_shape[1], w_shape[2], w_shape[3]);
    let (cols, _, _) = im2col(x, kh, kw, stride);
    let g2 = g
        .view()
        .as_standard_layout()
        .to_owned()
        .into_shape_with_order((g.len() / co, co))
        .unwrap();
    let dw = cols.t().dot(&g2);
    dw.into_shape_with_order(IxDyn(&[kh, kw, ci, co])).unwrap()
}

/// 2x2/stride-2 max pool. Returns the pooled array and, per output cell, the
/// flat index of the winning input element.
pub fn max_pool2_forward(x: &ArrayViewD<'_, f64>) -> (ArrayD<f64>, Vec<usize>) {
    let (n, h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xs = as_std(x);
    let xsl = xs.as_slice().unwrap();
    let mut out = ArrayD::<f64>::zeros(IxDyn(&[n, oh, ow, c]));
    let osl = out.as_slice_mut().unwrap();
    let mut idx = vec![0usize; n * oh * ow * c];
    for ni in 0..n {
        for ohi in 0..oh {
            for owi in 0..ow {
                for ci in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dh in 0..2 {
                        for dw in 0..2 {
                            let p = ((ni * h + ohi * 2 + dh) * w + owi * 2 + dw) * c + ci;
                            if xsl[p] > best {
                                best = xsl[p];
                                best_at = p;
                            }
                        }
                    }
                    let o = ((ni * oh + ohi) * ow + owi) * c + ci;
                    osl[o] = best;
                    idx[o] = best_at;
                }
            }
        }
    }
    (out, idx)
}

/// Scatter pooled gradients back to the argmax positions.
pub fn max_pool2_backward(g: &ArrayD<f64>, idx: &[usize], x_shape: &[usize]) -> ArrayD<f64> {
    let mut dx = ArrayD::<f64>::zeros(IxDyn(x_shape));
    let dsl = dx.as_slice_mut().unwrap();
    let gs = g.view().as_standard_layout().to_owned();
    let gsl = gs.as_slice().unwrap();
    for (o, &p) in idx.iter().enumerate() {
        dsl[p] += gsl[o];
    }
    dx
}
