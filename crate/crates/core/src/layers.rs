//! Layer kernels with explicit backward passes.
//!
//! Every function here is pure: outputs depend only on the arguments and
//! summation order is fixed, so repeated calls are bitwise identical.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Guard added inside the logarithm of the cross-entropy loss.
pub const LOG_EPSILON: f64 = 1e-12;

/// Gradients returned by a layer's backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    pub input_grad: Tensor,
    /// Gradients for the layer's parameters, in declaration order. Empty for
    /// parameter-free layers.
    pub param_grads: Vec<Tensor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeometry {
    channels: usize,
    height: usize,
    width: usize,
    filters: usize,
    kh: usize,
    kw: usize,
    out_h: usize,
    out_w: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeometry {
    fn new(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Argument("convolution stride must be >= 1".into()));
        }
        let (channels, height, width) = input.chw()?;
        let [filters, kc, kh, kw] = kernels.shape()[..] else {
            return Err(Error::dim(format!(
                "kernels must be [F,C,kH,kW], got {:?}",
                kernels.shape()
            )));
        };
        if kc != channels {
            return Err(Error::dim(format!(
                "input has {channels} channels but kernels expect {kc}"
            )));
        }
        if kh > height + 2 * padding || kw > width + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {kh}x{kw} larger than padded input {}x{}",
                height + 2 * padding,
                width + 2 * padding
            )));
        }
        Ok(ConvGeometry {
            channels,
            height,
            width,
            filters,
            kh,
            kw,
            out_h: (height + 2 * padding - kh) / stride + 1,
            out_w: (width + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        })
    }

    /// Output columns `[lo, hi)` for which kernel column `kj` lands inside
    /// the unpadded input.
    #[inline]
    fn valid_outputs(&self, kj: usize, out_w: usize, width: usize) -> (usize, usize) {
        // col = oj * stride + kj - padding must satisfy 0 <= col < width
        let lo = if kj >= self.padding { 0 } else { (self.padding - kj).div_ceil(self.stride) };
        let limit = width + self.padding - kj; // oj * stride < limit
        let hi = if limit == 0 { 0 } else { ((limit - 1) / self.stride + 1).min(out_w) };
        (lo.min(hi), hi)
    }
}

/// 2-D cross-correlation with zero padding.
///
/// `input` is `[C,H,W]`, `kernels` is `[F,C,kH,kW]` and `bias` is `[F]`.
/// Each output element accumulates channel by channel, then kernel row by
/// kernel row, before the bias is added.
pub fn conv2d_forward(
    input: &Tensor,
    kernels: &Tensor,
    bias: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    if bias.shape() != [g.filters] {
        return Err(Error::dim(format!(
            "bias shape {:?} does not match {} filters",
            bias.shape(),
            g.filters
        )));
    }
    let x = input.data();
    let k = kernels.data();
    let b = bias.data();
    let plane = g.height * g.width;
    let oplane = g.out_h * g.out_w;
    let mut out = vec![0.0; g.filters * oplane];
    // Each output element receives its terms in (channel, kernel row, kernel
    // column) order; iterating whole rows keeps that order per element.
    for f in 0..g.filters {
        let acc = &mut out[f * oplane..(f + 1) * oplane];
        for c in 0..g.channels {
            let xc = &x[c * plane..(c + 1) * plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let weight = k[((f * g.channels + c) * g.kh + ki) * g.kw + kj];
                    let (oj_lo, oj_hi) = g.valid_outputs(kj, g.out_w, g.width);
                    for oi in 0..g.out_h {
                        let row = (oi * g.stride + ki) as isize - g.padding as isize;
                        if row < 0 || row >= g.height as isize {
                            continue;
                        }
                        let xrow = &xc[row as usize * g.width..(row as usize + 1) * g.width];
                        let arow = &mut acc[oi * g.out_w..(oi + 1) * g.out_w];
                        if g.stride == 1 {
                            let col0 = oj_lo + kj - g.padding;
                            for (a, xv) in arow[oj_lo..oj_hi].iter_mut().zip(&xrow[col0..col0 + (oj_hi - oj_lo)]) {
                                *a += xv * weight;
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                arow[oj] += xrow[oj * g.stride + kj - g.padding] * weight;
                            }
                        }
                    }
                }
            }
        }
        for a in acc.iter_mut() {
            *a += b[f];
        }
    }
    Ok(Tensor::from_parts(vec![g.filters, g.out_h, g.out_w], out))
}

/// Gradients of [`conv2d_forward`] with respect to input, kernels and bias.
///
/// `param_grads` holds `[kernel_grad, bias_grad]`.
pub fn conv2d_backward(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    conv2d_backward_inner(input, kernels, stride, padding, upstream, true)
}

/// Like [`conv2d_backward`], but skips the input gradient (returned as
/// zeros) when the caller does not need it, e.g. for the first layer.
pub(crate) fn conv2d_backward_inner(
    input: &Tensor,
    kernels: &Tensor,
    stride: usize,
    padding: usize,
    upstream: &Tensor,
    want_input_grad: bool,
) -> Result<LayerGrad> {
    let g = ConvGeometry::new(input, kernels, stride, padding)?;
    if upstream.shape() != [g.filters, g.out_h, g.out_w] {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match conv output [{}, {}, {}]",
            upstream.shape(),
            g.filters,
            g.out_h,
            g.out_w
        )));
    }
    let x = input.data();
    let k = kernels.data();
    let up = upstream.data();
    let plane = g.height * g.width;
    let oplane = g.out_h * g.out_w;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    let mut db = vec![0.0; g.filters];
    for f in 0..g.filters {
        let upf = &up[f * oplane..(f + 1) * oplane];
        db[f] = upf.iter().sum();
        for c in 0..g.channels {
            let xc = &x[c * plane..(c + 1) * plane];
            let dxc = &mut dx[c * plane..(c + 1) * plane];
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let kidx = ((f * g.channels + c) * g.kh + ki) * g.kw + kj;
                    let weight = k[kidx];
                    let (oj_lo, oj_hi) = g.valid_outputs(kj, g.out_w, g.width);
                    let mut grad = 0.0;
                    for oi in 0..g.out_h {
                        let row = (oi * g.stride + ki) as isize - g.padding as isize;
                        if row < 0 || row >= g.height as isize {
                            continue;
                        }
                        let roff = row as usize * g.width;
                        let urow = &upf[oi * g.out_w..(oi + 1) * g.out_w];
                        if g.stride == 1 && oj_hi > oj_lo {
                            let col0 = roff + oj_lo + kj - g.padding;
                            let n = oj_hi - oj_lo;
                            let us = &urow[oj_lo..oj_hi];
                            for (u, xv) in us.iter().zip(&xc[col0..col0 + n]) {
                                grad += u * xv;
                            }
                            if want_input_grad {
                                for (d, u) in dxc[col0..col0 + n].iter_mut().zip(us) {
                                    *d += u * weight;
                                }
                            }
                        } else {
                            for oj in oj_lo..oj_hi {
                                let col = oj * g.stride + kj - g.padding;
                                grad += urow[oj] * xc[roff + col];
                                if want_input_grad {
                                    dxc[roff + col] += urow[oj] * weight;
                                }
                            }
                        }
                    }
                    dk[kidx] = grad;
                }
            }
        }
    }
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(input.shape().to_vec(), dx),
        param_grads: vec![
            Tensor::from_parts(kernels.shape().to_vec(), dk),
            Tensor::from_parts(vec![g.filters], db),
        ],
    })
}

fn pool_dims(input: &Tensor) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim(format!(
            "2x2 max pooling needs even height and width, got {h}x{w}"
        )));
    }
    Ok((c, h, w))
}

/// Flat input index of the maximum in each 2x2 window, first row-major
/// maximum on ties.
pub(crate) fn pool_argmax(input: &Tensor) -> Result<(Vec<usize>, [usize; 3])> {
    let (c, h, w) = pool_dims(input)?;
    let x = input.data();
    let (oh, ow) = (h / 2, w / 2);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let top = ch * h * w + 2 * i * w + 2 * j;
                let mut best = top;
                for cand in [top + 1, top + w, top + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                idx.push(best);
            }
        }
    }
    Ok((idx, [c, oh, ow]))
}

/// Non-overlapping 2x2 max pooling.
pub fn maxpool2_forward(input: &Tensor) -> Result<Tensor> {
    let (idx, shape) = pool_argmax(input)?;
    let x = input.data();
    Ok(Tensor::from_parts(
        shape.to_vec(),
        idx.into_iter().map(|i| x[i]).collect(),
    ))
}

/// Routes each window's upstream gradient to that window's maximum.
pub fn maxpool2_backward(input: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    let (idx, shape) = pool_argmax(input)?;
    if upstream.shape() != shape {
        return Err(Error::dim(format!(
            "upstream gradient {:?} does not match pooled shape {shape:?}",
            upstream.shape()
        )));
    }
    let mut dx = vec![0.0; input.len()];
    for (&i, &g) in idx.iter().zip(upstream.data()) {
        dx[i] += g;
    }
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(input.shape().to_vec(), dx),
        param_grads: Vec::new(),
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor::from_parts(
        input.shape().to_vec(),
        input.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect(),
    )
}

/// Subgradient at exactly zero is zero.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<LayerGrad> {
    input.same_shape(upstream, "relu upstream gradient")?;
    let dx = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(input.shape().to_vec(), dx),
        param_grads: Vec::new(),
    })
}

fn dense_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize)> {
    let [m, n] = weights.shape()[..] else {
        return Err(Error::dim(format!(
            "dense weights must be [M,N], got {:?}",
            weights.shape()
        )));
    };
    if input.shape() != [n] {
        return Err(Error::dim(format!(
            "dense input {:?} does not match weight width {n}",
            input.shape()
        )));
    }
    if bias.shape() != [m] {
        return Err(Error::dim(format!(
            "dense bias {:?} does not match {m} outputs",
            bias.shape()
        )));
    }
    Ok((m, n))
}

/// `y = W x + b` for a rank-1 input.
pub fn dense_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (m, n) = dense_dims(input, weights, bias)?;
    let x = input.data();
    let w = weights.data();
    let out = (0..m)
        .map(|r| {
            let row = &w[r * n..(r + 1) * n];
            let acc: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            acc + bias.data()[r]
        })
        .collect();
    Ok(Tensor::from_parts(vec![m], out))
}

/// `param_grads` holds `[weight_grad, bias_grad]`.
pub fn dense_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    upstream: &Tensor,
) -> Result<LayerGrad> {
    let (m, n) = dense_dims(input, weights, bias)?;
    if upstream.shape() != [m] {
        return Err(Error::dim(format!(
            "dense upstream gradient {:?} does not match {m} outputs",
            upstream.shape()
        )));
    }
    let x = input.data();
    let w = weights.data();
    let up = upstream.data();
    let mut dw = vec![0.0; m * n];
    let mut dx = vec![0.0; n];
    for r in 0..m {
        let g = up[r];
        let row = &w[r * n..(r + 1) * n];
        for c in 0..n {
            dw[r * n + c] = g * x[c];
            dx[c] += row[c] * g;
        }
    }
    Ok(LayerGrad {
        input_grad: Tensor::from_parts(vec![n], dx),
        param_grads: vec![
            Tensor::from_parts(vec![m, n], dw),
            Tensor::from_parts(vec![m], up.to_vec()),
        ],
    })
}

/// Numerically stable softmax over a rank-1 tensor of at least two logits.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    if logits.rank() != 1 || logits.len() < 2 {
        return Err(Error::dim(format!(
            "softmax needs a vector of >= 2 logits, got {:?}",
            logits.shape()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::Numeric(format!("non-finite logit in {logits:?}")));
    }
    let max = logits.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.data().iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(Tensor::from_parts(
        logits.shape().to_vec(),
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// Cross-entropy of softmax probabilities against a class index.
///
/// Returns the loss and the gradient of softmax-then-loss with respect to
/// the logits, `probs - onehot(label)`.
pub fn cross_entropy(probs: &Tensor, label: usize) -> Result<(f64, Tensor)> {
    if label >= probs.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    let loss = -(probs.data()[label] + LOG_EPSILON).ln();
    let mut grad = probs.data().to_vec();
    grad[label] -= 1.0;
    Ok((loss, Tensor::from_parts(probs.shape().to_vec(), grad)))
}

/// Plain gradient descent, `p <- p - lr * g`.
pub fn sgd_step(params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Argument(format!("learning rate must be >= 0, got {lr}")));
    }
    if params.len() != grads.len() {
        return Err(Error::dim(format!(
            "{} parameters but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_shape(g, "sgd gradient")?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn conv_all_ones_with_padding() {
        let out = conv2d_forward(
            &Tensor::filled(&[1, 3, 3], 1.0),
            &Tensor::filled(&[1, 1, 3, 3], 1.0),
            &Tensor::zeros(&[1]),
            1,
            1,
        )
        .unwrap();
        assert_eq!(out.shape(), &[1, 3, 3]);
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let input = t(&[1, 2, 3], &[0.1, -0.2, 0.3, 0.4, 0.5, -0.6]);
        let out = conv2d_forward(&input, &Tensor::filled(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), 1, 0)
            .unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_output_size_with_stride() {
        let out = conv2d_forward(
            &Tensor::filled(&[1, 7, 6], 1.0),
            &Tensor::filled(&[2, 1, 3, 3], 1.0),
            &Tensor::zeros(&[2]),
            2,
            1,
        )
        .unwrap();
        // (7 + 2 - 3) / 2 + 1 = 4, (6 + 2 - 3) / 2 + 1 = 3
        assert_eq!(out.shape(), &[2, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch() {
        let err = conv2d_forward(
            &Tensor::zeros(&[2, 4, 4]),
            &Tensor::zeros(&[1, 3, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            1,
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn conv_backward_zero_upstream() {
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let k = t(&[1, 1, 2, 2], &[0.5, -1.0, 2.0, 0.25]);
        let g = conv2d_backward(&input, &k, 1, 1, &Tensor::zeros(&[1, 3, 3])).unwrap();
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
        assert!(g.param_grads.iter().all(|p| p.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn conv_backward_one_by_one_kernel() {
        let input = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let up = t(&[1, 2, 2], &[0.5, -1.0, 0.25, 2.0]);
        let k = t(&[1, 1, 1, 1], &[3.0]);
        let g = conv2d_backward(&input, &k, 1, 0, &up).unwrap();
        let expected: f64 = input.data().iter().zip(up.data()).map(|(a, b)| a * b).sum();
        assert_eq!(g.param_grads[0].data(), &[expected]);
        assert_eq!(g.param_grads[1].data(), &[up.sum()]);
        let dx: Vec<f64> = up.data().iter().map(|u| u * 3.0).collect();
        assert_eq!(g.input_grad.data(), &dx[..]);
    }

    #[test]
    fn conv_backward_shape_check() {
        let err = conv2d_backward(
            &Tensor::zeros(&[1, 3, 3]),
            &Tensor::zeros(&[1, 1, 3, 3]),
            1,
            1,
            &Tensor::zeros(&[1, 2, 2]),
        );
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn maxpool_single_window() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(maxpool2_forward(&x).unwrap().data(), &[4.0]);
        let g = maxpool2_backward(&x, &t(&[1, 1, 1], &[1.0])).unwrap();
        assert_eq!(g.input_grad.data(), &[0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_tie_routes_top_left() {
        let x = Tensor::filled(&[1, 2, 2], 0.7);
        assert_eq!(maxpool2_forward(&x).unwrap().data(), &[0.7]);
        let g = maxpool2_backward(&x, &t(&[1, 1, 1], &[2.0])).unwrap();
        assert_eq!(g.input_grad.data(), &[2.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn maxpool_odd_size_rejected() {
        assert!(matches!(
            maxpool2_forward(&Tensor::zeros(&[1, 3, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn relu_values_and_grad() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
        let g = relu_backward(&x, &Tensor::filled(&[3], 1.0)).unwrap();
        assert_eq!(g.input_grad.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn relu_all_negative() {
        let x = t(&[4], &[-1.0, -0.5, -3.0, -1e-9]);
        assert!(relu_forward(&x).data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&x, &Tensor::filled(&[4], 5.0)).unwrap();
        assert!(g.input_grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dense_identity_and_bias() {
        let x = t(&[2], &[0.3, -0.7]);
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        assert_eq!(dense_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap(), x);
        let y = dense_forward(&x, &Tensor::zeros(&[2, 2]), &t(&[2], &[1.0, 2.0])).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
    }

    #[test]
    fn dense_shape_mismatch() {
        let err = dense_forward(&Tensor::zeros(&[3]), &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2]));
        assert!(matches!(err, Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_closed_forms() {
        let p = softmax(&t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
        let p = softmax(&t(&[2], &[2f64.ln(), 0.0])).unwrap();
        assert!((p.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.data()[1] - 1.0 / 3.0).abs() < 1e-15);
        let p = softmax(&t(&[2], &[1000.0, 1000.0])).unwrap();
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rejects_single_logit() {
        assert!(softmax(&t(&[1], &[1.0])).is_err());
    }

    #[test]
    fn cross_entropy_values() {
        let (loss, grad) = cross_entropy(&t(&[2], &[0.5, 0.5]), 0).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-11);
        assert_eq!(grad.data(), &[-0.5, 0.5]);
        let (loss, _) = cross_entropy(&t(&[2], &[1.0 - 1e-15, 1e-15]), 0).unwrap();
        assert!(loss.abs() < 1e-11);
        assert!(matches!(
            cross_entropy(&t(&[2], &[0.5, 0.5]), 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![t(&[1], &[1.0])];
        sgd_step(&mut p, &[t(&[1], &[0.5])], 0.1).unwrap();
        assert_eq!(p[0].data(), &[0.95]);

        let before = t(&[3], &[0.1, 0.2, 0.3]);
        let mut p = vec![before.clone()];
        sgd_step(&mut p, &[Tensor::zeros(&[3])], 0.1).unwrap();
        assert_eq!(p[0], before);
        sgd_step(&mut p, &[t(&[3], &[1.0, 2.0, 3.0])], 0.0).unwrap();
        assert_eq!(p[0], before);

        assert!(matches!(
            sgd_step(&mut p, &[Tensor::zeros(&[2])], 0.1),
            Err(Error::Dimension(_))
        ));
    }
}
