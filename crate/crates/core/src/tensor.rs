//! Dense double-precision tensors and the layer kernels used by the
//! desk-scale CNN: convolution, ReLU, global average pooling, a linear head,
//! softmax cross-entropy, momentum SGD and a central-difference oracle.
//!
//! Convolution is cross-correlation (no kernel flip). All kernels are pure
//! functions of their inputs and deterministic down to the bit.

use serde::{Deserialize, Serialize};

use crate::error::{MfpError, Result};
use crate::filters::FilterBank;

/// Row-major dense array of `f64`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(MfpError::InvalidArgument(format!(
                "tensor dimensions must be positive, got {shape:?}"
            )));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(MfpError::ShapeMismatch {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return Err(MfpError::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub(crate) fn expect_rank(&self, op: &'static str, rank: usize) -> Result<()> {
        if self.rank() != rank {
            return Err(MfpError::InvalidArgument(format!(
                "{op}: expected a rank-{rank} tensor, got shape {:?}",
                self.shape
            )));
        }
        Ok(())
    }
}

/// A tensor together with the gradient accumulated for it.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair {
    pub value: Tensor,
    pub grad: Tensor,
}

impl GradPair {
    pub fn new(value: Tensor, grad: Tensor) -> Result<Self> {
        if value.shape() != grad.shape() {
            return Err(MfpError::shape("grad pair", value.shape(), grad.shape()));
        }
        Ok(Self { value, grad })
    }

    pub fn zero_grad(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self { value, grad }
    }
}

/// Spatial output extent of a convolution along one axis.
pub fn conv_output_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

struct ConvDims {
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    k: usize,
    h_out: usize,
    w_out: usize,
}

fn conv_dims(input: &Tensor, weights: &FilterBank, stride: usize, pad: usize) -> Result<ConvDims> {
    input.expect_rank("conv2d", 3)?;
    if stride == 0 {
        return Err(MfpError::InvalidArgument("conv2d: stride must be >= 1".into()));
    }
    let (c_in, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    if weights.in_channels() != c_in {
        return Err(MfpError::shape(
            "conv2d (input vs filter bank)",
            input.shape(),
            weights.weights().shape(),
        ));
    }
    let k = weights.kernel();
    let (h_out, w_out) = match (conv_output_dim(h, k, stride, pad), conv_output_dim(w, k, stride, pad)) {
        (Some(a), Some(b)) => (a, b),
        _ => {
            return Err(MfpError::shape(
                "conv2d (kernel larger than padded input)",
                input.shape(),
                weights.weights().shape(),
            ))
        }
    };
    Ok(ConvDims {
        c_in,
        h,
        w,
        c_out: weights.out_channels(),
        k,
        h_out,
        w_out,
    })
}

/// Range of output columns `ox` for which `ox * stride + kx - pad` lands in `[0, width)`.
#[inline]
fn valid_range(out_len: usize, width: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    // largest ox with ox*stride + offset - pad <= width - 1
    let limit = width + pad - 1;
    let hi = if limit < offset {
        0
    } else {
        ((limit - offset) / stride + 1).min(out_len)
    };
    (lo, hi.max(lo))
}

/// Patch matrix `[C_in * K * K, H_out * W_out]`; padding reads as zero.
fn im2col(x: &[f64], d: &ConvDims, stride: usize, pad: usize) -> Vec<f64> {
    let plane = d.h_out * d.w_out;
    let mut col = vec![0.0; d.c_in * d.k * d.k * plane];
    for c in 0..d.c_in {
        let x_c = &x[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            let (oy_lo, oy_hi) = valid_range(d.h_out, d.h, ky, stride, pad);
            for kx in 0..d.k {
                let r = (c * d.k + ky) * d.k + kx;
                let dst = &mut col[r * plane..(r + 1) * plane];
                let (ox_lo, ox_hi) = valid_range(d.w_out, d.w, kx, stride, pad);
                for oy in oy_lo..oy_hi {
                    let row = &x_c[(oy * stride + ky - pad) * d.w..][..d.w];
                    let out = &mut dst[oy * d.w_out..(oy + 1) * d.w_out];
                    for ox in ox_lo..ox_hi {
                        out[ox] = row[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
    col
}

/// Scatter-adds a patch-matrix gradient back onto the `[C_in, H, W]` input.
fn col2im(gcol: &[f64], d: &ConvDims, stride: usize, pad: usize) -> Vec<f64> {
    let plane = d.h_out * d.w_out;
    let mut gx = vec![0.0; d.c_in * d.h * d.w];
    for c in 0..d.c_in {
        let gx_c = &mut gx[c * d.h * d.w..(c + 1) * d.h * d.w];
        for ky in 0..d.k {
            let (oy_lo, oy_hi) = valid_range(d.h_out, d.h, ky, stride, pad);
            for kx in 0..d.k {
                let r = (c * d.k + ky) * d.k + kx;
                let src = &gcol[r * plane..(r + 1) * plane];
                let (ox_lo, ox_hi) = valid_range(d.w_out, d.w, kx, stride, pad);
                for oy in oy_lo..oy_hi {
                    let row = &mut gx_c[(oy * stride + ky - pad) * d.w..][..d.w];
                    let g = &src[oy * d.w_out..(oy + 1) * d.w_out];
                    for ox in ox_lo..ox_hi {
                        row[ox * stride + kx - pad] += g[ox];
                    }
                }
            }
        }
    }
    gx
}

/// Cross-correlation of a `[C_in, H, W]` input with every filter of the bank.
pub fn conv2d_forward(input: &Tensor, weights: &FilterBank, stride: usize, pad: usize) -> Result<Tensor> {
    let d = conv_dims(input, weights, stride, pad)?;
    let col = im2col(input.data(), &d, stride, pad);
    let wt = weights.weights().data();
    let plane = d.h_out * d.w_out;
    let rows = d.c_in * d.k * d.k;
    let mut out = vec![0.0; d.c_out * plane];
    for (o, out_o) in out.chunks_exact_mut(plane).enumerate() {
        for (r, &wv) in wt[o * rows..(o + 1) * rows].iter().enumerate() {
            if wv == 0.0 {
                continue;
            }
            for (y, &v) in out_o.iter_mut().zip(&col[r * plane..(r + 1) * plane]) {
                *y += wv * v;
            }
        }
    }
    Tensor::new(vec![d.c_out, d.h_out, d.w_out], out)
}

/// Gradients of `<grad_out, conv2d_forward(input, weights)>` with respect to
/// the input and the filter weights.
pub fn conv2d_backward(
    input: &Tensor,
    weights: &FilterBank,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<(Tensor, Tensor)> {
    let d = conv_dims(input, weights, stride, pad)?;
    let expected = [d.c_out, d.h_out, d.w_out];
    if grad_out.shape() != expected {
        return Err(MfpError::shape(
            "conv2d_backward (grad_out)",
            grad_out.shape(),
            &expected,
        ));
    }
    let col = im2col(input.data(), &d, stride, pad);
    let wt = weights.weights().data();
    let g = grad_out.data();
    let plane = d.h_out * d.w_out;
    let rows = d.c_in * d.k * d.k;
    let mut gw = vec![0.0; wt.len()];
    let mut gcol = vec![0.0; col.len()];
    for (o, g_o) in g.chunks_exact(plane).enumerate() {
        for r in 0..rows {
            let col_r = &col[r * plane..(r + 1) * plane];
            gw[o * rows + r] = g_o.iter().zip(col_r).map(|(a, b)| a * b).sum();
            let wv = wt[o * rows + r];
            if wv != 0.0 {
                for (dst, &gv) in gcol[r * plane..(r + 1) * plane].iter_mut().zip(g_o) {
                    *dst += wv * gv;
                }
            }
        }
    }
    let gx = col2im(&gcol, &d, stride, pad);
    Ok((
        Tensor::new(input.shape().to_vec(), gx)?,
        Tensor::new(weights.weights().shape().to_vec(), gw)?,
    ))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    Tensor {
        shape: input.shape.clone(),
        data: input.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// Passes `grad_out` through where the forward input was non-negative.
///
/// The subgradient at exactly 0 is taken as 1 so a zeroed (soft-pruned)
/// filter still receives gradient and can recover.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if input.shape() != grad_out.shape() {
        return Err(MfpError::shape("relu_backward", input.shape(), grad_out.shape()));
    }
    let data = input
        .data
        .iter()
        .zip(&grad_out.data)
        .map(|(&x, &g)| if x >= 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape.clone(), data)
}

/// Per-channel spatial mean of a `[C, H, W]` tensor, giving `[C]`.
pub fn global_avgpool_forward(input: &Tensor) -> Result<Tensor> {
    input.expect_rank("global_avgpool", 3)?;
    let c = input.shape[0];
    let plane = input.shape[1] * input.shape[2];
    let data = input
        .data
        .chunks_exact(plane)
        .map(|ch| ch.iter().sum::<f64>() / plane as f64)
        .collect();
    Tensor::new(vec![c], data)
}

pub fn global_avgpool_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if input_shape.len() != 3 || grad_out.shape() != [input_shape[0]] {
        return Err(MfpError::shape(
            "global_avgpool_backward",
            input_shape,
            grad_out.shape(),
        ));
    }
    let plane = input_shape[1] * input_shape[2];
    let scale = 1.0 / plane as f64;
    let mut data = Vec::with_capacity(input_shape[0] * plane);
    for &g in grad_out.data() {
        data.extend(std::iter::repeat_n(g * scale, plane));
    }
    Tensor::new(input_shape.to_vec(), data)
}

fn linear_dims(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize)> {
    input.expect_rank("linear", 2)?;
    weights.expect_rank("linear", 2)?;
    let (b, f) = (input.shape[0], input.shape[1]);
    let (c, wf) = (weights.shape[0], weights.shape[1]);
    if wf != f {
        return Err(MfpError::shape(
            "linear (input vs weights)",
            input.shape(),
            weights.shape(),
        ));
    }
    if bias.shape() != [c] {
        return Err(MfpError::shape(
            "linear (weights vs bias)",
            weights.shape(),
            bias.shape(),
        ));
    }
    Ok((b, f, c))
}

/// `out[b, c] = bias[c] + sum_f input[b, f] * weights[c, f]`.
pub fn linear_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (b, f, c) = linear_dims(input, weights, bias)?;
    let mut out = Vec::with_capacity(b * c);
    for row in input.data.chunks_exact(f) {
        for (j, w_row) in weights.data.chunks_exact(f).enumerate() {
            let dot: f64 = row.iter().zip(w_row).map(|(x, w)| x * w).sum();
            out.push(bias.data[j] + dot);
        }
    }
    Tensor::new(vec![b, c], out)
}

/// Returns `(grad_input, grad_weights, grad_bias)`.
pub fn linear_backward(
    input: &Tensor,
    weights: &Tensor,
    bias: &Tensor,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (b, f, c) = linear_dims(input, weights, bias)?;
    if grad_out.shape() != [b, c] {
        return Err(MfpError::shape("linear_backward (grad_out)", grad_out.shape(), &[b, c]));
    }
    let mut gx = vec![0.0; b * f];
    let mut gw = vec![0.0; c * f];
    let mut gb = vec![0.0; c];
    for s in 0..b {
        let x = &input.data[s * f..(s + 1) * f];
        let gxs = &mut gx[s * f..(s + 1) * f];
        for j in 0..c {
            let g = grad_out.data[s * c + j];
            gb[j] += g;
            let w_row = &weights.data[j * f..(j + 1) * f];
            let gw_row = &mut gw[j * f..(j + 1) * f];
            for k in 0..f {
                gw_row[k] += g * x[k];
                gxs[k] += g * w_row[k];
            }
        }
    }
    Ok((
        Tensor::new(vec![b, f], gx)?,
        Tensor::new(vec![c, f], gw)?,
        Tensor::new(vec![c], gb)?,
    ))
}

/// Mean cross-entropy of `logits[B, C]` against integer labels, with the
/// gradient `(softmax - onehot) / B`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    logits.expect_rank("softmax_cross_entropy", 2)?;
    let (b, c) = (logits.shape[0], logits.shape[1]);
    if labels.len() != b {
        return Err(MfpError::shape(
            "softmax_cross_entropy (labels)",
            logits.shape(),
            &[labels.len()],
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= c) {
        return Err(MfpError::LabelOutOfRange { label, classes: c });
    }
    let inv_b = 1.0 / b as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(b * c);
    for (row, &label) in logits.data.chunks_exact(c).zip(labels) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        loss += log_z - row[label];
        for (j, &z) in row.iter().enumerate() {
            let p = (z - log_z).exp();
            let onehot = if j == label { 1.0 } else { 0.0 };
            grad.push((p - onehot) * inv_b);
        }
    }
    Ok((loss * inv_b, Tensor::new(vec![b, c], grad)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        // lr = 0 is accepted: it freezes the parameters, which the trainer relies on.
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(MfpError::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(MfpError::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(MfpError::InvalidArgument(format!(
                "weight decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }
}

/// One momentum-SGD update:
/// `v <- momentum * v + grad + weight_decay * param; param <- param - lr * v`.
pub fn sgd_step(param: &mut Tensor, grad: &Tensor, velocity: &mut Tensor, cfg: &SgdConfig) -> Result<()> {
    if param.shape() != grad.shape() {
        return Err(MfpError::shape("sgd_step (grad)", param.shape(), grad.shape()));
    }
    if param.shape() != velocity.shape() {
        return Err(MfpError::shape("sgd_step (velocity)", param.shape(), velocity.shape()));
    }
    cfg.validate()?;
    for ((p, &g), v) in param.data.iter_mut().zip(&grad.data).zip(velocity.data.iter_mut()) {
        *v = cfg.momentum * *v + g + cfg.weight_decay * *p;
        *p -= cfg.lr * *v;
    }
    Ok(())
}

/// Central differences `(f(x + eps e_i) - f(x - eps e_i)) / (2 eps)` for every element.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if eps.is_nan() || eps <= 0.0 {
        return Err(MfpError::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data[i];
        probe.data[i] = orig + eps;
        let plus = f(&probe);
        probe.data[i] = orig - eps;
        let minus = f(&probe);
        probe.data[i] = orig;
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// `|a - b| / max(|a|, |b|, floor)`; the floor keeps near-zero pairs from
/// producing meaningless ratios.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(floor);
    (a - b).abs() / denom
}
