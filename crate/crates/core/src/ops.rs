//! Forward and backward kernels for the primitives used by both networks.
//!
//! Kernels are plain functions over [`Tensor`]s; the [`crate::autograd::Tape`]
//! wires them together. Backward kernels that touch parameters accumulate into
//! caller-provided gradient buffers so large weight gradients never need a
//! temporary copy.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// How a loss is reduced to a scalar.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

/// A loss value reported both as a sum and as a per-element mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub sum: f64,
    pub mean: f64,
}

impl LossValue {
    pub fn get(&self, reduction: Reduction) -> f64 {
        match reduction {
            Reduction::Sum => self.sum,
            Reduction::Mean => self.mean,
        }
    }
}

fn kernel_dims<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(usize, usize, usize, usize, usize)> {
    let (cin, h, w) = input.chw()?;
    let [cout, kcin, kh, kw] = kernels.shape()[..] else {
        return Err(Error::shape(
            "conv2d",
            format!("kernels must be [C_out, C_in, k, k], got {:?}", kernels.shape()),
        ));
    };
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels but kernels expect {kcin}"),
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be square with odd extent, got {kh}x{kw}"),
        ));
    }
    if bias.shape() != [cout] {
        return Err(Error::shape(
            "conv2d",
            format!("bias must be [{cout}], got {:?}", bias.shape()),
        ));
    }
    Ok((cin, h, w, cout, kh))
}

fn conv_out_extent(extent: usize, k: usize, padding: usize, op: &'static str) -> Result<usize> {
    let padded = extent + 2 * padding;
    if padded < k {
        return Err(Error::shape(op, format!("kernel {k} larger than padded extent {padded}")));
    }
    Ok(padded - k + 1)
}

/// Unfold `[C, H, W]` into a `[C*k*k, H'*W']` column matrix.
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut cols = vec![T::zero(); c * k * k * n];
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    // valid output columns: 0 <= ox + kx - pad < w
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad).saturating_sub(kx).min(ow);
                    if lo < hi {
                        let start = lo + kx - pad;
                        dst_row[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Fold a column matrix back onto `[C, H, W]`, summing overlaps.
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let n = oh * ow;
    let mut x = vec![T::zero(); c * h * w];
    for ch in 0..c {
        let plane = &mut x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..oh {
                    let iy = oy as isize + ky as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let src_row = &src[oy * ow..(oy + 1) * ow];
                    let lo = pad.saturating_sub(kx);
                    let hi = (w + pad).saturating_sub(kx).min(ow);
                    if lo < hi {
                        let start = lo + kx - pad;
                        for (d, &s) in dst_row[start..start + (hi - lo)]
                            .iter_mut()
                            .zip(&src_row[lo..hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

/// 2-D cross-correlation with zero padding and stride 1.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    padding: usize,
) -> Result<Tensor<T>> {
    let (cin, h, w, cout, k) = kernel_dims(input, kernels, bias)?;
    let oh = conv_out_extent(h, k, padding, "conv2d")?;
    let ow = conv_out_extent(w, k, padding, "conv2d")?;
    let n = oh * ow;
    let kk = cin * k * k;
    let mut out = Vec::with_capacity(cout * n);
    for &b in bias.data() {
        out.extend(std::iter::repeat_n(b, n));
    }
    if k == 1 && padding == 0 {
        T::gemm(cout, kk, n, T::one(), kernels.data(), (kk as isize, 1), input.data(), (n as isize, 1), T::one(), &mut out, (n as isize, 1));
    } else {
        let cols = im2col(input.data(), cin, h, w, k, padding, oh, ow);
        T::gemm(cout, kk, n, T::one(), kernels.data(), (kk as isize, 1), &cols, (n as isize, 1), T::one(), &mut out, (n as isize, 1));
    }
    Tensor::new(&[cout, oh, ow], out)
}

/// Backward pass of [`conv2d`].
///
/// Kernel and bias gradients are added into `dkernels` / `dbias`; the input
/// gradient is returned when `want_input` is set.
pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    padding: usize,
    grad_out: &Tensor<T>,
    dkernels: &mut [T],
    dbias: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (cin, h, w) = input.chw()?;
    let (cout, oh, ow) = grad_out.chw()?;
    let k = kernels.shape()[2];
    let n = oh * ow;
    let kk = cin * k * k;
    if dkernels.len() != cout * kk || dbias.len() != cout {
        return Err(Error::shape("conv2d_backward", "gradient buffers do not match kernels"));
    }
    let g = grad_out.data();
    for (o, db) in dbias.iter_mut().enumerate() {
        *db += g[o * n..(o + 1) * n].iter().copied().sum::<T>();
    }
    let pointwise = k == 1 && padding == 0;
    let owned_cols;
    let cols: &[T] = if pointwise {
        input.data()
    } else {
        owned_cols = im2col(input.data(), cin, h, w, k, padding, oh, ow);
        &owned_cols
    };
    // dK[cout, kk] += G[cout, n] * cols^T[n, kk]
    T::gemm(cout, n, kk, T::one(), g, (n as isize, 1), cols, (1, n as isize), T::one(), dkernels, (kk as isize, 1));
    if !want_input {
        return Ok(None);
    }
    // dcols[kk, n] = K^T[kk, cout] * G[cout, n]
    let mut dcols = vec![T::zero(); kk * n];
    T::gemm(kk, cout, n, T::one(), kernels.data(), (1, kk as isize), g, (n as isize, 1), T::zero(), &mut dcols, (n as isize, 1));
    let dx = if pointwise {
        dcols
    } else {
        col2im(&dcols, cin, h, w, k, padding, oh, ow)
    };
    Ok(Some(Tensor::new(&[cin, h, w], dx)?))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, for every
/// output element, the flat input index it was taken from.
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (c, h, w) = input.chw()?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape("maxpool2x2", format!("extents must be even, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                // first maximum in row-major window order wins ties
                let mut best = i0;
                for cand in [i0 + 1, i0 + w, i0 + w + 1] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, oh, ow], out)?, idx))
}

pub fn maxpool2x2_backward<T: Scalar>(
    input_shape: &[usize],
    argmax: &[usize],
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut dx = Tensor::zeros(input_shape);
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    Ok(dx)
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x2<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let (oh, ow) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        for y in 0..h {
            let src = &x[(ch * h + y) * w..(ch * h + y + 1) * w];
            let row0 = (ch * oh + 2 * y) * ow;
            for (xx, &v) in src.iter().enumerate() {
                out[row0 + 2 * xx] = v;
                out[row0 + 2 * xx + 1] = v;
            }
            out.copy_within(row0..row0 + ow, row0 + ow);
        }
    }
    Tensor::new(&[c, oh, ow], out)
}

pub fn upsample2x2_backward<T: Scalar>(grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, oh, ow) = grad_out.chw()?;
    let (h, w) = (oh / 2, ow / 2);
    let g = grad_out.data();
    let mut dx = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = (ch * oh + 2 * y) * ow + 2 * x;
                dx[(ch * h + y) * w + x] = g[i] + g[i + 1] + g[i + ow] + g[i + ow + 1];
            }
        }
    }
    Tensor::new(&[c, h, w], dx)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// ReLU backward; the subgradient at exactly zero is zero.
pub fn relu_backward<T: Scalar>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape(), data).expect("relu_backward shapes agree")
}

/// Stack `a` then `b` along the channel axis.
pub fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ca, ha, wa) = a.chw()?;
    let (cb, hb, wb) = b.chw()?;
    if (ha, wa) != (hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("spatial extents differ: {ha}x{wa} vs {hb}x{wb}"),
        ));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Tensor::new(&[ca + cb, ha, wa], data)
}

/// Split a channel-stacked tensor back into its first `c1` channels and the rest.
pub fn split_channels<T: Scalar>(x: &Tensor<T>, c1: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, h, w) = x.chw()?;
    if c1 == 0 || c1 >= c {
        return Err(Error::shape("split_channels", format!("cannot split {c} channels at {c1}")));
    }
    let cut = c1 * h * w;
    Ok((
        Tensor::new(&[c1, h, w], x.data()[..cut].to_vec())?,
        Tensor::new(&[c - c1, h, w], x.data()[cut..].to_vec())?,
    ))
}

fn dense_rows<T: Scalar>(op: &'static str, input: &Tensor<T>, n: usize) -> Result<usize> {
    match input.shape() {
        [rows, cols] if *cols == n => Ok(*rows),
        _ if input.len() == n => Ok(1),
        _ => Err(Error::shape(op, format!("input {:?} does not match {n} weight columns", input.shape()))),
    }
}

/// Fully connected layer `y = W x + b`.
///
/// An input of shape `[R, N]` is a batch of `R` rows and gives `[R, M]`;
/// any other input with `N` elements is flattened and gives `[M]`.
pub fn dense<T: Scalar>(input: &Tensor<T>, weights: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, n] = weights.shape()[..] else {
        return Err(Error::shape("dense", format!("weights must be [M, N], got {:?}", weights.shape())));
    };
    let rows = dense_rows("dense", input, n)?;
    if bias.shape() != [m] {
        return Err(Error::shape("dense", format!("bias must be [{m}], got {:?}", bias.shape())));
    }
    let mut out: Vec<T> = bias.data().iter().copied().cycle().take(rows * m).collect();
    // out[r, i] += Σ_j x[r, j] W[i, j]
    T::gemm(rows, n, m, T::one(), input.data(), (n as isize, 1), weights.data(), (1, n as isize), T::one(), &mut out, (m as isize, 1));
    if input.ndim() == 2 && input.shape()[1] == n {
        Tensor::new(&[rows, m], out)
    } else {
        Tensor::new(&[m], out)
    }
}

/// Backward of [`dense`]: accumulates `gᵀ x` into `dweights` and the
/// row-summed `g` into `dbias`.
pub fn dense_backward<T: Scalar>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    grad_out: &Tensor<T>,
    dweights: &mut [T],
    dbias: &mut [T],
    want_input: bool,
) -> Result<Option<Tensor<T>>> {
    let (m, n) = (weights.shape()[0], weights.shape()[1]);
    let rows = dense_rows("dense_backward", input, n)?;
    let g = grad_out.data();
    if g.len() != rows * m || dweights.len() != m * n || dbias.len() != m {
        return Err(Error::shape("dense_backward", "gradient buffers do not match weights"));
    }
    for row in g.chunks_exact(m) {
        dbias.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
    }
    T::gemm(m, rows, n, T::one(), g, (1, m as isize), input.data(), (n as isize, 1), T::one(), dweights, (n as isize, 1));
    if !want_input {
        return Ok(None);
    }
    let mut dx = vec![T::zero(); rows * n];
    T::gemm(rows, m, n, T::one(), g, (m as isize, 1), weights.data(), (n as isize, 1), T::zero(), &mut dx, (n as isize, 1));
    Ok(Some(Tensor::new(input.shape(), dx)?))
}

/// Per-pixel softmax across the channel axis of a `[C, H, W]` tensor.
pub fn softmax_over_classes<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = input.chw()?;
    let plane = h * w;
    let x = input.data();
    let mut out = vec![T::zero(); x.len()];
    let mut maxes = x[..plane].to_vec();
    for ch in 1..c {
        for (m, &v) in maxes.iter_mut().zip(&x[ch * plane..(ch + 1) * plane]) {
            if v > *m {
                *m = v;
            }
        }
    }
    let mut sums = vec![T::zero(); plane];
    for ch in 0..c {
        let src = &x[ch * plane..(ch + 1) * plane];
        let dst = &mut out[ch * plane..(ch + 1) * plane];
        for p in 0..plane {
            let e = (src[p] - maxes[p]).exp();
            dst[p] = e;
            sums[p] += e;
        }
    }
    for ch in 0..c {
        for (v, &s) in out[ch * plane..(ch + 1) * plane].iter_mut().zip(&sums) {
            *v = *v / s;
        }
    }
    Tensor::new(input.shape(), out)
}

pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    let p = probs.data();
    let g = grad_out.data();
    let mut dot = vec![T::zero(); plane];
    for ch in 0..c {
        for (i, d) in dot.iter_mut().enumerate() {
            *d += p[ch * plane + i] * g[ch * plane + i];
        }
    }
    let data = (0..p.len())
        .map(|i| p[i] * (g[i] - dot[i % plane]))
        .collect();
    Tensor::new(probs.shape(), data)
}

fn check_labels(labels: &[usize], classes: usize, pixels: usize) -> Result<()> {
    if labels.len() != pixels {
        return Err(Error::shape(
            "cross_entropy",
            format!("{} labels for {pixels} pixels", labels.len()),
        ));
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= classes) {
        return Err(Error::LabelOutOfRange { label, classes, index });
    }
    Ok(())
}

/// Smallest probability fed to the logarithm.
fn prob_floor<T: Scalar>() -> T {
    T::min_positive_value()
}

/// `-Σ_x log p_{l(x)}(x)` over all pixels of a `[C, H, W]` probability map.
pub fn cross_entropy_loss<T: Scalar>(probs: &Tensor<T>, labels: &[usize]) -> Result<LossValue> {
    let (c, h, w) = probs.chw()?;
    let plane = h * w;
    check_labels(labels, c, plane)?;
    let p = probs.data();
    let sum: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| -p[l * plane + i].max(prob_floor()).as_f64().ln())
        .sum();
    Ok(LossValue { sum, mean: sum / plane as f64 })
}

/// Gradient of [`cross_entropy_loss`] with respect to the probabilities.
pub fn cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    scale: T,
) -> Result<Tensor<T>> {
    let (_, h, w) = probs.chw()?;
    let plane = h * w;
    let mut grad = Tensor::zeros(probs.shape());
    let p = probs.data();
    let g = grad.data_mut();
    for (i, &l) in labels.iter().enumerate() {
        g[l * plane + i] = -scale / p[l * plane + i].max(prob_floor());
    }
    Ok(grad)
}

/// Cross-entropy evaluated directly from logits via log-sum-exp.
///
/// Returns the loss and the softmax probabilities; the gradient with respect
/// to the logits is `scale * (probs - one_hot(labels))`.
pub fn softmax_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(LossValue, Tensor<T>)> {
    let (c, h, w) = logits.chw()?;
    let plane = h * w;
    check_labels(labels, c, plane)?;
    let probs = softmax_over_classes(logits)?;
    let z = logits.data();
    let mut sum = 0.0f64;
    for (i, &l) in labels.iter().enumerate() {
        let m = (0..c).map(|ch| z[ch * plane + i].as_f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = m + (0..c).map(|ch| (z[ch * plane + i].as_f64() - m).exp()).sum::<f64>().ln();
        sum += lse - z[l * plane + i].as_f64();
    }
    Ok((LossValue { sum, mean: sum / plane as f64 }, probs))
}

pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    scale: T,
) -> Result<Tensor<T>> {
    let (_, h, w) = probs.chw()?;
    let plane = h * w;
    let mut grad = probs.clone();
    {
        let g = grad.data_mut();
        for (i, &l) in labels.iter().enumerate() {
            g[l * plane + i] -= T::one();
        }
    }
    grad.scale(scale);
    Ok(grad)
}

/// `‖target − pred‖²` as a sum and per-element mean.
pub fn mse_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<LossValue> {
    if pred.shape() != target.shape() {
        return Err(Error::shape(
            "mse_loss",
            format!("{:?} vs {:?}", pred.shape(), target.shape()),
        ));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p.as_f64() - t.as_f64();
            d * d
        })
        .sum();
    Ok(LossValue { sum, mean: sum / pred.len() as f64 })
}

pub fn mse_backward<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, scale: T) -> Tensor<T> {
    let two = T::from_f64(2.0) * scale;
    let data = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| two * (p - t))
        .collect();
    Tensor::new(pred.shape(), data).expect("mse shapes agree")
}
