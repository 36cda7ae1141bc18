//! Forward kernels. All convolutions are cross-correlations with zero
//! padding and no bias.

use std::borrow::Borrow;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{ChannelPartition, GroupLayout, Permutation, Real, Shape, Tensor};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Output positions `o` of a strided, padded window for which input index
/// `o * stride + k - pad` lands inside `0..in_len`.
pub(crate) fn valid_range(out_len: usize, in_len: usize, k: usize, stride: usize, pad: usize) -> Range<usize> {
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // o * stride + k - pad <= in_len - 1
    let limit = in_len + pad;
    let hi = if limit <= k {
        0
    } else {
        ((limit - 1 - k) / stride + 1).min(out_len)
    };
    lo..hi.max(lo)
}

#[inline]
pub(crate) fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn conv_out_len(len: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidShape("stride must be >= 1".into()));
    }
    if len + 2 * pad < k {
        return Err(Error::InvalidShape(format!(
            "kernel {k} larger than padded input {}",
            len + 2 * pad
        )));
    }
    Ok((len + 2 * pad - k) / stride + 1)
}

fn check_kernels<T: Real, K: Borrow<Tensor<T>>>(kernels: &[K], layout: &GroupLayout) -> Result<()> {
    if kernels.len() != layout.groups() {
        return Err(Error::InvalidShape(format!(
            "{} kernels for {} groups",
            kernels.len(),
            layout.groups()
        )));
    }
    for (g, k) in kernels.iter().enumerate() {
        k.borrow().expect_shape(layout.kernel_shape(g), &format!("group {g} kernel"))?;
    }
    Ok(())
}

/// 1×1 group convolution over explicit input/output partitions. Group `g`
/// has a `(pout[g], pin[g])` kernel and sees only its own input slice.
pub fn conv1x1_grouped_forward<T: Real>(
    x: &Tensor<T>,
    kernels: &[Tensor<T>],
    pin: &ChannelPartition,
    pout: &ChannelPartition,
) -> Result<Tensor<T>> {
    let layout = GroupLayout::grouped(pin, pout)?;
    pointwise_forward(x, kernels, &layout)
}

/// 1×1 convolution for an arbitrary [`GroupLayout`] (plain, dense or shared).
pub fn pointwise_forward<T: Real, K: Borrow<Tensor<T>> + Sync>(
    x: &Tensor<T>,
    kernels: &[K],
    layout: &GroupLayout,
) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.c != layout.in_channels() {
        return Err(Error::InvalidPartition(format!(
            "partition covers {} channels, input has {}",
            layout.in_channels(),
            s.c
        )));
    }
    check_kernels(kernels, layout)?;
    let cout = layout.out_channels();
    let out_shape = s.with_c(cout);
    let rows = output_rows(layout);
    let plane = s.plane();
    let mut out = Tensor::zeros(out_shape);
    par::for_each_chunk(out.data_mut(), plane, |idx, dst| {
        let (n, oc) = (idx / cout, idx % cout);
        let (g, row) = rows[oc];
        let inputs = layout.inputs(g);
        let w = &kernels[g].borrow().data()[row * inputs.len()..(row + 1) * inputs.len()];
        for (&wi, &ic) in w.iter().zip(inputs) {
            axpy(wi, x.plane(n, ic), dst);
        }
    });
    Ok(out)
}

/// For each output channel, its group and row within that group's kernel.
pub(crate) fn output_rows(layout: &GroupLayout) -> Vec<(usize, usize)> {
    let pout = layout.outputs();
    (0..pout.len())
        .flat_map(|g| (0..pout.sizes()[g]).map(move |r| (g, r)))
        .collect()
}

/// Per-channel 3×3 convolution, padding 1, stride 1 or 2.
pub fn depthwise_conv3x3_forward<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, stride: usize) -> Result<Tensor<T>> {
    if stride != 1 && stride != 2 {
        return Err(Error::UnsupportedStride(stride));
    }
    let s = x.shape();
    weights.expect_shape(Shape::new(s.c, 1, 3, 3), "depthwise weights")?;
    let ho = conv_out_len(s.h, 3, stride, 1)?;
    let wo = conv_out_len(s.w, 3, stride, 1)?;
    let out_shape = Shape::new(s.n, s.c, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    par::for_each_chunk(out.data_mut(), ho * wo, |idx, dst| {
        let c = idx % s.c;
        let src = x.plane(idx / s.c, c);
        let k = &weights.data()[c * 9..c * 9 + 9];
        accumulate_window(src, s.h, s.w, k, 3, 3, stride, 1, dst, ho, wo);
    });
    Ok(out)
}

/// dst[oy, ox] += Σ k[ky, kx] · src[oy·s + ky − pad, ox·s + kx − pad]
#[allow(clippy::too_many_arguments)]
pub(crate) fn accumulate_window<T: Real>(
    src: &[T],
    h: usize,
    w: usize,
    kernel: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dst: &mut [T],
    ho: usize,
    wo: usize,
) {
    for ky in 0..kh {
        let oys = valid_range(ho, h, ky, stride, pad);
        for kx in 0..kw {
            let wv = kernel[ky * kw + kx];
            if wv == T::zero() {
                continue;
            }
            let oxs = valid_range(wo, w, kx, stride, pad);
            for oy in oys.clone() {
                let iy = oy * stride + ky - pad;
                let row = &src[iy * w..(iy + 1) * w];
                let drow = &mut dst[oy * wo..(oy + 1) * wo];
                if stride == 1 {
                    let ix0 = oxs.start + kx - pad;
                    axpy(wv, &row[ix0..ix0 + oxs.len()], &mut drow[oxs.clone()]);
                } else {
                    for ox in oxs.clone() {
                        drow[ox] += wv * row[ox * stride + kx - pad];
                    }
                }
            }
        }
    }
}

/// Dense convolution, weights `(cout, cin, kh, kw)`.
pub fn conv2d_dense_forward<T: Real>(x: &Tensor<T>, weights: &Tensor<T>, stride: usize, pad: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    let ws = weights.shape();
    if ws.c != s.c {
        return Err(Error::InvalidShape(format!(
            "kernel expects {} input channels, input has {}",
            ws.c, s.c
        )));
    }
    let ho = conv_out_len(s.h, ws.h, stride, pad)?;
    let wo = conv_out_len(s.w, ws.w, stride, pad)?;
    let out_shape = Shape::new(s.n, ws.n, ho, wo);
    let mut out = Tensor::zeros(out_shape);
    let ksize = ws.h * ws.w;
    par::for_each_chunk(out.data_mut(), ho * wo, |idx, dst| {
        let (n, co) = (idx / ws.n, idx % ws.n);
        for ci in 0..s.c {
            let k = &weights.data()[(co * ws.c + ci) * ksize..(co * ws.c + ci + 1) * ksize];
            accumulate_window(x.plane(n, ci), s.h, s.w, k, ws.h, ws.w, stride, pad, dst, ho, wo);
        }
    });
    Ok(out)
}

pub fn relu6<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let six = T::lit(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Infer,
}

/// Running statistics carried by a batch-norm layer between calls.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

impl<T: Real> BatchNormState<T> {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
        }
    }
}

/// Intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct BnSaved<T> {
    pub mode: BnMode,
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
}

/// Per-channel normalisation. Train mode normalises with batch statistics
/// over `(n, h, w)` and folds them into the running state; infer mode uses
/// the running state.
pub fn batchnorm_forward<T: Real>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    state: &mut BatchNormState<T>,
    mode: BnMode,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let s = x.shape();
    if gamma.len() != s.c || beta.len() != s.c || state.running_mean.len() != s.c {
        return Err(Error::BatchNorm(format!(
            "parameters sized for {} channels, input has {}",
            gamma.len(),
            s.c
        )));
    }
    let count = s.n * s.plane();
    let eps = T::lit(BN_EPSILON);
    let (mean, var) = match mode {
        BnMode::Train => {
            if count < 2 {
                return Err(Error::BatchNorm(format!(
                    "train mode needs more than one value per channel, got {count}"
                )));
            }
            let stats = par::map_indices(s.c, |c| channel_stats(x, c));
            let mean: Vec<T> = stats.iter().map(|p| p.0).collect();
            let var: Vec<T> = stats.iter().map(|p| p.1).collect();
            let m = T::lit(BN_MOMENTUM);
            let unbias = T::lit(count as f64 / (count - 1) as f64);
            for c in 0..s.c {
                state.running_mean[c] = m * state.running_mean[c] + (T::one() - m) * mean[c];
                state.running_var[c] = m * state.running_var[c] + (T::one() - m) * var[c] * unbias;
            }
            (mean, var)
        }
        BnMode::Infer => (state.running_mean.clone(), state.running_var.clone()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Tensor::zeros(s);
    let mut out = Tensor::zeros(s);
    let plane = s.plane();
    par::for_each_chunk(xhat.data_mut(), plane, |idx, dst| {
        let c = idx % s.c;
        for (d, &v) in dst.iter_mut().zip(x.plane(idx / s.c, c)) {
            *d = (v - mean[c]) * inv_std[c];
        }
    });
    par::for_each_chunk(out.data_mut(), plane, |idx, dst| {
        let c = idx % s.c;
        for (d, &v) in dst.iter_mut().zip(xhat.plane(idx / s.c, c)) {
            *d = gamma[c] * v + beta[c];
        }
    });
    Ok((out, BnSaved { mode, xhat, inv_std }))
}

/// Mean and biased variance of channel `c` over batch and space.
fn channel_stats<T: Real>(x: &Tensor<T>, c: usize) -> (T, T) {
    let s = x.shape();
    let count = T::lit((s.n * s.plane()) as f64);
    let mut sum = T::zero();
    for n in 0..s.n {
        sum += x.plane(n, c).iter().copied().sum::<T>();
    }
    let mean = sum / count;
    let mut sq = T::zero();
    for n in 0..s.n {
        sq += x.plane(n, c).iter().map(|&v| (v - mean) * (v - mean)).sum::<T>();
    }
    (mean, sq / count)
}

/// Spatial mean per channel, output `(n, c, 1, 1)`.
pub fn global_avgpool<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let count = T::lit(s.plane() as f64);
    let data = (0..s.n * s.c)
        .map(|i| x.plane(i / s.c, i % s.c).iter().copied().sum::<T>() / count)
        .collect();
    Tensor::new(Shape::new(s.n, s.c, 1, 1), data).expect("pool shape")
}

/// Output channel `i` is input channel `perm[i]`.
pub fn channel_permute<T: Real>(x: &Tensor<T>, perm: &Permutation) -> Result<Tensor<T>> {
    let s = x.shape();
    if perm.len() != s.c {
        return Err(Error::InvalidPermutation(format!(
            "permutation over {} channels applied to {} channels",
            perm.len(),
            s.c
        )));
    }
    let mut out = Tensor::zeros(s);
    par::for_each_chunk(out.data_mut(), s.plane(), |idx, dst| {
        dst.copy_from_slice(x.plane(idx / s.c, perm.source(idx % s.c)));
    });
    Ok(out)
}

pub fn residual_add<T: Real>(x: &Tensor<T>, fx: &Tensor<T>) -> Result<Tensor<T>> {
    x.add(fx)
}
