//! Analytic backward passes, one per forward kernel in [`crate::tensor::ops`],
//! plus a central-difference checker in [`gradcheck`].
//!
//! Each function takes what the forward pass saw and the gradient of the
//! loss with respect to the forward output, and returns gradients for every
//! forward input and parameter.

use std::borrow::Borrow;

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::ops::{axpy, conv_out_len, dot, output_rows, valid_range, BnMode, BnSaved};
use crate::tensor::{ChannelPartition, GroupLayout, Permutation, Real, Shape, Tensor};

pub mod gradcheck;

/// Gradients of one op: one entry per forward input, one per parameter.
#[derive(Debug, Clone)]
pub struct GradPair<T> {
    pub input_grads: Vec<Tensor<T>>,
    pub param_grads: Vec<Tensor<T>>,
}

impl<T: Real> GradPair<T> {
    fn input(g: Tensor<T>) -> Self {
        GradPair {
            input_grads: vec![g],
            param_grads: Vec::new(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.input_grads.iter().chain(&self.param_grads).all(Tensor::is_finite)
    }
}

fn check_upstream<T: Real>(grad: &Tensor<T>, expected: Shape, op: &str) -> Result<()> {
    grad.expect_shape(expected, &format!("{op} upstream gradient"))
}

pub fn conv1x1_grouped_backward<T: Real>(
    x: &Tensor<T>,
    kernels: &[Tensor<T>],
    pin: &ChannelPartition,
    pout: &ChannelPartition,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    pointwise_backward(x, kernels, &GroupLayout::grouped(pin, pout)?, grad_out)
}

/// Backward of [`crate::tensor::ops::pointwise_forward`]. Shared input
/// channels accumulate gradient from every group that reads them.
pub fn pointwise_backward<T: Real, K: Borrow<Tensor<T>> + Sync>(
    x: &Tensor<T>,
    kernels: &[K],
    layout: &GroupLayout,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    let s = x.shape();
    check_upstream(grad_out, s.with_c(layout.out_channels()), "pointwise")?;
    let cout = layout.out_channels();
    let pout = layout.outputs();

    // (group, position in that group's input list) for every input channel.
    let mut readers: Vec<Vec<(usize, usize)>> = vec![Vec::new(); s.c];
    for g in 0..layout.groups() {
        for (pos, &ic) in layout.inputs(g).iter().enumerate() {
            readers[ic].push((g, pos));
        }
    }

    let mut dx = Tensor::zeros(s);
    par::for_each_chunk(dx.data_mut(), s.plane(), |idx, dst| {
        let (n, ic) = (idx / s.c, idx % s.c);
        for &(g, pos) in &readers[ic] {
            let in_g = layout.inputs(g).len();
            let off = pout.offset(g);
            let k = kernels[g].borrow().data();
            for row in 0..pout.sizes()[g] {
                axpy(k[row * in_g + pos], grad_out.plane(n, off + row), dst);
            }
        }
    });

    let rows = output_rows(layout);
    let row_grads: Vec<Vec<T>> = par::map_indices(cout, |oc| {
        let (g, _) = rows[oc];
        layout
            .inputs(g)
            .iter()
            .map(|&ic| (0..s.n).map(|n| dot(grad_out.plane(n, oc), x.plane(n, ic))).sum())
            .collect()
    });
    let mut param_grads = Vec::with_capacity(layout.groups());
    for g in 0..layout.groups() {
        let off = pout.offset(g);
        let data: Vec<T> = (0..pout.sizes()[g]).flat_map(|r| row_grads[off + r].iter().copied()).collect();
        param_grads.push(Tensor::new(layout.kernel_shape(g), data)?);
    }
    Ok(GradPair {
        input_grads: vec![dx],
        param_grads,
    })
}

/// dst[iy, ix] += k[ky, kx] · dy[oy, ox] for every tap of the window.
#[allow(clippy::too_many_arguments)]
fn scatter_window<T: Real>(
    dy: &[T],
    ho: usize,
    wo: usize,
    kernel: &[T],
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dst: &mut [T],
    h: usize,
    w: usize,
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
                let src = &dy[oy * wo..(oy + 1) * wo];
                let drow = &mut dst[iy * w..(iy + 1) * w];
                if stride == 1 {
                    let ix0 = oxs.start + kx - pad;
                    axpy(wv, &src[oxs.clone()], &mut drow[ix0..ix0 + oxs.len()]);
                } else {
                    for ox in oxs.clone() {
                        drow[ox * stride + kx - pad] += wv * src[ox];
                    }
                }
            }
        }
    }
}

/// Σ dy[oy, ox] · x[oy·s + ky − pad, ox·s + kx − pad] for one tap.
#[allow(clippy::too_many_arguments)]
fn correlate_tap<T: Real>(
    x: &[T],
    h: usize,
    w: usize,
    dy: &[T],
    ho: usize,
    wo: usize,
    ky: usize,
    kx: usize,
    stride: usize,
    pad: usize,
) -> T {
    let oys = valid_range(ho, h, ky, stride, pad);
    let oxs = valid_range(wo, w, kx, stride, pad);
    let mut acc = T::zero();
    for oy in oys {
        let iy = oy * stride + ky - pad;
        let xrow = &x[iy * w..(iy + 1) * w];
        let grow = &dy[oy * wo..(oy + 1) * wo];
        if stride == 1 {
            let ix0 = oxs.start + kx - pad;
            acc += dot(&grow[oxs.clone()], &xrow[ix0..ix0 + oxs.len()]);
        } else {
            for ox in oxs.clone() {
                acc += grow[ox] * xrow[ox * stride + kx - pad];
            }
        }
    }
    acc
}

pub fn depthwise_conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
    if stride != 1 && stride != 2 {
        return Err(Error::UnsupportedStride(stride));
    }
    let s = x.shape();
    weights.expect_shape(Shape::new(s.c, 1, 3, 3), "depthwise weights")?;
    let ho = conv_out_len(s.h, 3, stride, 1)?;
    let wo = conv_out_len(s.w, 3, stride, 1)?;
    check_upstream(grad_out, Shape::new(s.n, s.c, ho, wo), "depthwise")?;

    let mut dx = Tensor::zeros(s);
    par::for_each_chunk(dx.data_mut(), s.plane(), |idx, dst| {
        let c = idx % s.c;
        let k = &weights.data()[c * 9..c * 9 + 9];
        scatter_window(grad_out.plane(idx / s.c, c), ho, wo, k, 3, 3, stride, 1, dst, s.h, s.w);
    });
    let mut dw = Tensor::zeros(weights.shape());
    par::for_each_chunk(dw.data_mut(), 9, |c, dst| {
        for (tap, d) in dst.iter_mut().enumerate() {
            *d = (0..s.n)
                .map(|n| correlate_tap(x.plane(n, c), s.h, s.w, grad_out.plane(n, c), ho, wo, tap / 3, tap % 3, stride, 1))
                .sum();
        }
    });
    Ok(GradPair {
        input_grads: vec![dx],
        param_grads: vec![dw],
    })
}

pub fn conv2d_dense_backward<T: Real>(
    x: &Tensor<T>,
    weights: &Tensor<T>,
    stride: usize,
    pad: usize,
    grad_out: &Tensor<T>,
) -> Result<GradPair<T>> {
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
    check_upstream(grad_out, Shape::new(s.n, ws.n, ho, wo), "conv2d")?;
    let ksize = ws.h * ws.w;

    let mut dx = Tensor::zeros(s);
    par::for_each_chunk(dx.data_mut(), s.plane(), |idx, dst| {
        let (n, ci) = (idx / s.c, idx % s.c);
        for co in 0..ws.n {
            let k = &weights.data()[(co * ws.c + ci) * ksize..(co * ws.c + ci + 1) * ksize];
            scatter_window(grad_out.plane(n, co), ho, wo, k, ws.h, ws.w, stride, pad, dst, s.h, s.w);
        }
    });
    let mut dw = Tensor::zeros(ws);
    par::for_each_chunk(dw.data_mut(), ws.c * ksize, |co, dst| {
        for (j, d) in dst.iter_mut().enumerate() {
            let (ci, tap) = (j / ksize, j % ksize);
            *d = (0..s.n)
                .map(|n| {
                    correlate_tap(x.plane(n, ci), s.h, s.w, grad_out.plane(n, co), ho, wo, tap / ws.w, tap % ws.w, stride, pad)
                })
                .sum();
        }
    });
    Ok(GradPair {
        input_grads: vec![dx],
        param_grads: vec![dw],
    })
}

/// Subgradient is 0 at both kinks.
pub fn relu6_backward<T: Real>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<GradPair<T>> {
    check_upstream(grad_out, x.shape(), "relu6")?;
    let six = T::lit(6.0);
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() && v < six { g } else { T::zero() })
        .collect();
    Ok(GradPair::input(Tensor::new(x.shape(), data)?))
}

/// Train-mode batch-norm backward including the mean and variance terms.
/// Parameter grads are `[d_gamma, d_beta]`, each shaped `(c, 1, 1, 1)`.
pub fn batchnorm_backward<T: Real>(saved: &BnSaved<T>, gamma: &[T], grad_out: &Tensor<T>) -> Result<GradPair<T>> {
    if saved.mode != BnMode::Train {
        return Err(Error::BatchNorm("backward requires a train-mode forward pass".into()));
    }
    let s = saved.xhat.shape();
    check_upstream(grad_out, s, "batchnorm")?;
    let xhat = &saved.xhat;
    let sums: Vec<(T, T)> = par::map_indices(s.c, |c| {
        let mut sum_dy = T::zero();
        let mut sum_dy_xhat = T::zero();
        for n in 0..s.n {
            let g = grad_out.plane(n, c);
            sum_dy += g.iter().copied().sum::<T>();
            sum_dy_xhat += dot(g, xhat.plane(n, c));
        }
        (sum_dy, sum_dy_xhat)
    });
    let m = T::lit((s.n * s.plane()) as f64);
    let mut dx = Tensor::zeros(s);
    par::for_each_chunk(dx.data_mut(), s.plane(), |idx, dst| {
        let (n, c) = (idx / s.c, idx % s.c);
        let (sum_dy, sum_dy_xhat) = sums[c];
        // dxhat = gamma·dy, so the gamma factor comes out of both sums.
        let scale = gamma[c] * saved.inv_std[c] / m;
        for ((d, &g), &xh) in dst.iter_mut().zip(grad_out.plane(n, c)).zip(xhat.plane(n, c)) {
            *d = scale * (m * g - sum_dy - xh * sum_dy_xhat);
        }
    });
    let pshape = Shape::new(s.c, 1, 1, 1);
    let dgamma = Tensor::new(pshape, sums.iter().map(|p| p.1).collect())?;
    let dbeta = Tensor::new(pshape, sums.iter().map(|p| p.0).collect())?;
    Ok(GradPair {
        input_grads: vec![dx],
        param_grads: vec![dgamma, dbeta],
    })
}

pub fn global_avgpool_backward<T: Real>(input_shape: Shape, grad_out: &Tensor<T>) -> Result<GradPair<T>> {
    check_upstream(grad_out, Shape::new(input_shape.n, input_shape.c, 1, 1), "avgpool")?;
    let inv = T::one() / T::lit(input_shape.plane() as f64);
    let mut dx = Tensor::zeros(input_shape);
    par::for_each_chunk(dx.data_mut(), input_shape.plane(), |idx, dst| {
        let v = grad_out.data()[idx] * inv;
        dst.iter_mut().for_each(|d| *d = v);
    });
    Ok(GradPair::input(dx))
}

/// The upstream gradient routed back through the inverse permutation.
pub fn channel_permute_backward<T: Real>(perm: &Permutation, grad_out: &Tensor<T>) -> Result<GradPair<T>> {
    let dx = crate::tensor::ops::channel_permute(grad_out, &perm.inverse())?;
    Ok(GradPair::input(dx))
}

/// Both summands receive the upstream gradient unchanged.
pub fn residual_add_backward<T: Real>(grad_out: &Tensor<T>) -> GradPair<T> {
    GradPair {
        input_grads: vec![grad_out.clone(), grad_out.clone()],
        param_grads: Vec::new(),
    }
}
