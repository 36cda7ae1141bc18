//! Reference implementations used as oracles by the integration tests.
//! Everything here is deliberately naive: plain index loops in `f64`, no
//! sharing with the library kernels.
#![allow(dead_code)]

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use seesaw::blocks::ConnectivityMatrix;
use seesaw::{BnMode, ChannelPartition, GroupLayout, LayerGraph, Real, Shape, Tensor};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn to_f64<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    t.data().iter().map(|v| v.to_f64().unwrap()).collect()
}

/// Dense `cout × cin` matrix holding each group's kernel at its channels and
/// zero elsewhere.
pub fn masked_dense<T: Real>(layout: &GroupLayout, kernels: &[Tensor<T>]) -> Vec<Vec<f64>> {
    let mut w = vec![vec![0.0; layout.in_channels()]; layout.out_channels()];
    let pout = layout.outputs();
    for g in 0..layout.groups() {
        let inputs = layout.inputs(g);
        let k = to_f64(&kernels[g]);
        for (r, oc) in pout.range(g).enumerate() {
            for (j, &ic) in inputs.iter().enumerate() {
                w[oc][ic] += k[r * inputs.len() + j];
            }
        }
    }
    w
}

/// `y[n, o, p] = Σ_i w[o][i] · x[n, i, p]`.
pub fn dense_pointwise<T: Real>(x: &Tensor<T>, w: &[Vec<f64>]) -> Vec<f64> {
    let s = x.shape();
    let xs = to_f64(x);
    let plane = s.plane();
    let cout = w.len();
    let mut y = vec![0.0; s.n * cout * plane];
    for n in 0..s.n {
        for (o, row) in w.iter().enumerate() {
            for p in 0..plane {
                let mut acc = 0.0;
                for (i, wi) in row.iter().enumerate() {
                    acc += wi * xs[(n * s.c + i) * plane + p];
                }
                y[(n * cout + o) * plane + p] = acc;
            }
        }
    }
    y
}

/// Direct convolution with zero padding; `groups == cin` gives depthwise.
pub fn naive_conv<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize, pad: usize, depthwise: bool) -> (Shape, Vec<f64>) {
    let s = x.shape();
    let ws = w.shape();
    let ho = (s.h + 2 * pad - ws.h) / stride + 1;
    let wo = (s.w + 2 * pad - ws.w) / stride + 1;
    let xs = to_f64(x);
    let wv = to_f64(w);
    let out = Shape::new(s.n, ws.n, ho, wo);
    let mut y = vec![0.0; out.numel()];
    for n in 0..s.n {
        for co in 0..ws.n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    let cins: Vec<usize> = if depthwise { vec![co] } else { (0..s.c).collect() };
                    for (ki, &ci) in cins.iter().enumerate() {
                        for ky in 0..ws.h {
                            for kx in 0..ws.w {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= s.h as isize || ix >= s.w as isize {
                                    continue;
                                }
                                let xv = xs[((n * s.c + ci) * s.h + iy as usize) * s.w + ix as usize];
                                let wi = if depthwise { 0 } else { ki };
                                acc += xv * wv[((co * ws.c + wi) * ws.h + ky) * ws.w + kx];
                            }
                        }
                    }
                    y[((n * ws.n + co) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, y)
}

pub fn naive_avgpool(x: &Tensor<f64>) -> Vec<f64> {
    let s = x.shape();
    (0..s.n * s.c)
        .map(|i| {
            let plane = &x.data()[i * s.plane()..(i + 1) * s.plane()];
            plane.iter().sum::<f64>() / s.plane() as f64
        })
        .collect()
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Output-by-input channel dependency found by perturbing one input channel
/// at a time and watching which output channels move. Batch-norm layers are
/// run with their running statistics so channels stay independent. Betas of
/// batch norms that feed a ReLU6 are set to 3 and weights are small, so every
/// activation stays in its linear range and cannot hide a dependency; final
/// batch norms get beta 0 so shortcuts do not pile up offsets. Gammas are 1
/// to keep the signal far above rounding after several blocks. Kernels are
/// deterministic, so an output that does not depend on the perturbed channel
/// is bit-identical; any difference counts.
pub fn jacobian_sparsity(graph: &LayerGraph<f64>, shape: Shape, seed: u64) -> ConnectivityMatrix {
    let mut g = graph.clone();
    g.visit_params_mut(&mut |p| {
        if p.name.ends_with(".bn3.beta") {
            p.value.fill(0.0);
        } else if p.name.ends_with(".beta") {
            p.value.fill(3.0);
        } else if p.name.ends_with(".gamma") {
            p.value.fill(1.0);
        } else {
            let scale = 0.05;
            let mut r = rng(seed ^ p.name.len() as u64);
            for v in p.value.data_mut() {
                *v = scale * r.gen_range(0.5..1.5) * if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            }
        }
    });
    let mut r = rng(seed);
    let x = Tensor::<f64>::uniform(shape, 0.5, 1.5, &mut r);
    let base = g.forward(&x, BnMode::Infer).unwrap();
    let os = base.shape();
    let mut m = ConnectivityMatrix::empty(os.c, shape.c);
    for c in 0..shape.c {
        let mut xp = x.clone();
        for n in 0..shape.n {
            for v in xp.plane_mut(n, c) {
                *v += r.gen_range(0.5..1.0);
            }
        }
        let y = g.forward(&xp, BnMode::Infer).unwrap();
        for o in 0..os.c {
            let moved = (0..os.n).any(|n| {
                y.plane(n, o)
                    .iter()
                    .zip(base.plane(n, o))
                    .any(|(a, b)| a != b)
            });
            m.set(o, c, moved);
        }
    }
    m
}

/// All ordered partitions of `total` into `groups` positive parts.
pub fn compositions(total: usize, groups: usize) -> Vec<Vec<usize>> {
    if groups == 1 {
        return if total >= 1 { vec![vec![total]] } else { vec![] };
    }
    let mut out = Vec::new();
    for first in 1..total {
        for mut rest in compositions(total - first, groups - 1) {
            rest.insert(0, first);
            out.push(rest);
        }
    }
    out
}

/// Weight count of a plain grouped 1×1 conv.
pub fn grouped_cost(pin: &[usize], pout: &[usize]) -> usize {
    pin.iter().zip(pout).map(|(a, b)| a * b).sum()
}

pub fn partition(sizes: &[usize]) -> ChannelPartition {
    ChannelPartition::new(sizes.to_vec()).unwrap()
}

/// Writes CIFAR-10 style binary files where the label is recoverable from the
/// image (a class-specific colour and stripe plus noise), so small models can
/// learn it.
pub fn write_cifar10_fixture(dir: &Path, per_file: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut r = rng(seed);
    let names = [
        "data_batch_1.bin",
        "data_batch_2.bin",
        "data_batch_3.bin",
        "data_batch_4.bin",
        "data_batch_5.bin",
        "test_batch.bin",
    ];
    for name in names {
        let mut bytes = Vec::with_capacity(per_file * 3073);
        for _ in 0..per_file {
            let label = r.gen_range(0..10u8);
            bytes.push(label);
            bytes.extend(synthetic_image(label, &mut r));
        }
        fs::write(dir.join(name), bytes).unwrap();
    }
}

pub fn synthetic_image<R: Rng>(label: u8, r: &mut R) -> Vec<u8> {
    let mut img = Vec::with_capacity(3072);
    for c in 0..3u32 {
        let base = 40 + 20 * ((u32::from(label) + c * 3) % 10);
        for y in 0..32u32 {
            for x in 0..32u32 {
                let stripe = if (x + y * u32::from(label % 3)) % (2 + u32::from(label)) == 0 { 50 } else { 0 };
                let noise = r.gen_range(0..30);
                img.push((base + stripe + noise).min(255) as u8);
            }
        }
    }
    img
}
