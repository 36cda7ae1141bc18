mod common;

use common::*;
use seesaw::autodiff::gradcheck::{
    block_check, check_scalar_fn, finite_difference_check, kink_free_input, GradCheckReport, Sampling,
};
use seesaw::autodiff::{self as ad};
use seesaw::blocks::build_block;
use seesaw::tensor::ops::{self, BatchNormState};
use seesaw::{
    build_model, BlockKind, BlockSpec, BnMode, ChannelPartition, Depth, GroupLayout, InputLayout, Layer, LayerGraph,
    ModelSpec, Permutation, Shape, Tensor,
};

const OP_TOL: f64 = 1e-6;

type Fwd<'a> = &'a dyn Fn(&[Tensor<f64>]) -> Tensor<f64>;
type Bwd<'a> = &'a dyn Fn(&[Tensor<f64>], &Tensor<f64>) -> Vec<Tensor<f64>>;

/// Checks `bwd` against central differences of `Σ r ⊙ fwd(inputs)`.
fn op_check(inputs: Vec<(&str, Tensor<f64>)>, fwd: Fwd<'_>, bwd: Bwd<'_>) -> GradCheckReport {
    let vals: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let y = fwd(&vals);
    let r = Tensor::<f64>::uniform(y.shape(), -1.0, 1.0, &mut rng(77));
    let analytic = bwd(&vals, &r);
    let named: Vec<(String, Tensor<f64>)> = inputs.into_iter().map(|(n, t)| (n.to_string(), t)).collect();
    let mut loss = |v: &[Tensor<f64>]| -> seesaw::Result<f64> {
        Ok(fwd(v).data().iter().zip(r.data()).map(|(a, b)| a * b).sum())
    };
    let none = vec![None; named.len()];
    check_scalar_fn(&mut loss, &named, &analytic, &none, OP_TOL).unwrap()
}

fn assert_pass(what: &str, r: &GradCheckReport) {
    assert!(r.passed(), "{what}: max rel err {:.3e} at {:?}", r.max_rel_err(), r.worst());
}

fn u(shape: Shape, seed: u64) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, &mut rng(seed))
}

fn pointwise_case(layout: GroupLayout, seed: u64) -> GradCheckReport {
    let x = u(Shape::new(2, layout.in_channels(), 3, 2), seed);
    let mut inputs = vec![("x", x)];
    for g in 0..layout.groups() {
        inputs.push(("kernel", u(layout.kernel_shape(g), seed + 1 + g as u64)));
    }
    let fwd = |v: &[Tensor<f64>]| ops::pointwise_forward(&v[0], &v[1..], &layout).unwrap();
    let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| {
        let gp = ad::pointwise_backward(&v[0], &v[1..], &layout, dy).unwrap();
        gp.input_grads.into_iter().chain(gp.param_grads).collect()
    };
    op_check(inputs, &fwd, &bwd)
}

#[test]
fn uneven_grouped_pointwise_gradients() {
    let pin = ChannelPartition::new(vec![1, 2]).unwrap();
    let pout = ChannelPartition::new(vec![2, 4]).unwrap();
    assert_pass("grouped [1,2]->[2,4]", &pointwise_case(GroupLayout::grouped(&pin, &pout).unwrap(), 1));
}

#[test]
fn shared_and_dense_pointwise_gradients() {
    let pin = ChannelPartition::new(vec![3, 4, 5]).unwrap();
    let pout = ChannelPartition::new(vec![2, 2, 3]).unwrap();
    assert_pass("shared", &pointwise_case(GroupLayout::shared(&pin, &pout, 2).unwrap(), 2));
    assert_pass("dense", &pointwise_case(GroupLayout::dense(4, 3).unwrap(), 3));
}

#[test]
fn depthwise_gradients() {
    for stride in [1, 2] {
        let x = u(Shape::new(2, 3, 5, 4), 10 + stride as u64);
        let k = u(Shape::new(3, 1, 3, 3), 20);
        let fwd = |v: &[Tensor<f64>]| ops::depthwise_conv3x3_forward(&v[0], &v[1], stride).unwrap();
        let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| {
            let gp = ad::depthwise_conv3x3_backward(&v[0], &v[1], stride, dy).unwrap();
            gp.input_grads.into_iter().chain(gp.param_grads).collect()
        };
        assert_pass(&format!("depthwise s{stride}"), &op_check(vec![("x", x), ("w", k)], &fwd, &bwd));
    }
}

#[test]
fn dense_conv_gradients() {
    for (k, stride, pad) in [(3, 2, 1), (3, 1, 1), (1, 1, 0)] {
        let x = u(Shape::new(2, 3, 5, 5), 30);
        let w = u(Shape::new(2, 3, k, k), 31);
        let fwd = |v: &[Tensor<f64>]| ops::conv2d_dense_forward(&v[0], &v[1], stride, pad).unwrap();
        let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| {
            let gp = ad::conv2d_dense_backward(&v[0], &v[1], stride, pad, dy).unwrap();
            gp.input_grads.into_iter().chain(gp.param_grads).collect()
        };
        assert_pass(&format!("conv k{k} s{stride}"), &op_check(vec![("x", x), ("w", w)], &fwd, &bwd));
    }
}

#[test]
fn relu6_gradients_away_from_kinks() {
    let x = kink_free_input(Shape::new(2, 3, 4, 4), 0.01, 5);
    let fwd = |v: &[Tensor<f64>]| ops::relu6(&v[0]);
    let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| ad::relu6_backward(&v[0], dy).unwrap().input_grads;
    assert_pass("relu6", &op_check(vec![("x", x)], &fwd, &bwd));
}

#[test]
fn relu6_subgradient_at_kinks_is_zero() {
    let x = Tensor::new(Shape::new(1, 4, 1, 1), vec![0.0, 6.0, 3.0, -1.0]).unwrap();
    let g = ad::relu6_backward(&x, &Tensor::full(x.shape(), 1.0)).unwrap();
    assert_eq!(g.input_grads[0].data(), &[0.0, 0.0, 1.0, 0.0]);
}

#[test]
fn batchnorm_train_gradients() {
    let x = Tensor::<f64>::uniform(Shape::new(3, 2, 3, 3), -2.0, 2.0, &mut rng(40));
    let gamma = Tensor::new(Shape::new(2, 1, 1, 1), vec![0.7, 1.3]).unwrap();
    let beta = Tensor::new(Shape::new(2, 1, 1, 1), vec![0.2, -0.4]).unwrap();
    let fwd = |v: &[Tensor<f64>]| {
        let mut st = BatchNormState::new(2);
        ops::batchnorm_forward(&v[0], v[1].data(), v[2].data(), &mut st, BnMode::Train).unwrap().0
    };
    let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| {
        let mut st = BatchNormState::new(2);
        let (_, saved) = ops::batchnorm_forward(&v[0], v[1].data(), v[2].data(), &mut st, BnMode::Train).unwrap();
        let gp = ad::batchnorm_backward(&saved, v[1].data(), dy).unwrap();
        let mut out = gp.input_grads;
        out.extend(gp.param_grads.into_iter().map(|g| g.reshape(Shape::new(2, 1, 1, 1)).unwrap()));
        out
    };
    assert_pass("batchnorm", &op_check(vec![("x", x), ("gamma", gamma), ("beta", beta)], &fwd, &bwd));
}

#[test]
fn pool_permute_and_add_gradients() {
    let x = u(Shape::new(2, 4, 3, 3), 50);
    let fwd = |v: &[Tensor<f64>]| ops::global_avgpool(&v[0]);
    let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| ad::global_avgpool_backward(v[0].shape(), dy).unwrap().input_grads;
    assert_pass("avgpool", &op_check(vec![("x", x.clone())], &fwd, &bwd));

    let p = Permutation::new(vec![2, 0, 3, 1]).unwrap();
    let fwd = |v: &[Tensor<f64>]| ops::channel_permute(&v[0], &p).unwrap();
    let bwd = |_: &[Tensor<f64>], dy: &Tensor<f64>| ad::channel_permute_backward(&p, dy).unwrap().input_grads;
    assert_pass("permute", &op_check(vec![("x", x.clone())], &fwd, &bwd));

    let fwd = |v: &[Tensor<f64>]| ops::residual_add(&v[0], &v[1]).unwrap();
    let bwd = |_: &[Tensor<f64>], dy: &Tensor<f64>| ad::residual_add_backward(dy).input_grads;
    assert_pass("add", &op_check(vec![("x", x), ("fx", u(Shape::new(2, 4, 3, 3), 51))], &fwd, &bwd));
}

#[test]
fn backward_of_linear_ops_is_additive() {
    let x = u(Shape::new(2, 6, 4, 4), 60);
    let (a, b) = (u(Shape::new(2, 6, 4, 4), 61), u(Shape::new(2, 6, 4, 4), 62));
    let sum = a.add(&b).unwrap();
    let close = |f: &dyn Fn(&Tensor<f64>) -> Vec<Tensor<f64>>| {
        let (ga, gb, gs) = (f(&a), f(&b), f(&sum));
        for ((ga, gb), gs) in ga.iter().zip(&gb).zip(&gs) {
            assert!(ga.add(gb).unwrap().max_abs_diff(gs) < 1e-12);
        }
    };
    let pin = ChannelPartition::new(vec![2, 4]).unwrap();
    let layout = GroupLayout::shared(&pin, &pin, 1).unwrap();
    let kernels: Vec<Tensor<f64>> = (0..2).map(|g| u(layout.kernel_shape(g), 63 + g as u64)).collect();
    close(&|dy| {
        let gp = ad::pointwise_backward(&x, &kernels, &layout, dy).unwrap();
        gp.input_grads.into_iter().chain(gp.param_grads).collect()
    });
    let dw = u(Shape::new(6, 1, 3, 3), 65);
    close(&|dy| {
        let gp = ad::depthwise_conv3x3_backward(&x, &dw, 1, dy).unwrap();
        gp.input_grads.into_iter().chain(gp.param_grads).collect()
    });
    let full = u(Shape::new(6, 6, 3, 3), 66);
    close(&|dy| {
        let gp = ad::conv2d_dense_backward(&x, &full, 1, 1, dy).unwrap();
        gp.input_grads.into_iter().chain(gp.param_grads).collect()
    });
    let p = Permutation::new(vec![5, 4, 3, 2, 1, 0]).unwrap();
    close(&|dy| ad::channel_permute_backward(&p, dy).unwrap().input_grads);
    close(&|dy| ad::residual_add_backward(dy).input_grads);
    let pooled = |t: &Tensor<f64>| ops::global_avgpool(t);
    let (pa, pb) = (pooled(&a), pooled(&b));
    let ps = pa.add(&pb).unwrap();
    let g = |dy: &Tensor<f64>| ad::global_avgpool_backward(x.shape(), dy).unwrap().input_grads.remove(0);
    assert!(g(&pa).add(&g(&pb)).unwrap().max_abs_diff(&g(&ps)) < 1e-12);
}

#[test]
fn group_param_grads_vanish_without_upstream() {
    let pin = ChannelPartition::new(vec![2, 3, 4]).unwrap();
    let pout = ChannelPartition::new(vec![3, 3, 2]).unwrap();
    let layout = GroupLayout::grouped(&pin, &pout).unwrap();
    let x = u(Shape::new(2, 9, 3, 3), 70);
    let kernels: Vec<Tensor<f64>> = (0..3).map(|g| u(layout.kernel_shape(g), 71 + g as u64)).collect();
    for silent in 0..3 {
        let mut dy = u(Shape::new(2, 8, 3, 3), 80);
        for n in 0..2 {
            for c in pout.range(silent) {
                dy.plane_mut(n, c).fill(0.0);
            }
        }
        let gp = ad::pointwise_backward(&x, &kernels, &layout, &dy).unwrap();
        for (g, grad) in gp.param_grads.iter().enumerate() {
            assert_eq!(grad.data().iter().all(|v| *v == 0.0), g == silent, "group {g}, silent {silent}");
        }
    }
}

#[test]
fn zeroed_projection_makes_block_an_identity() {
    for kind in BlockKind::ALL {
        let spec = BlockSpec::new(kind, 6, 3, 6, 1);
        let mut block = build_block::<f64, _>("b", &spec, &mut rng(3)).unwrap();
        assert!(block.shortcut);
        block.body.visit_params_mut(&mut |p| {
            if p.name.contains(".project.") {
                p.value.fill(0.0);
            }
        });
        let mut g = LayerGraph::new(vec![Layer::Block(block)]);
        let x = u(Shape::new(2, 6, 4, 4), 90);
        assert_eq!(g.forward(&x, BnMode::Train).unwrap(), x, "{kind}");
        let dy = u(x.shape(), 91);
        assert_eq!(g.backward(&dy).unwrap(), dy, "{kind}");
    }
}

#[test]
fn full_blocks_pass_end_to_end() {
    for kind in BlockKind::ALL {
        for seed in 0..3 {
            let spec = BlockSpec::new(kind, 6, 3, 6, 1);
            let r = block_check(&spec, seed, 1e-5).unwrap();
            assert_pass(&format!("{kind} seed {seed}"), &r);
        }
    }
}

#[test]
fn strided_and_widening_blocks_pass() {
    // Without a shortcut the input gradient is small after the final batch
    // norm and some entries sit near the finite-difference noise floor
    // (about 5e-10 absolute), hence the looser bound.
    for kind in [BlockKind::SeesawShuffle, BlockKind::SeesawShare] {
        let spec = BlockSpec::new(kind, 6, 3, 9, 2);
        let r = block_check(&spec, 0, 5e-5).unwrap();
        assert_pass(&format!("{kind} 6->9 s2"), &r);
    }
}

pub fn tiny_spec() -> ModelSpec {
    let mut spec = ModelSpec::new(BlockKind::SeesawShuffle, Depth::Half, InputLayout::Cifar32, 10).with_width(0.25);
    spec.head_channels = 24;
    spec
}

#[test]
fn tiny_model_sampled_parameters() {
    let model = build_model::<f64>(&tiny_spec(), 0).unwrap();
    let mut graph = model.graph.clone();
    let x = Tensor::<f64>::randn(Shape::new(2, 3, 32, 32), 1.0, &mut rng(1));
    let r = finite_difference_check(&mut graph, &x, 1e-4, Sampling::Params { count: 32, seed: 9 }).unwrap();
    assert_eq!(r.entries.iter().map(|e| e.checked).sum::<usize>(), 32);
    assert!(r.entries.iter().all(|e| e.name != "input"));
    assert_pass("tiny model", &r);
}

#[test]
fn wrong_gradient_is_caught() {
    // A broken backward (doubling) must fail the harness.
    let x = u(Shape::new(1, 3, 2, 2), 100);
    let fwd = |v: &[Tensor<f64>]| ops::global_avgpool(&v[0]);
    let bwd = |v: &[Tensor<f64>], dy: &Tensor<f64>| {
        vec![ad::global_avgpool_backward(v[0].shape(), dy).unwrap().input_grads[0].scale(2.0)]
    };
    assert!(!op_check(vec![("x", x)], &fwd, &bwd).passed());
}
