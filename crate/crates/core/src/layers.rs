//! Concrete layers with parameters, forward caches and backward rules, and
//! the [`LayerGraph`] that chains them.
//!
//! The network is a static feed-forward chain, so backward is a fixed reverse
//! sweep: every layer caches what it needs during a train-mode forward and
//! accumulates parameter gradients into its [`Param`]s when walked backwards.

use rand::Rng;

use crate::autodiff;
use crate::error::{Error, Result};
use crate::tensor::ops::{self, BatchNormState, BnMode, BnSaved};
use crate::tensor::{GroupLayout, Permutation, Real, Shape, Tensor};

/// Trainable tensor with its accumulated gradient.
#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    /// Logical dims written to weight files.
    pub dims: Vec<usize>,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
    /// Whether weight decay applies (convolution weights only).
    pub decay: bool,
}

impl<T: Real> Param<T> {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, value: Tensor<T>, decay: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param {
            name: name.into(),
            dims,
            value,
            grad,
            decay,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    pub fn numel(&self) -> usize {
        self.value.numel()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Pointwise,
    Depthwise,
    Conv,
    BatchNorm,
    Relu6,
    Permute,
    AvgPool,
    Block,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Pointwise => "pointwise",
            LayerKind::Depthwise => "depthwise",
            LayerKind::Conv => "conv",
            LayerKind::BatchNorm => "batchnorm",
            LayerKind::Relu6 => "relu6",
            LayerKind::Permute => "permute",
            LayerKind::AvgPool => "avgpool",
            LayerKind::Block => "block",
        }
    }
}

/// 1×1 convolution over a [`GroupLayout`]: dense, grouped (even or uneven)
/// or grouped with shared boundary channels.
#[derive(Debug, Clone)]
pub struct Pointwise<T> {
    pub name: String,
    pub layout: GroupLayout,
    pub kernels: Vec<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Pointwise<T> {
    /// Weights ~ N(0, 2 / fan_out) with fan_out = total output channels.
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, layout: GroupLayout, rng: &mut R) -> Self {
        let name = name.into();
        let std = (2.0 / layout.out_channels() as f64).sqrt();
        let kernels = (0..layout.groups())
            .map(|g| {
                let shape = layout.kernel_shape(g);
                let (o, i) = layout.kernel_dims(g);
                Param::new(format!("{name}.g{g}"), vec![o, i], Tensor::randn(shape, std, rng), true)
            })
            .collect();
        Pointwise {
            name,
            layout,
            kernels,
            input: None,
        }
    }

    fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let kernels: Vec<&Tensor<T>> = self.kernels.iter().map(|p| &p.value).collect();
        let y = ops::pointwise_forward(x, &kernels, &self.layout)?;
        self.input = (mode == BnMode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let kernels: Vec<&Tensor<T>> = self.kernels.iter().map(|p| &p.value).collect();
        let gp = autodiff::pointwise_backward(&x, &kernels, &self.layout, dy)?;
        for (p, g) in self.kernels.iter_mut().zip(&gp.param_grads) {
            p.grad.add_assign(g)?;
        }
        Ok(gp.input_grads.into_iter().next().expect("input grad"))
    }
}

fn missing_cache(name: &str) -> Error {
    Error::Training(format!("{name}: backward called without a train-mode forward"))
}

#[derive(Debug, Clone)]
pub struct Depthwise<T> {
    pub name: String,
    pub stride: usize,
    pub weight: Param<T>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Depthwise<T> {
    pub fn new<R: Rng + ?Sized>(name: impl Into<String>, channels: usize, stride: usize, rng: &mut R) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::UnsupportedStride(stride));
        }
        let name = name.into();
        let std = (2.0 / (channels * 9) as f64).sqrt();
        let weight = Param::new(
            format!("{name}.weight"),
            vec![channels, 1, 3, 3],
            Tensor::randn(Shape::new(channels, 1, 3, 3), std, rng),
            true,
        );
        Ok(Depthwise {
            name,
            stride,
            weight,
            input: None,
        })
    }

    pub fn channels(&self) -> usize {
        self.weight.value.shape().n
    }
}

/// Dense k×k convolution; with a bias it serves as the classifier.
#[derive(Debug, Clone)]
pub struct Conv2d<T> {
    pub name: String,
    pub stride: usize,
    pub pad: usize,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    input: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        name: impl Into<String>,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let name = name.into();
        let std = (2.0 / (cout * kernel * kernel) as f64).sqrt();
        let shape = Shape::new(cout, cin, kernel, kernel);
        Conv2d {
            weight: Param::new(format!("{name}.weight"), shape.dims().to_vec(), Tensor::randn(shape, std, rng), true),
            name,
            stride,
            pad,
            bias: None,
            input: None,
        }
    }

    /// 1×1 classifier: weights ~ N(0, 0.01²), zero bias.
    pub fn classifier<R: Rng + ?Sized>(name: impl Into<String>, cin: usize, classes: usize, rng: &mut R) -> Self {
        let name = name.into();
        let shape = Shape::new(classes, cin, 1, 1);
        Conv2d {
            weight: Param::new(format!("{name}.weight"), shape.dims().to_vec(), Tensor::randn(shape, 0.01, rng), true),
            bias: Some(Param::new(
                format!("{name}.bias"),
                vec![classes],
                Tensor::zeros(Shape::new(classes, 1, 1, 1)),
                false,
            )),
            name,
            stride: 1,
            pad: 0,
            input: None,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape().c
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape().n
    }

    pub fn kernel(&self) -> (usize, usize) {
        let s = self.weight.value.shape();
        (s.h, s.w)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel() == (1, 1) && self.stride == 1 && self.pad == 0
    }

    fn dense_layout(&self) -> Result<GroupLayout> {
        GroupLayout::dense(self.in_channels(), self.out_channels())
    }

    fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut y = if self.is_pointwise() {
            // Same arithmetic as the general kernel, with the faster loop order.
            ops::pointwise_forward(x, &[&self.weight.value], &self.dense_layout()?)?
        } else {
            ops::conv2d_dense_forward(x, &self.weight.value, self.stride, self.pad)?
        };
        if let Some(b) = &self.bias {
            let s = y.shape();
            let plane = s.plane();
            for (i, chunk) in y.data_mut().chunks_mut(plane).enumerate() {
                let bv = b.value.data()[i % s.c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        self.input = (mode == BnMode::Train).then(|| x.clone());
        Ok(y)
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.input.take().ok_or_else(|| missing_cache(&self.name))?;
        let gp = if self.is_pointwise() {
            autodiff::pointwise_backward(&x, &[&self.weight.value], &self.dense_layout()?, dy)?
        } else {
            autodiff::conv2d_dense_backward(&x, &self.weight.value, self.stride, self.pad, dy)?
        };
        self.weight.grad.add_assign(&gp.param_grads[0])?;
        if let Some(b) = &mut self.bias {
            let s = dy.shape();
            for (i, chunk) in dy.data().chunks(s.plane()).enumerate() {
                let c = i % s.c;
                b.grad.data_mut()[c] += chunk.iter().copied().sum::<T>();
            }
        }
        Ok(gp.input_grads.into_iter().next().expect("input grad"))
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm<T> {
    pub name: String,
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub state: BatchNormState<T>,
    saved: Option<BnSaved<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(name: impl Into<String>, channels: usize) -> Self {
        let name = name.into();
        let shape = Shape::new(channels, 1, 1, 1);
        BatchNorm {
            gamma: Param::new(format!("{name}.gamma"), vec![channels], Tensor::full(shape, T::one()), false),
            beta: Param::new(format!("{name}.beta"), vec![channels], Tensor::zeros(shape), false),
            state: BatchNormState::new(channels),
            name,
            saved: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.state.running_mean.len()
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu6<T> {
    input: Option<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct Permute {
    pub perm: Permutation,
}

#[derive(Debug, Clone, Default)]
pub struct AvgPool {
    input_shape: Option<Shape>,
}

/// A building block: a body of layers plus an optional identity shortcut
/// (`y = x + body(x)`). The shortcut holds no parameters.
#[derive(Debug, Clone)]
pub struct Block<T> {
    pub name: String,
    pub body: LayerGraph<T>,
    pub shortcut: bool,
}

impl<T: Real> Block<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let fx = self.body.forward(x, mode)?;
        if self.shortcut {
            ops::residual_add(x, &fx)
        } else {
            Ok(fx)
        }
    }

    fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let body_grad = self.body.backward(dy)?;
        if self.shortcut {
            let mut gp = autodiff::residual_add_backward(dy);
            let mut shortcut = gp.input_grads.swap_remove(0);
            shortcut.add_assign(&body_grad)?;
            Ok(shortcut)
        } else {
            Ok(body_grad)
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T> {
    Pointwise(Pointwise<T>),
    Depthwise(Depthwise<T>),
    Conv(Conv2d<T>),
    BatchNorm(BatchNorm<T>),
    Relu6(Relu6<T>),
    Permute(Permute),
    AvgPool(AvgPool),
    Block(Block<T>),
}

impl<T: Real> Layer<T> {
    pub fn relu6() -> Self {
        Layer::Relu6(Relu6 { input: None })
    }

    pub fn permute(perm: Permutation) -> Self {
        Layer::Permute(Permute { perm })
    }

    pub fn avgpool() -> Self {
        Layer::AvgPool(AvgPool { input_shape: None })
    }

    pub fn kind(&self) -> LayerKind {
        match self {
            Layer::Pointwise(_) => LayerKind::Pointwise,
            Layer::Depthwise(_) => LayerKind::Depthwise,
            Layer::Conv(_) => LayerKind::Conv,
            Layer::BatchNorm(_) => LayerKind::BatchNorm,
            Layer::Relu6(_) => LayerKind::Relu6,
            Layer::Permute(_) => LayerKind::Permute,
            Layer::AvgPool(_) => LayerKind::AvgPool,
            Layer::Block(_) => LayerKind::Block,
        }
    }

    pub fn name(&self) -> String {
        match self {
            Layer::Pointwise(l) => l.name.clone(),
            Layer::Depthwise(l) => l.name.clone(),
            Layer::Conv(l) => l.name.clone(),
            Layer::BatchNorm(l) => l.name.clone(),
            Layer::Relu6(_) => "relu6".into(),
            Layer::Permute(_) => "permute".into(),
            Layer::AvgPool(_) => "avgpool".into(),
            Layer::Block(b) => b.name.clone(),
        }
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        let mismatch = |expected_c: usize| Error::ShapeMismatch {
            context: self.name(),
            expected: input.with_c(expected_c),
            actual: input,
        };
        match self {
            Layer::Pointwise(l) => {
                if input.c != l.layout.in_channels() {
                    return Err(mismatch(l.layout.in_channels()));
                }
                Ok(input.with_c(l.layout.out_channels()))
            }
            Layer::Depthwise(l) => {
                if input.c != l.channels() {
                    return Err(mismatch(l.channels()));
                }
                Ok(Shape::new(
                    input.n,
                    input.c,
                    ops::conv_out_len(input.h, 3, l.stride, 1)?,
                    ops::conv_out_len(input.w, 3, l.stride, 1)?,
                ))
            }
            Layer::Conv(l) => {
                if input.c != l.in_channels() {
                    return Err(mismatch(l.in_channels()));
                }
                let (kh, kw) = l.kernel();
                Ok(Shape::new(
                    input.n,
                    l.out_channels(),
                    ops::conv_out_len(input.h, kh, l.stride, l.pad)?,
                    ops::conv_out_len(input.w, kw, l.stride, l.pad)?,
                ))
            }
            Layer::BatchNorm(l) => {
                if input.c != l.channels() {
                    return Err(mismatch(l.channels()));
                }
                Ok(input)
            }
            Layer::Relu6(_) => Ok(input),
            Layer::Permute(p) => {
                if input.c != p.perm.len() {
                    return Err(mismatch(p.perm.len()));
                }
                Ok(input)
            }
            Layer::AvgPool(_) => Ok(Shape::new(input.n, input.c, 1, 1)),
            Layer::Block(b) => {
                let out = b.body.output_shape(input)?;
                if b.shortcut && out != input {
                    return Err(Error::ShapeMismatch {
                        context: format!("{} shortcut", b.name),
                        expected: input,
                        actual: out,
                    });
                }
                Ok(out)
            }
        }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        match self {
            Layer::Pointwise(l) => l.forward(x, mode),
            Layer::Depthwise(l) => {
                let y = ops::depthwise_conv3x3_forward(x, &l.weight.value, l.stride)?;
                l.input = (mode == BnMode::Train).then(|| x.clone());
                Ok(y)
            }
            Layer::Conv(l) => l.forward(x, mode),
            Layer::BatchNorm(l) => {
                let (y, saved) = ops::batchnorm_forward(x, l.gamma.value.data(), l.beta.value.data(), &mut l.state, mode)?;
                l.saved = (mode == BnMode::Train).then_some(saved);
                Ok(y)
            }
            Layer::Relu6(l) => {
                l.input = (mode == BnMode::Train).then(|| x.clone());
                Ok(ops::relu6(x))
            }
            Layer::Permute(p) => ops::channel_permute(x, &p.perm),
            Layer::AvgPool(l) => {
                l.input_shape = Some(x.shape());
                Ok(ops::global_avgpool(x))
            }
            Layer::Block(b) => b.forward(x, mode),
        }
    }

    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Layer::Pointwise(l) => l.backward(dy),
            Layer::Depthwise(l) => {
                let x = l.input.take().ok_or_else(|| missing_cache(&l.name))?;
                let gp = autodiff::depthwise_conv3x3_backward(&x, &l.weight.value, l.stride, dy)?;
                l.weight.grad.add_assign(&gp.param_grads[0])?;
                Ok(gp.input_grads.into_iter().next().expect("input grad"))
            }
            Layer::Conv(l) => l.backward(dy),
            Layer::BatchNorm(l) => {
                let saved = l.saved.take().ok_or_else(|| {
                    Error::BatchNorm(format!("{}: backward requires a train-mode forward pass", l.name))
                })?;
                let gp = autodiff::batchnorm_backward(&saved, l.gamma.value.data(), dy)?;
                l.gamma.grad.add_assign(&gp.param_grads[0])?;
                l.beta.grad.add_assign(&gp.param_grads[1])?;
                Ok(gp.input_grads.into_iter().next().expect("input grad"))
            }
            Layer::Relu6(l) => {
                let x = l.input.take().ok_or_else(|| missing_cache("relu6"))?;
                Ok(autodiff::relu6_backward(&x, dy)?.input_grads.remove(0))
            }
            Layer::Permute(p) => Ok(autodiff::channel_permute_backward(&p.perm, dy)?.input_grads.remove(0)),
            Layer::AvgPool(l) => {
                let shape = l.input_shape.ok_or_else(|| missing_cache("avgpool"))?;
                Ok(autodiff::global_avgpool_backward(shape, dy)?.input_grads.remove(0))
            }
            Layer::Block(b) => b.backward(dy),
        }
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        match self {
            Layer::Pointwise(l) => l.kernels.iter().for_each(&mut *f),
            Layer::Depthwise(l) => f(&l.weight),
            Layer::Conv(l) => {
                f(&l.weight);
                if let Some(b) = &l.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(l) => {
                f(&l.gamma);
                f(&l.beta);
            }
            Layer::Block(b) => b.body.visit_params(f),
            Layer::Relu6(_) | Layer::Permute(_) | Layer::AvgPool(_) => {}
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        match self {
            Layer::Pointwise(l) => l.kernels.iter_mut().for_each(&mut *f),
            Layer::Depthwise(l) => f(&mut l.weight),
            Layer::Conv(l) => {
                f(&mut l.weight);
                if let Some(b) = &mut l.bias {
                    f(b);
                }
            }
            Layer::BatchNorm(l) => {
                f(&mut l.gamma);
                f(&mut l.beta);
            }
            Layer::Block(b) => b.body.visit_params_mut(f),
            Layer::Relu6(_) | Layer::Permute(_) | Layer::AvgPool(_) => {}
        }
    }

    /// Non-trainable state (batch-norm running statistics).
    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        match self {
            Layer::BatchNorm(l) => {
                f(&format!("{}.running_mean", l.name), &mut l.state.running_mean);
                f(&format!("{}.running_var", l.name), &mut l.state.running_var);
            }
            Layer::Block(b) => b.body.visit_buffers_mut(f),
            _ => {}
        }
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        match self {
            Layer::BatchNorm(l) => {
                f(&format!("{}.running_mean", l.name), &l.state.running_mean);
                f(&format!("{}.running_var", l.name), &l.state.running_var);
            }
            Layer::Block(b) => b.body.visit_buffers(f),
            _ => {}
        }
    }
}

/// A compiled chain of layers.
#[derive(Debug, Clone, Default)]
pub struct LayerGraph<T> {
    pub layers: Vec<Layer<T>>,
}

impl<T: Real> LayerGraph<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        LayerGraph { layers }
    }

    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = layer.forward(&cur, mode)?;
        }
        Ok(cur)
    }

    /// Reverse sweep; returns the gradient with respect to the graph input
    /// and accumulates parameter gradients.
    pub fn backward(&mut self, dy: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = layer.backward(&g)?;
        }
        Ok(g)
    }

    pub fn output_shape(&self, input: Shape) -> Result<Shape> {
        self.layers.iter().try_fold(input, |s, l| l.output_shape(s))
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.layers.iter().for_each(|l| l.visit_params(f));
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.layers.iter_mut().for_each(|l| l.visit_params_mut(f));
    }

    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &[T])) {
        self.layers.iter().for_each(|l| l.visit_buffers(f));
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut [T])) {
        self.layers.iter_mut().for_each(|l| l.visit_buffers_mut(f));
    }

    pub fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.numel());
        n
    }

    /// Layers of `kind` at any nesting depth.
    pub fn count_kind(&self, kind: LayerKind) -> usize {
        self.layers
            .iter()
            .map(|l| {
                let own = usize::from(l.kind() == kind);
                match l {
                    Layer::Block(b) => own + b.body.count_kind(kind),
                    _ => own,
                }
            })
            .sum()
    }

    /// Which side of the ReLU6 kinks each cached input lies on
    /// (0 below zero, 1 inside, 2 above six), in graph order.
    pub fn relu6_regions(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.collect_regions(&mut out);
        out
    }

    fn collect_regions(&self, out: &mut Vec<u8>) {
        let (zero, six) = (T::zero(), T::lit(6.0));
        for l in &self.layers {
            match l {
                Layer::Relu6(Relu6 { input: Some(x) }) => {
                    out.extend(x.data().iter().map(|&v| u8::from(v > zero) + u8::from(v > six)));
                }
                Layer::Block(b) => b.body.collect_regions(out),
                _ => {}
            }
        }
    }

    pub fn blocks(&self) -> impl Iterator<Item = &Block<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            _ => None,
        })
    }

    pub fn blocks_mut(&mut self) -> impl Iterator<Item = &mut Block<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Block(b) => Some(b),
            _ => None,
        })
    }
}

impl<T: Real> From<Block<T>> for LayerGraph<T> {
    fn from(b: Block<T>) -> Self {
        LayerGraph::new(vec![Layer::Block(b)])
    }
}
