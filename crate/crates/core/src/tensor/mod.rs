//! Dense NCHW tensors and the channel bookkeeping types shared by every layer.

use std::fmt;
use std::iter::Sum;
use std::ops::{AddAssign, Range};

use num_traits::{Float, FromPrimitive};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

pub mod ops;

/// Element precision tag, also written into weight files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }
}

/// Scalar type a tensor can hold: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + Default + Send + Sync + fmt::Debug + fmt::Display + Sum + AddAssign + 'static
{
    const DTYPE: DType;
    const BYTES: usize;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal fits the float type")
    }

    fn write_le(self, out: &mut Vec<u8>);

    fn read_le(bytes: &[u8]) -> Self;
}

impl Real for f32 {
    const DTYPE: DType = DType::F32;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4 bytes"))
    }
}

impl Real for f64 {
    const DTYPE: DType = DType::F64;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("8 bytes"))
    }
}

/// Batch, channels, rows, cols.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(n: usize, c: usize, h: usize, w: usize) -> Self {
        Shape { n, c, h, w }
    }

    pub fn numel(&self) -> usize {
        self.n * self.c * self.h * self.w
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.n, self.c, self.h, self.w]
    }

    pub fn with_c(self, c: usize) -> Self {
        Shape { c, ..self }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {}, {})", self.n, self.c, self.h, self.w)
    }
}

/// Dense 4-D array in row-major `(n, c, h, w)` order.
#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Shape,
    data: Vec<T>,
}

impl<T: fmt::Debug> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("len", &self.data.len())
            .finish()
    }
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Shape, data: Vec<T>) -> Result<Self> {
        check_dims(shape)?;
        if data.len() != shape.numel() {
            return Err(Error::InvalidShape(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: Shape, value: T) -> Self {
        check_dims(shape).expect("tensor dimensions must be positive");
        Tensor {
            shape,
            data: vec![value; shape.numel()],
        }
    }

    /// Builds a tensor whose element at flat index `i` is `f(i)`.
    pub fn from_fn(shape: Shape, f: impl FnMut(usize) -> T) -> Self {
        check_dims(shape).expect("tensor dimensions must be positive");
        Tensor {
            shape,
            data: (0..shape.numel()).map(f).collect(),
        }
    }

    /// Zero-mean normal samples with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, std: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(rng);
            T::lit(z * std)
        })
    }

    /// Uniform samples in `[lo, hi)`.
    pub fn uniform<R: Rng + ?Sized>(shape: Shape, lo: f64, hi: f64, rng: &mut R) -> Self {
        Self::from_fn(shape, |_| T::lit(rng.gen_range(lo..hi)))
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn index(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.shape.n && c < self.shape.c && h < self.shape.h && w < self.shape.w);
        ((n * self.shape.c + c) * self.shape.h + h) * self.shape.w + w
    }

    pub fn at(&self, n: usize, c: usize, h: usize, w: usize) -> T {
        self.data[self.index(n, c, h, w)]
    }

    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, v: T) {
        let i = self.index(n, c, h, w);
        self.data[i] = v;
    }

    /// The `h × w` plane of sample `n`, channel `c`.
    pub fn plane(&self, n: usize, c: usize) -> &[T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &self.data[start..start + p]
    }

    pub fn plane_mut(&mut self, n: usize, c: usize) -> &mut [T] {
        let p = self.shape.plane();
        let start = (n * self.shape.c + c) * p;
        &mut self.data[start..start + p]
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, v: T) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Elementwise sum, shapes must agree.
    pub fn add(&self, other: &Self) -> Result<Self> {
        self.expect_shape(other.shape, "add")?;
        Ok(Tensor {
            shape: self.shape,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.expect_shape(other.shape, "add_assign")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or_else(U::nan))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().to_f64().unwrap_or(f64::INFINITY))
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn reshape(self, shape: Shape) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    pub(crate) fn expect_shape(&self, expected: Shape, context: &str) -> Result<()> {
        if self.shape != expected {
            return Err(Error::ShapeMismatch {
                context: context.to_string(),
                expected,
                actual: self.shape,
            });
        }
        Ok(())
    }
}

fn check_dims(shape: Shape) -> Result<()> {
    if shape.n == 0 || shape.c == 0 || shape.h == 0 || shape.w == 0 {
        return Err(Error::InvalidShape(format!(
            "all dimensions must be >= 1, got {shape}"
        )));
    }
    Ok(())
}

/// Ordered, positive group sizes over a channel axis. Groups are contiguous.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelPartition {
    sizes: Vec<usize>,
}

impl ChannelPartition {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        if sizes.is_empty() {
            return Err(Error::InvalidPartition("no groups".into()));
        }
        if let Some(g) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::InvalidPartition(format!("group {g} has size 0")));
        }
        Ok(ChannelPartition { sizes })
    }

    pub fn single(channels: usize) -> Result<Self> {
        Self::new(vec![channels])
    }

    /// `groups` equal groups; `channels` must divide evenly.
    pub fn even(channels: usize, groups: usize) -> Result<Self> {
        if groups == 0 || channels % groups != 0 {
            return Err(Error::InvalidPartition(format!(
                "{channels} channels do not split into {groups} equal groups"
            )));
        }
        Self::new(vec![channels / groups; groups])
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn len(&self) -> usize {
        self.sizes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sizes.is_empty()
    }

    pub fn total(&self) -> usize {
        self.sizes.iter().sum()
    }

    pub fn is_even(&self) -> bool {
        self.sizes.windows(2).all(|w| w[0] == w[1])
    }

    pub fn offset(&self, group: usize) -> usize {
        self.sizes[..group].iter().sum()
    }

    pub fn range(&self, group: usize) -> Range<usize> {
        let start = self.offset(group);
        start..start + self.sizes[group]
    }

    pub fn group_of(&self, channel: usize) -> Option<usize> {
        let mut end = 0;
        for (g, &s) in self.sizes.iter().enumerate() {
            end += s;
            if channel < end {
                return Some(g);
            }
        }
        None
    }

    pub fn min_size(&self) -> usize {
        self.sizes.iter().copied().min().unwrap_or(0)
    }
}

impl fmt::Display for ChannelPartition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.sizes.iter().map(|s| s.to_string()).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

/// Which input channels each group of a pointwise convolution reads, and how
/// many outputs it writes. Plain grouping reads disjoint contiguous slices;
/// sharing additionally reads the leading channels of the next group.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLayout {
    in_channels: usize,
    inputs: Vec<Vec<usize>>,
    outputs: ChannelPartition,
}

impl GroupLayout {
    pub fn grouped(pin: &ChannelPartition, pout: &ChannelPartition) -> Result<Self> {
        Self::shared(pin, pout, 0)
    }

    pub fn dense(cin: usize, cout: usize) -> Result<Self> {
        Self::grouped(&ChannelPartition::single(cin)?, &ChannelPartition::single(cout)?)
    }

    /// Group `g` reads its own slice of `pin` plus the first `share_width`
    /// channels of group `g + 1` (the last group wraps to group 0).
    pub fn shared(pin: &ChannelPartition, pout: &ChannelPartition, share_width: usize) -> Result<Self> {
        if pin.len() != pout.len() {
            return Err(Error::InvalidPartition(format!(
                "input partition has {} groups, output partition has {}",
                pin.len(),
                pout.len()
            )));
        }
        if share_width > 0 && share_width >= pin.min_size() {
            return Err(Error::InvalidPartition(format!(
                "share width {share_width} must be smaller than the smallest group ({})",
                pin.min_size()
            )));
        }
        let groups = pin.len();
        let inputs = (0..groups)
            .map(|g| {
                let mut idx: Vec<usize> = pin.range(g).collect();
                if share_width > 0 && groups > 1 {
                    let next = pin.range((g + 1) % groups);
                    idx.extend(next.take(share_width));
                }
                idx
            })
            .collect();
        Ok(GroupLayout {
            in_channels: pin.total(),
            inputs,
            outputs: pout.clone(),
        })
    }

    pub fn groups(&self) -> usize {
        self.inputs.len()
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.outputs.total()
    }

    pub fn inputs(&self, group: usize) -> &[usize] {
        &self.inputs[group]
    }

    pub fn outputs(&self) -> &ChannelPartition {
        &self.outputs
    }

    /// `(out_g, in_g)` kernel dims of group `g`.
    pub fn kernel_dims(&self, group: usize) -> (usize, usize) {
        (self.outputs.sizes()[group], self.inputs[group].len())
    }

    pub fn weight_count(&self) -> usize {
        (0..self.groups())
            .map(|g| {
                let (o, i) = self.kernel_dims(g);
                o * i
            })
            .sum()
    }

    pub fn kernel_shape(&self, group: usize) -> Shape {
        let (o, i) = self.kernel_dims(group);
        Shape::new(o, i, 1, 1)
    }
}

/// Channel reordering: output channel `i` takes input channel `map[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Permutation {
    map: Vec<usize>,
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let mut seen = vec![false; map.len()];
        for &m in &map {
            if m >= map.len() || seen[m] {
                return Err(Error::InvalidPermutation(format!(
                    "{map:?} is not a bijection on 0..{}",
                    map.len()
                )));
            }
            seen[m] = true;
        }
        Ok(Permutation { map })
    }

    pub fn identity(len: usize) -> Self {
        Permutation {
            map: (0..len).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    pub fn source(&self, out_channel: usize) -> usize {
        self.map[out_channel]
    }

    pub fn inverse(&self) -> Self {
        let mut inv = vec![0; self.map.len()];
        for (i, &m) in self.map.iter().enumerate() {
            inv[m] = i;
        }
        Permutation { map: inv }
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &m)| i == m)
    }
}
