//! Whole classification networks: stem, block stages, head, pooling and
//! classifier.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::blocks::{build_block, BlockKind, BlockSpec, EVEN_RATIO};
use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Conv2d, Layer, LayerGraph, LayerKind, Param};
use crate::tensor::ops::BnMode;
use crate::tensor::{Real, Shape, Tensor};

pub(crate) mod weights;

pub use weights::{deserialize_weights, load_weights, read_weights, serialize_weights, write_weights, FORMAT_VERSION, MAGIC};

pub const STEM_CHANNELS: usize = 32;
pub const HEAD_CHANNELS: usize = 1280;

/// `(t, c, n, s)` rows of the uneven-block network at full depth.
pub const SEESAW_STAGES: [(usize, usize, usize, usize); 7] = [
    (1, 16, 1, 1),
    (6, 24, 4, 2),
    (6, 32, 6, 2),
    (6, 64, 8, 2),
    (6, 96, 6, 1),
    (6, 160, 6, 2),
    (6, 320, 1, 1),
];

/// Repeats of the five middle stages in the half-depth variant.
pub const HALF_DEPTH_REPEATS: [usize; 5] = [2, 3, 4, 3, 3];

/// Repeats of the dense baseline.
pub const MBV2_REPEATS: [usize; 7] = [1, 2, 3, 4, 3, 3, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Depth {
    Half,
    Full,
}

impl Depth {
    pub fn name(self) -> &'static str {
        match self {
            Depth::Half => "0.5D",
            Depth::Full => "1.0D",
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Depth {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "0.5D" | "0.5d" => Ok(Depth::Half),
            "1.0D" | "1.0d" | "1D" => Ok(Depth::Full),
            _ => Err(Error::InvalidModel(format!("unknown depth variant `{s}` (expected 0.5D or 1.0D)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputLayout {
    Imagenet224,
    Cifar32,
}

impl InputLayout {
    pub fn name(self) -> &'static str {
        match self {
            InputLayout::Imagenet224 => "imagenet_224",
            InputLayout::Cifar32 => "cifar_32",
        }
    }

    pub fn resolution(self) -> usize {
        match self {
            InputLayout::Imagenet224 => 224,
            InputLayout::Cifar32 => 32,
        }
    }
}

impl fmt::Display for InputLayout {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for InputLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imagenet_224" | "imagenet" => Ok(InputLayout::Imagenet224),
            "cifar_32" | "cifar" => Ok(InputLayout::Cifar32),
            _ => Err(Error::InvalidModel(format!("unknown input layout `{s}`"))),
        }
    }
}

/// One row of the stage table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StageSpec {
    pub kind: BlockKind,
    pub ratio: Vec<usize>,
    pub t: usize,
    pub c: usize,
    pub n: usize,
    pub s: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: BlockKind,
    pub depth: Depth,
    pub stages: Vec<StageSpec>,
    pub stem_channels: usize,
    pub head_channels: usize,
    pub num_classes: usize,
    pub width_multiplier: f64,
    pub input_layout: InputLayout,
    pub share_width: Option<usize>,
}

/// Stage table for `arch`. The uneven-group networks end in an even-group
/// block; the dense baseline uses its own repeats regardless of `depth`.
pub fn stage_table(arch: BlockKind, depth: Depth) -> Vec<StageSpec> {
    SEESAW_STAGES
        .iter()
        .enumerate()
        .map(|(i, &(t, c, n, s))| {
            let n = match (arch, depth) {
                (BlockKind::Mbv2, _) => MBV2_REPEATS[i],
                (_, Depth::Half) if (1..=5).contains(&i) => HALF_DEPTH_REPEATS[i - 1],
                _ => n,
            };
            let last = i == SEESAW_STAGES.len() - 1;
            let ratio = match arch {
                BlockKind::SeesawShuffle | BlockKind::SeesawShare if last => EVEN_RATIO.to_vec(),
                _ => arch.default_ratio(),
            };
            StageSpec {
                kind: arch,
                ratio,
                t,
                c,
                n,
                s,
            }
        })
        .collect()
}

impl ModelSpec {
    pub fn new(arch: BlockKind, depth: Depth, input_layout: InputLayout, num_classes: usize) -> Self {
        ModelSpec {
            arch,
            depth,
            stages: stage_table(arch, depth),
            stem_channels: STEM_CHANNELS,
            head_channels: HEAD_CHANNELS,
            num_classes,
            width_multiplier: 1.0,
            input_layout,
            share_width: None,
        }
    }

    pub fn with_width(mut self, multiplier: f64) -> Self {
        self.width_multiplier = multiplier;
        self
    }

    /// Every stage but the first (`t = 1`) gets expansion `t`.
    pub fn set_expansion(&self, t: usize) -> Result<Self> {
        if t == 0 {
            return Err(Error::InvalidModel("expansion ratio must be at least 1".into()));
        }
        let mut spec = self.clone();
        spec.stages.iter_mut().skip(1).for_each(|s| s.t = t);
        Ok(spec)
    }

    /// Scaled channel count: unchanged at multiplier 1, otherwise the nearest
    /// multiple of 3 (at least 3).
    pub fn scale_channels(&self, c: usize) -> usize {
        if self.width_multiplier == 1.0 {
            return c;
        }
        let scaled = c as f64 * self.width_multiplier / 3.0;
        (scaled.round() as usize).max(1) * 3
    }

    /// The head keeps its width when the network is narrowed.
    pub fn head_width(&self) -> usize {
        if self.width_multiplier > 1.0 {
            self.scale_channels(self.head_channels)
        } else {
            self.head_channels
        }
    }

    pub fn stem_stride(&self) -> usize {
        match self.input_layout {
            InputLayout::Imagenet224 => 2,
            InputLayout::Cifar32 => 1,
        }
    }

    /// Stage strides after the input adaptation: small inputs skip the stem
    /// downsampling and the first strided stage.
    pub fn stage_strides(&self) -> Vec<usize> {
        let mut strides: Vec<usize> = self.stages.iter().map(|s| s.s).collect();
        if self.input_layout == InputLayout::Cifar32 {
            if let Some(first) = strides.iter_mut().find(|s| **s == 2) {
                *first = 1;
            }
        }
        strides
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::InvalidModel("no stages".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidModel("num_classes must be positive".into()));
        }
        if !(self.width_multiplier.is_finite() && self.width_multiplier > 0.0) {
            return Err(Error::InvalidModel(format!(
                "width multiplier {} must be positive",
                self.width_multiplier
            )));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.t == 0 || s.c == 0 || s.n == 0 || !(s.s == 1 || s.s == 2) {
                return Err(Error::InvalidModel(format!("stage {}: invalid row {s:?}", i + 1)));
            }
        }
        Ok(())
    }

    /// Per-block specs in network order, with their layer names.
    pub fn block_specs(&self) -> Result<Vec<(String, BlockSpec)>> {
        self.validate()?;
        let strides = self.stage_strides();
        let mut k = self.scale_channels(self.stem_channels);
        let mut out = Vec::new();
        for (si, stage) in self.stages.iter().enumerate() {
            let c = self.scale_channels(stage.c);
            for r in 0..stage.n {
                let stride = if r == 0 { strides[si] } else { 1 };
                let mut spec = BlockSpec::new(stage.kind, k, stage.t, c, stride).with_ratio(&stage.ratio);
                spec.share_width = self.share_width;
                out.push((format!("stage{}.{}", si + 1, r), spec));
                k = c;
            }
        }
        Ok(out)
    }

    /// Canonical text form; equal strings mean identical architectures.
    pub fn canonical(&self) -> String {
        let stages: Vec<String> = self
            .stages
            .iter()
            .map(|s| {
                let ratio: Vec<String> = s.ratio.iter().map(usize::to_string).collect();
                format!("{}[{}]:{},{},{},{}", s.kind, ratio.join(":"), s.t, s.c, s.n, s.s)
            })
            .collect();
        format!(
            "arch={};depth={};stem={};head={};classes={};width={};layout={};share={};stages={}",
            self.arch,
            self.depth,
            self.stem_channels,
            self.head_channels,
            self.num_classes,
            self.width_multiplier,
            self.input_layout,
            self.share_width.map_or("default".to_string(), |w| w.to_string()),
            stages.join("/")
        )
    }

    /// 64-bit FNV-1a of [`ModelSpec::canonical`].
    pub fn hash(&self) -> u64 {
        self.canonical().bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
            (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
        })
    }
}

/// Where each named section of the network sits in the layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub layers: std::ops::Range<usize>,
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub spec: ModelSpec,
    pub graph: LayerGraph<T>,
    pub sections: Vec<Section>,
}

/// Builds the network with weights drawn from a generator seeded by `seed`.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<Model<T>> {
    let blocks = spec.block_specs()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layers: Vec<Layer<T>> = Vec::new();
    let mut sections = Vec::new();
    let mut mark = |name: &str, layers: &Vec<Layer<T>>, start: usize| {
        sections.push(Section {
            name: name.to_string(),
            layers: start..layers.len(),
        })
    };

    let stem = spec.scale_channels(spec.stem_channels);
    layers.push(Layer::Conv(Conv2d::new("stem", 3, stem, 3, spec.stem_stride(), 1, &mut rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new("stem.bn", stem)));
    layers.push(Layer::relu6());
    mark("stem", &layers, 0);

    for si in 0..spec.stages.len() {
        let start = layers.len();
        let prefix = format!("stage{}.", si + 1);
        for (name, bspec) in blocks.iter().filter(|(n, _)| n.starts_with(&prefix)) {
            layers.push(Layer::Block(build_block(name, bspec, &mut rng)?));
        }
        mark(&format!("stage{}", si + 1), &layers, start);
    }

    let last = blocks.last().map(|(_, b)| b.out_channels).expect("validated non-empty");
    let head = spec.head_width();
    let start = layers.len();
    layers.push(Layer::Conv(Conv2d::new("head", last, head, 1, 1, 0, &mut rng)));
    layers.push(Layer::BatchNorm(BatchNorm::new("head.bn", head)));
    layers.push(Layer::relu6());
    mark("head", &layers, start);
    let start = layers.len();
    layers.push(Layer::avgpool());
    mark("pool", &layers, start);
    let start = layers.len();
    layers.push(Layer::Conv(Conv2d::classifier("classifier", head, spec.num_classes, &mut rng)));
    mark("classifier", &layers, start);

    Ok(Model {
        spec: spec.clone(),
        graph: LayerGraph::new(layers),
        sections,
    })
}

impl<T: Real> Model<T> {
    pub fn input_shape(&self, batch: usize) -> Shape {
        let r = self.spec.input_layout.resolution();
        Shape::new(batch, 3, r, r)
    }

    /// Logits as `(n, classes, 1, 1)`.
    pub fn forward(&mut self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.graph.forward(x, mode)
    }

    pub fn backward(&mut self, dlogits: &Tensor<T>) -> Result<Tensor<T>> {
        self.graph.backward(dlogits)
    }

    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    pub fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        self.graph.visit_params(f)
    }

    pub fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        self.graph.visit_params_mut(f)
    }

    /// Output shape after each section, starting from `input`.
    pub fn section_shapes(&self, input: Shape) -> Result<Vec<(String, Shape)>> {
        let mut shape = input;
        let mut out = Vec::with_capacity(self.sections.len());
        for sec in &self.sections {
            for layer in &self.graph.layers[sec.layers.clone()] {
                shape = layer.output_shape(shape)?;
            }
            out.push((sec.name.clone(), shape));
        }
        Ok(out)
    }

    /// ReLU6 layers inside blocks (the stem and head activations excluded).
    pub fn block_relu6_count(&self) -> usize {
        self.graph.blocks().map(|b| b.body.count_kind(LayerKind::Relu6)).sum()
    }

    /// Names of blocks carrying an identity shortcut.
    pub fn shortcut_blocks(&self) -> Vec<String> {
        self.graph.blocks().filter(|b| b.shortcut).map(|b| b.name.clone()).collect()
    }

    /// Block ReLU6 count of each stage.
    pub fn stage_relu6_counts(&self) -> Vec<usize> {
        self.sections
            .iter()
            .filter(|s| s.name.starts_with("stage"))
            .map(|s| {
                self.graph.layers[s.layers.clone()]
                    .iter()
                    .map(|l| match l {
                        Layer::Block(b) => b.body.count_kind(LayerKind::Relu6),
                        _ => 0,
                    })
                    .sum()
            })
            .collect()
    }
}
