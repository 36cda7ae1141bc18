//! Inverted-bottleneck building blocks: the uneven-group shuffle and share
//! variants and the even-group and dense baselines.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::layers::{BatchNorm, Block, Depthwise, Layer, LayerGraph, Pointwise};
use crate::tensor::{ChannelPartition, GroupLayout, Permutation, Real};

mod connectivity;

pub use connectivity::{analyze_connectivity, ConnectivityMatrix};

/// Default uneven ratio: two groups, 1:2.
pub const SEESAW_RATIO: [usize; 2] = [1, 2];
pub const EVEN_RATIO: [usize; 2] = [1, 1];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BlockKind {
    SeesawShuffle,
    SeesawShare,
    Igcv3,
    Mbv2,
}

impl BlockKind {
    pub const ALL: [BlockKind; 4] = [
        BlockKind::SeesawShuffle,
        BlockKind::SeesawShare,
        BlockKind::Igcv3,
        BlockKind::Mbv2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BlockKind::SeesawShuffle => "seesaw-shuffle",
            BlockKind::SeesawShare => "seesaw-share",
            BlockKind::Igcv3 => "igcv3",
            BlockKind::Mbv2 => "mbv2",
        }
    }

    pub fn default_ratio(self) -> Vec<usize> {
        match self {
            BlockKind::SeesawShuffle | BlockKind::SeesawShare => SEESAW_RATIO.to_vec(),
            BlockKind::Igcv3 => EVEN_RATIO.to_vec(),
            BlockKind::Mbv2 => vec![1],
        }
    }
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BlockKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        BlockKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidBlock(format!("unknown block kind `{s}`")))
    }
}

/// Declarative description of one block: `k → t·k → k'` at stride `s`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockSpec {
    pub kind: BlockKind,
    pub in_channels: usize,
    pub expansion: usize,
    pub out_channels: usize,
    pub stride: usize,
    /// Group ratio used for every grouped 1×1 conv in the block.
    pub ratio: Vec<usize>,
    /// Channels shared across each group boundary (share blocks only);
    /// `None` picks the default.
    pub share_width: Option<usize>,
    /// Emit the channel permutes. Turning this off exists for connectivity
    /// experiments.
    pub permute: bool,
}

impl BlockSpec {
    pub fn new(kind: BlockKind, in_channels: usize, expansion: usize, out_channels: usize, stride: usize) -> Self {
        BlockSpec {
            kind,
            in_channels,
            expansion,
            out_channels,
            stride,
            ratio: kind.default_ratio(),
            share_width: None,
            permute: true,
        }
    }

    pub fn with_ratio(mut self, ratio: &[usize]) -> Self {
        self.ratio = ratio.to_vec();
        self
    }

    pub fn with_share_width(mut self, width: usize) -> Self {
        self.share_width = Some(width);
        self
    }

    pub fn without_permute(mut self) -> Self {
        self.permute = false;
        self
    }

    pub fn hidden_channels(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn has_shortcut(&self) -> bool {
        self.stride == 1 && self.in_channels == self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.expansion == 0 {
            return Err(Error::InvalidBlock(format!(
                "channels and expansion must be positive (k={}, t={}, k'={})",
                self.in_channels, self.expansion, self.out_channels
            )));
        }
        if self.stride != 1 && self.stride != 2 {
            return Err(Error::UnsupportedStride(self.stride));
        }
        if self.ratio.is_empty() {
            return Err(Error::InvalidBlock("empty group ratio".into()));
        }
        Ok(())
    }

    /// `(input, hidden, output)` partitions of the grouped convs.
    pub fn partitions(&self) -> Result<(ChannelPartition, ChannelPartition, ChannelPartition)> {
        let ratio: &[usize] = if self.kind == BlockKind::Mbv2 { &[1] } else { &self.ratio };
        Ok((
            make_partition(self.in_channels, ratio)?,
            make_partition(self.hidden_channels(), ratio)?,
            make_partition(self.out_channels, ratio)?,
        ))
    }

    /// Share width actually used by a share block.
    pub fn resolved_share_width(&self) -> Result<usize> {
        match self.share_width {
            Some(w) => Ok(w),
            None => {
                let (_, hidden, _) = self.partitions()?;
                Ok(default_share_width(&hidden))
            }
        }
    }
}

/// `ceil(min_group / 8)`, at least 1.
pub fn default_share_width(p: &ChannelPartition) -> usize {
    p.min_size().div_ceil(8).max(1)
}

/// Splits `channels` in proportion to `ratio` with largest-remainder
/// rounding; ties go to the earlier group.
pub fn make_partition(channels: usize, ratio: &[usize]) -> Result<ChannelPartition> {
    if ratio.is_empty() || ratio.contains(&0) {
        return Err(Error::InvalidPartition(format!("ratio {ratio:?} must be non-empty and positive")));
    }
    if channels < ratio.len() {
        return Err(Error::InvalidPartition(format!(
            "{channels} channels cannot form {} groups",
            ratio.len()
        )));
    }
    let total: usize = ratio.iter().sum();
    let mut sizes: Vec<usize> = ratio.iter().map(|r| channels * r / total).collect();
    let mut order: Vec<usize> = (0..ratio.len()).collect();
    // Remainders share the denominator `total`, so integers compare exactly.
    order.sort_by_key(|&i| std::cmp::Reverse(channels * ratio[i] % total));
    let short = channels - sizes.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        sizes[i] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidPartition(format!(
            "{channels} channels at ratio {ratio:?} leave an empty group ({sizes:?})"
        )));
    }
    ChannelPartition::new(sizes)
}

/// Permutation feeding the groups of `src` (the producer's output
/// partition) into the groups of `dst` (the consumer's input partition).
///
/// Destination group `d` takes `n[d][s]` channels from source group `s`, where
/// `n[d][s]` is `|d|·|s|/C` rounded up or down so that every row and column
/// sums exactly. Among such roundings one giving every destination at least
/// one channel from every source is chosen when it exists. Inside each
/// destination group the sources are interleaved round-robin by relative
/// position.
///
/// When `src` is even this is the ShuffleNet transpose (`[0, 2, 1, 3]` for two
/// groups of two): any run of `L` consecutive outputs then holds `⌊L/g⌋` or
/// `⌈L/g⌉` channels of each source group, whatever `dst` is.
pub fn make_seesaw_permutation(src: &ChannelPartition, dst: &ChannelPartition) -> Result<Permutation> {
    if src.total() != dst.total() {
        return Err(Error::InvalidPermutation(format!(
            "partitions cover {} and {} channels",
            src.total(),
            dst.total()
        )));
    }
    if src.is_even() {
        let (g, m) = (src.len(), src.sizes()[0]);
        return Permutation::new((0..src.total()).map(|i| (i % g) * m + i / g).collect());
    }
    let counts = quota_counts(src.sizes(), dst.sizes(), true)
        .or_else(|| quota_counts(src.sizes(), dst.sizes(), false))
        .expect("a quota rounding of a matrix with integer margins always exists");

    let mut taken = vec![0usize; src.len()];
    let mut map = Vec::with_capacity(src.total());
    for row in &counts {
        // (position numerator, denominator, source group, channel)
        let mut keyed: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(row.iter().sum());
        for (s, &n) in row.iter().enumerate() {
            for k in 0..n {
                keyed.push((k, n, s, src.offset(s) + taken[s] + k));
            }
            taken[s] += n;
        }
        keyed.sort_by(|a, b| (a.0 * b.1).cmp(&(b.0 * a.1)).then(a.2.cmp(&b.2)));
        map.extend(keyed.into_iter().map(|e| e.3));
    }
    Permutation::new(map)
}

/// Rounds the matrix `dst[d]·src[s]/C` to floor or ceil per entry with exact
/// row sums `dst` and column sums `src`. With `cover`, entries whose floor is
/// zero are forced to one; returns `None` when that is infeasible.
fn quota_counts(src: &[usize], dst: &[usize], cover: bool) -> Option<Vec<Vec<usize>>> {
    let c: usize = src.iter().sum();
    let mut base: Vec<Vec<usize>> = dst.iter().map(|&d| src.iter().map(|&s| d * s / c).collect()).collect();
    let mut free: Vec<Vec<bool>> = dst
        .iter()
        .map(|&d| src.iter().map(|&s| d * s % c != 0).collect())
        .collect();
    if cover {
        for (row, fr) in base.iter_mut().zip(&mut free) {
            for (v, f) in row.iter_mut().zip(fr.iter_mut()) {
                if *v == 0 {
                    *v = 1;
                    *f = false;
                }
            }
        }
    }
    let mut row_need = Vec::with_capacity(dst.len());
    for (row, &d) in base.iter().zip(dst) {
        row_need.push(d.checked_sub(row.iter().sum())?);
    }
    let mut col_left = Vec::with_capacity(src.len());
    for (s, &size) in src.iter().enumerate() {
        col_left.push(size.checked_sub(base.iter().map(|r| r[s]).sum())?);
    }

    // Bipartite b-matching of the leftover units over the free entries.
    let mut extra = vec![vec![false; src.len()]; dst.len()];
    for d in 0..dst.len() {
        for _ in 0..row_need[d] {
            let mut seen = vec![false; src.len()];
            if !augment(d, &free, &mut extra, &mut col_left, &mut seen) {
                return None;
            }
        }
    }
    for (row, ex) in base.iter_mut().zip(&extra) {
        for (v, &e) in row.iter_mut().zip(ex) {
            *v += usize::from(e);
        }
    }
    Some(base)
}

fn augment(d: usize, free: &[Vec<bool>], extra: &mut [Vec<bool>], col_left: &mut [usize], seen: &mut [bool]) -> bool {
    for s in 0..col_left.len() {
        if !free[d][s] || extra[d][s] || seen[s] {
            continue;
        }
        seen[s] = true;
        if col_left[s] > 0 {
            col_left[s] -= 1;
            extra[d][s] = true;
            return true;
        }
        for d2 in 0..extra.len() {
            if extra[d2][s] {
                extra[d2][s] = false;
                if augment(d2, free, extra, col_left, seen) {
                    extra[d][s] = true;
                    return true;
                }
                extra[d2][s] = true;
            }
        }
    }
    false
}

/// Builds the block described by `spec`, dispatching on its kind.
pub fn build_block<T: Real, R: Rng + ?Sized>(name: &str, spec: &BlockSpec, rng: &mut R) -> Result<Block<T>> {
    match spec.kind {
        BlockKind::SeesawShuffle => build_seesaw_shuffle_block(name, spec, rng),
        BlockKind::SeesawShare => build_seesaw_share_block(name, spec, rng),
        BlockKind::Igcv3 => build_igcv3_block(name, spec, rng),
        BlockKind::Mbv2 => build_mbv2_block(name, spec, rng),
    }
}

fn expect_kind(spec: &BlockSpec, kind: BlockKind) -> Result<()> {
    spec.validate()?;
    if spec.kind != kind {
        return Err(Error::InvalidBlock(format!("expected a {kind} spec, got {}", spec.kind)));
    }
    Ok(())
}

fn bn<T: Real>(name: &str, tag: &str, channels: usize) -> Layer<T> {
    Layer::BatchNorm(BatchNorm::new(format!("{name}.{tag}"), channels))
}

fn finish<T: Real>(name: &str, spec: &BlockSpec, layers: Vec<Layer<T>>) -> Block<T> {
    Block {
        name: name.to_string(),
        body: LayerGraph::new(layers),
        shortcut: spec.has_shortcut(),
    }
}

/// `[gconv, BN, permute, dw, BN, ReLU6, gconv, BN]`: uneven groups, a
/// single permute and no activation after the expansion.
pub fn build_seesaw_shuffle_block<T: Real, R: Rng + ?Sized>(name: &str, spec: &BlockSpec, rng: &mut R) -> Result<Block<T>> {
    expect_kind(spec, BlockKind::SeesawShuffle)?;
    let (pin, hidden, pout) = spec.partitions()?;
    let tk = spec.hidden_channels();
    let mut layers = vec![
        Layer::Pointwise(Pointwise::new(format!("{name}.expand"), GroupLayout::grouped(&pin, &hidden)?, rng)),
        bn(name, "bn1", tk),
    ];
    if spec.permute {
        layers.push(Layer::permute(make_seesaw_permutation(&hidden, &hidden)?));
    }
    layers.extend([
        Layer::Depthwise(Depthwise::new(format!("{name}.dw"), tk, spec.stride, rng)?),
        bn(name, "bn2", tk),
        Layer::relu6(),
        Layer::Pointwise(Pointwise::new(format!("{name}.project"), GroupLayout::grouped(&hidden, &pout)?, rng)),
        bn(name, "bn3", spec.out_channels),
    ]);
    Ok(finish(name, spec, layers))
}

/// Like the shuffle block without any permute; the projection's groups each
/// also read `share_width` leading channels of the next group (wrapping).
pub fn build_seesaw_share_block<T: Real, R: Rng + ?Sized>(name: &str, spec: &BlockSpec, rng: &mut R) -> Result<Block<T>> {
    expect_kind(spec, BlockKind::SeesawShare)?;
    let (pin, hidden, pout) = spec.partitions()?;
    let tk = spec.hidden_channels();
    let share = spec.resolved_share_width()?;
    let layers = vec![
        Layer::Pointwise(Pointwise::new(format!("{name}.expand"), GroupLayout::grouped(&pin, &hidden)?, rng)),
        bn(name, "bn1", tk),
        Layer::Depthwise(Depthwise::new(format!("{name}.dw"), tk, spec.stride, rng)?),
        bn(name, "bn2", tk),
        Layer::relu6(),
        Layer::Pointwise(Pointwise::new(
            format!("{name}.project"),
            GroupLayout::shared(&hidden, &pout, share)?,
            rng,
        )),
        bn(name, "bn3", spec.out_channels),
    ];
    Ok(finish(name, spec, layers))
}

/// Even-group baseline with a permute after each grouped conv.
pub fn build_igcv3_block<T: Real, R: Rng + ?Sized>(name: &str, spec: &BlockSpec, rng: &mut R) -> Result<Block<T>> {
    expect_kind(spec, BlockKind::Igcv3)?;
    let (pin, hidden, pout) = spec.partitions()?;
    let tk = spec.hidden_channels();
    let mut layers = vec![
        Layer::Pointwise(Pointwise::new(format!("{name}.expand"), GroupLayout::grouped(&pin, &hidden)?, rng)),
        bn(name, "bn1", tk),
    ];
    if spec.permute {
        layers.push(Layer::permute(make_seesaw_permutation(&hidden, &hidden)?));
    }
    layers.extend([
        Layer::Depthwise(Depthwise::new(format!("{name}.dw"), tk, spec.stride, rng)?),
        bn(name, "bn2", tk),
        Layer::relu6(),
        Layer::Pointwise(Pointwise::new(format!("{name}.project"), GroupLayout::grouped(&hidden, &pout)?, rng)),
        bn(name, "bn3", spec.out_channels),
    ]);
    if spec.permute {
        layers.push(Layer::permute(make_seesaw_permutation(&pout, &pout)?));
    }
    Ok(finish(name, spec, layers))
}

/// Dense inverted residual: `[1×1, BN, ReLU6, dw, BN, ReLU6, 1×1, BN]`.
pub fn build_mbv2_block<T: Real, R: Rng + ?Sized>(name: &str, spec: &BlockSpec, rng: &mut R) -> Result<Block<T>> {
    expect_kind(spec, BlockKind::Mbv2)?;
    let k = spec.in_channels;
    let tk = spec.hidden_channels();
    let layers = vec![
        Layer::Pointwise(Pointwise::new(format!("{name}.expand"), GroupLayout::dense(k, tk)?, rng)),
        bn(name, "bn1", tk),
        Layer::relu6(),
        Layer::Depthwise(Depthwise::new(format!("{name}.dw"), tk, spec.stride, rng)?),
        bn(name, "bn2", tk),
        Layer::relu6(),
        Layer::Pointwise(Pointwise::new(format!("{name}.project"), GroupLayout::dense(tk, spec.out_channels)?, rng)),
        bn(name, "bn3", spec.out_channels),
    ];
    Ok(finish(name, spec, layers))
}
