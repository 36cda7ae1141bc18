//! Structural channel dependencies of a layer graph.

use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{Layer, LayerGraph};
use crate::tensor::{GroupLayout, Permutation, Real};

/// Boolean `(out × in)` matrix; entry `(i, j)` is set when output channel `i`
/// structurally depends on input channel `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConnectivityMatrix {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl ConnectivityMatrix {
    pub fn empty(rows: usize, cols: usize) -> Self {
        ConnectivityMatrix {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::empty(n, n);
        (0..n).for_each(|i| m.set(i, i, true));
        m
    }

    pub fn full(rows: usize, cols: usize) -> Self {
        ConnectivityMatrix {
            rows,
            cols,
            bits: vec![true; rows * cols],
        }
    }

    pub fn from_layout(layout: &GroupLayout) -> Self {
        let mut m = Self::empty(layout.out_channels(), layout.in_channels());
        for g in 0..layout.groups() {
            for o in layout.outputs().range(g) {
                for &i in layout.inputs(g) {
                    m.set(o, i, true);
                }
            }
        }
        m
    }

    pub fn from_permutation(perm: &Permutation) -> Self {
        let mut m = Self::empty(perm.len(), perm.len());
        for (i, &src) in perm.as_slice().iter().enumerate() {
            m.set(i, src, true);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: bool) {
        self.bits[row * self.cols + col] = v;
    }

    /// Number of set entries.
    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_full(&self) -> bool {
        self.bits.iter().all(|&b| b)
    }

    /// `self ∘ inner`: dependencies of `self`'s outputs on `inner`'s inputs.
    pub fn compose(&self, inner: &ConnectivityMatrix) -> Result<ConnectivityMatrix> {
        if self.cols != inner.rows {
            return Err(Error::InvalidModel(format!(
                "cannot compose {}×{} after {}×{}",
                self.rows, self.cols, inner.rows, inner.cols
            )));
        }
        let mut out = Self::empty(self.rows, inner.cols);
        for i in 0..self.rows {
            for k in (0..self.cols).filter(|&k| self.get(i, k)) {
                for j in 0..inner.cols {
                    if inner.get(k, j) {
                        out.set(i, j, true);
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn union(&self, other: &ConnectivityMatrix) -> Result<ConnectivityMatrix> {
        if (self.rows, self.cols) != (other.rows, other.cols) {
            return Err(Error::InvalidModel("union of differently sized matrices".into()));
        }
        Ok(ConnectivityMatrix {
            rows: self.rows,
            cols: self.cols,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// `self ⊆ other` entrywise.
    pub fn is_subset_of(&self, other: &ConnectivityMatrix) -> bool {
        (self.rows, self.cols) == (other.rows, other.cols)
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }
}

impl fmt::Display for ConnectivityMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in 0..self.rows {
            let line: String = (0..self.cols).map(|j| if self.get(i, j) { '#' } else { '.' }).collect();
            writeln!(f, "{line}")?;
        }
        Ok(())
    }
}

fn layer_matrix<T: Real>(layer: &Layer<T>, channels: usize) -> Result<ConnectivityMatrix> {
    Ok(match layer {
        Layer::Pointwise(p) => ConnectivityMatrix::from_layout(&p.layout),
        Layer::Conv(c) => ConnectivityMatrix::full(c.out_channels(), c.in_channels()),
        Layer::Permute(p) => ConnectivityMatrix::from_permutation(&p.perm),
        Layer::Depthwise(_) | Layer::BatchNorm(_) | Layer::Relu6(_) | Layer::AvgPool(_) => {
            ConnectivityMatrix::identity(channels)
        }
        Layer::Block(b) => {
            let body = analyze_connectivity(&b.body, channels)?;
            if b.shortcut {
                body.union(&ConnectivityMatrix::identity(channels))?
            } else {
                body
            }
        }
    })
}

/// Composes per-layer dependency relations over `graph`, whose input has
/// `in_channels` channels.
pub fn analyze_connectivity<T: Real>(graph: &LayerGraph<T>, in_channels: usize) -> Result<ConnectivityMatrix> {
    let mut acc = ConnectivityMatrix::identity(in_channels);
    for layer in &graph.layers {
        let m = layer_matrix(layer, acc.rows())?;
        acc = m.compose(&acc)?;
    }
    Ok(acc)
}
