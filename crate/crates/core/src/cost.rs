//! Analytic parameter and multiply-add counts.
//!
//! Multiply-adds are per image. Batch norm, activations, permutes, pooling and
//! residual adds count zero multiply-adds; batch norm contributes `2C`
//! parameters.

use std::fmt;
use std::io::Write;

use crate::error::Result;
use crate::layers::{Layer, LayerGraph};
use crate::model::Model;
use crate::tensor::{Real, Shape};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostRow {
    pub name: String,
    pub kind: &'static str,
    pub params: u64,
    pub multi_adds: u64,
    pub output: Shape,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
}

/// `(params, multi_adds, output shape)` of a single non-block layer, with
/// `input` taken at batch 1.
pub fn count_layer<T: Real>(layer: &Layer<T>, input: Shape) -> Result<(u64, u64, Shape)> {
    let out = layer.output_shape(input)?;
    let spatial = (out.h * out.w) as u64;
    let (params, ma) = match layer {
        Layer::Pointwise(l) => {
            let p = l.layout.weight_count() as u64;
            (p, p * spatial)
        }
        Layer::Depthwise(l) => {
            let p = l.channels() as u64 * 9;
            (p, p * spatial)
        }
        Layer::Conv(l) => {
            let w = l.weight.numel() as u64;
            let b = l.bias.as_ref().map_or(0, |b| b.numel() as u64);
            (w + b, w * spatial)
        }
        Layer::BatchNorm(l) => (2 * l.channels() as u64, 0),
        Layer::Relu6(_) | Layer::Permute(_) | Layer::AvgPool(_) => (0, 0),
        Layer::Block(b) => {
            let r = count_graph(&b.body, input, "")?;
            (r.total_params(), r.total_multi_adds())
        }
    };
    Ok((params, ma, out))
}

fn collect(graph: &LayerGraph<impl Real>, input: Shape, prefix: &str, rows: &mut Vec<CostRow>) -> Result<Shape> {
    let mut shape = input;
    for layer in &graph.layers {
        if let Layer::Block(b) = layer {
            let out = collect(&b.body, shape, &b.name, rows)?;
            if b.shortcut {
                rows.push(CostRow {
                    name: format!("{}.add", b.name),
                    kind: "add",
                    params: 0,
                    multi_adds: 0,
                    output: out,
                });
            }
            shape = out;
            continue;
        }
        let (params, multi_adds, out) = count_layer(layer, shape)?;
        let own = layer.name();
        let name = match layer {
            Layer::Relu6(_) | Layer::Permute(_) | Layer::AvgPool(_) if !prefix.is_empty() => format!("{prefix}.{own}"),
            _ => own,
        };
        rows.push(CostRow {
            name,
            kind: layer.kind().name(),
            params,
            multi_adds,
            output: out,
        });
        shape = out;
    }
    Ok(shape)
}

/// Per-layer rows for `graph` fed a batch-1 tensor of shape `input`.
pub fn count_graph<T: Real>(graph: &LayerGraph<T>, input: Shape, prefix: &str) -> Result<CostReport> {
    let mut rows = Vec::new();
    collect(graph, Shape::new(1, input.c, input.h, input.w), prefix, &mut rows)?;
    Ok(CostReport { rows })
}

/// Full report for `model` at a square input of side `resolution`.
pub fn count_model<T: Real>(model: &Model<T>, resolution: usize) -> Result<CostReport> {
    count_graph(&model.graph, Shape::new(1, 3, resolution, resolution), "")
}

/// `x` in millions with one decimal, e.g. `3.6M`.
pub fn millions(x: u64) -> String {
    format!("{:.1}M", x as f64 / 1e6)
}

impl CostReport {
    pub fn total_params(&self) -> u64 {
        self.rows.iter().map(|r| r.params).sum()
    }

    pub fn total_multi_adds(&self) -> u64 {
        self.rows.iter().map(|r| r.multi_adds).sum()
    }

    /// `params=…M multi_adds=…M`.
    pub fn summary(&self) -> String {
        format!(
            "params={} multi_adds={}",
            millions(self.total_params()),
            millions(self.total_multi_adds())
        )
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "layer,kind,params,multi_adds")?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.name, r.kind, r.params, r.multi_adds)?;
        }
        Ok(())
    }
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(5).max(5);
        writeln!(f, "{:<width$}  {:<9}  {:>12}  {:>14}  output", "layer", "kind", "params", "multi_adds")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<width$}  {:<9}  {:>12}  {:>14}  {}x{}x{}",
                r.name, r.kind, r.params, r.multi_adds, r.output.c, r.output.h, r.output.w
            )?;
        }
        writeln!(
            f,
            "{:<width$}  {:<9}  {:>12}  {:>14}",
            "total",
            "",
            self.total_params(),
            self.total_multi_adds()
        )
    }
}
