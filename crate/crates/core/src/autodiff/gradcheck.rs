//! Central finite-difference verification of analytic gradients.
//!
//! Everything here runs in `f64`; single precision cannot resolve the
//! differences at the step sizes used.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use rand::Rng;

use crate::blocks::{build_block, BlockKind, BlockSpec};
use crate::error::Result;
use crate::layers::LayerGraph;
use crate::tensor::ops::BnMode;
use crate::tensor::{Shape, Tensor};

pub const FD_STEP: f64 = 1e-5;

/// `|a − f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Worst relative error over the checked elements of one tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckEntry {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheckEntry>,
    pub tolerance: f64,
    /// Elements left out because a step crossed a ReLU6 kink.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.entries.iter().map(|e| e.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_err() < self.tolerance
    }

    pub fn worst(&self) -> Option<&GradCheckEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Which elements of each tensor to perturb.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sampling {
    All,
    /// A fixed-seed random subset of `count` elements across all parameters.
    Params { count: usize, seed: u64 },
}

/// Checks `analytic[k]` against central differences of `loss` with respect to
/// `inputs[k]`, element by element. `indices[k]` limits the check to the given
/// flat indices (all elements when `None`).
pub fn check_scalar_fn(
    loss: &mut dyn FnMut(&[Tensor<f64>]) -> Result<f64>,
    inputs: &[(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    indices: &[Option<Vec<usize>>],
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut candidates = Vec::new();
    for (k, (_, tensor)) in inputs.iter().enumerate() {
        match indices.get(k).and_then(|i| i.as_ref()) {
            Some(v) => candidates.extend(v.iter().map(|&j| (k, j))),
            None => candidates.extend((0..tensor.numel()).map(|j| (k, j))),
        }
    }
    let mut probe = |v: &[Tensor<f64>]| loss(v).map(Some);
    check_candidates(&mut probe, inputs, analytic, &candidates, None, tolerance)
}

/// Core loop. `probe` returns `None` when the perturbed point is not
/// comparable with the base point (a kink was crossed); such elements are
/// skipped. With a `quota`, checking stops after that many valid elements.
fn check_candidates(
    probe: &mut dyn FnMut(&[Tensor<f64>]) -> Result<Option<f64>>,
    inputs: &[(String, Tensor<f64>)],
    analytic: &[Tensor<f64>],
    candidates: &[(usize, usize)],
    quota: Option<usize>,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let mut values: Vec<Tensor<f64>> = inputs.iter().map(|(_, t)| t.clone()).collect();
    let mut entries: Vec<Option<GradCheckEntry>> = vec![None; inputs.len()];
    let mut skipped = 0;
    let mut checked = 0;
    for &(k, j) in candidates {
        if quota.is_some_and(|q| checked >= q) {
            break;
        }
        let orig = values[k].data()[j];
        values[k].data_mut()[j] = orig + FD_STEP;
        let plus = probe(&values)?;
        values[k].data_mut()[j] = orig - FD_STEP;
        let minus = probe(&values)?;
        values[k].data_mut()[j] = orig;
        let (Some(plus), Some(minus)) = (plus, minus) else {
            skipped += 1;
            continue;
        };
        checked += 1;
        let numeric = (plus - minus) / (2.0 * FD_STEP);
        let a = analytic[k].data()[j];
        let err = relative_error(a, numeric);
        let entry = entries[k].get_or_insert_with(|| GradCheckEntry {
            name: inputs[k].0.clone(),
            checked: 0,
            max_rel_err: -1.0,
            worst_index: j,
            analytic: a,
            numeric,
        });
        entry.checked += 1;
        if err > entry.max_rel_err {
            entry.max_rel_err = err;
            entry.worst_index = j;
            entry.analytic = a;
            entry.numeric = numeric;
        }
    }
    Ok(GradCheckReport {
        entries: entries.into_iter().flatten().collect(),
        tolerance,
        skipped,
    })
}

/// Finite-difference check of a layer graph in train mode. The scalar loss is
/// `Σ r ⊙ graph(x)` for a fixed random `r`, so every output element
/// contributes. Elements whose perturbation moves any ReLU6 input across a
/// kink are skipped and counted in [`GradCheckReport::skipped`]; sampled
/// checks draw replacements for them. Parameters are restored afterwards.
pub fn finite_difference_check(
    graph: &mut LayerGraph<f64>,
    input: &Tensor<f64>,
    tolerance: f64,
    sampling: Sampling,
) -> Result<GradCheckReport> {
    let out_shape = graph.output_shape(input.shape())?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let proj = Tensor::<f64>::uniform(out_shape, -1.0, 1.0, &mut rng);

    graph.zero_grad();
    let y = graph.forward(input, BnMode::Train)?;
    debug_assert_eq!(y.shape(), out_shape);
    let regions = graph.relu6_regions();
    let dx = graph.backward(&proj)?;

    let mut inputs = vec![("input".to_string(), input.clone())];
    let mut analytic = vec![dx];
    graph.visit_params(&mut |p| {
        inputs.push((p.name.clone(), p.value.clone()));
        analytic.push(p.grad.clone());
    });
    let (candidates, quota) = candidates(&inputs, sampling);

    let mut probe = |vals: &[Tensor<f64>]| -> Result<Option<f64>> {
        let mut k = 1;
        graph.visit_params_mut(&mut |p| {
            p.value.data_mut().copy_from_slice(vals[k].data());
            k += 1;
        });
        let y = graph.forward(&vals[0], BnMode::Train)?;
        Ok((graph.relu6_regions() == regions).then(|| weighted_sum(&y, &proj)))
    };
    let report = check_candidates(&mut probe, &inputs, &analytic, &candidates, quota, tolerance);
    let mut k = 1;
    graph.visit_params_mut(&mut |p| {
        p.value.data_mut().copy_from_slice(inputs[k].1.data());
        k += 1;
    });
    report
}

/// Elements to perturb, in order, and how many valid ones are wanted.
fn candidates(inputs: &[(String, Tensor<f64>)], sampling: Sampling) -> (Vec<(usize, usize)>, Option<usize>) {
    match sampling {
        Sampling::All => {
            let all = inputs
                .iter()
                .enumerate()
                .flat_map(|(k, (_, t))| (0..t.numel()).map(move |j| (k, j)))
                .collect();
            (all, None)
        }
        Sampling::Params { count, seed } => {
            // The input is skipped; elements are drawn uniformly over the
            // flattened parameters, with spares for skipped ones.
            let sizes: Vec<usize> = inputs[1..].iter().map(|(_, t)| t.numel()).collect();
            let total: usize = sizes.iter().sum();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let picked = sample(&mut rng, total, (4 * count).min(total)).into_vec();
            let locate = |mut flat: usize| {
                for (k, &sz) in sizes.iter().enumerate() {
                    if flat < sz {
                        return (k + 1, flat);
                    }
                    flat -= sz;
                }
                unreachable!("index below the parameter total")
            };
            (picked.into_iter().map(locate).collect(), Some(count))
        }
    }
}

/// Input shape used by [`block_check`]: batch 2, 4×4 spatial.
pub fn block_check_input(spec: &BlockSpec) -> Shape {
    Shape::new(2, spec.in_channels, 4, 4)
}

/// Builds `spec` in `f64` with batch-norm parameters moved to a point where
/// every gradient is measurable.
///
/// At default init (gamma 1, beta 0) a train-mode batch norm downstream of a
/// per-channel op cancels the scale of the preceding one, so some gradients
/// are zero up to the BN epsilon and relative error is meaningless there.
/// First-BN gammas are therefore made small when no activation follows them,
/// and betas are spread so ReLU6 clamps part of each channel.
pub fn conditioned_block(spec: &BlockSpec, seed: u64) -> Result<(LayerGraph<f64>, Tensor<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block = build_block::<f64, _>("b", spec, &mut rng)?;
    let mut graph = LayerGraph::from(block);
    let activated_bn1 = spec.kind == BlockKind::Mbv2;
    graph.visit_params_mut(&mut |p| {
        let range = match (p.name.rsplit('.').nth(1), p.name.rsplit('.').next()) {
            (Some("bn1"), Some("gamma")) if !activated_bn1 => 0.02..0.05,
            (Some("bn1"), Some("beta")) if activated_bn1 => -1.0..0.0,
            (_, Some("gamma")) => 0.5..1.5,
            (_, Some("beta")) => -0.5..0.5,
            _ => return,
        };
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(range.clone()));
    });
    let x = kink_free_input(block_check_input(spec), 0.01, seed ^ 0x9e37_79b9);
    Ok((graph, x))
}

/// End-to-end check of one block at the point from [`conditioned_block`],
/// every input and parameter element.
pub fn block_check(spec: &BlockSpec, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let (mut graph, x) = conditioned_block(spec, seed)?;
    finite_difference_check(&mut graph, &x, tolerance, Sampling::All)
}

pub(crate) fn weighted_sum(y: &Tensor<f64>, w: &Tensor<f64>) -> f64 {
    y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
}

/// Random `f64` input of the given shape keeping every element at least
/// `margin` away from the ReLU6 kinks at 0 and 6.
pub fn kink_free_input(shape: Shape, margin: f64, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::<f64>::uniform(shape, -2.0, 8.0, &mut rng);
    for v in t.data_mut() {
        for kink in [0.0f64, 6.0] {
            if (*v - kink).abs() < margin {
                *v = kink + margin.copysign(*v - kink) * 2.0;
            }
        }
    }
    t
}
