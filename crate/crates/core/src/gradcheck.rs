//! Central-difference gradient checks in double precision.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::blocks::{build_block, BlockSpec, Variant};
use crate::error::Result;
use crate::graph::{LayerGraph, OpKind};
use crate::hourglass::{build_network, NetworkConfig};
use crate::pipeline::heatmap_loss;
use crate::tensor::{ConvSpec, NormMode, Tensor};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOLERANCE: f64 = 1e-4;
/// Smallest denominator of the relative error. Round-off in a central
/// difference is about 1e-16·|L|/h ≈ 1e-11·|L|, so gradients much below
/// this level cannot be resolved relative to their own size.
pub const FD_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct FdConfig {
    pub step: f64,
    pub floor: f64,
    /// Entries checked per tensor; `None` checks every entry.
    pub max_entries: Option<usize>,
    pub seed: u64,
}

impl Default for FdConfig {
    fn default() -> Self {
        FdConfig {
            step: FD_STEP,
            floor: FD_FLOOR,
            max_entries: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComponentReport {
    pub component: String,
    /// Worst `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Tensor entry with the worst error, e.g. `block.conv2.weight[17]`.
    pub worst: String,
    pub checked: usize,
    /// Entries whose difference bracket crossed a relu or max-pool kink.
    pub skipped: usize,
}

impl ComponentReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tolerance
    }

    fn record(&mut self, what: impl FnOnce() -> String, analytic: f64, numeric: f64, floor: f64) {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor);
        self.checked += 1;
        if err > self.max_rel_error || self.worst.is_empty() {
            self.max_rel_error = self.max_rel_error.max(err);
            self.worst = what();
        }
    }
}

/// Maps graph outputs to a scalar loss and its gradient per output.
pub type LossFn<'a> = dyn Fn(&[&Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> + 'a;

/// `L = Σ w·y` with fixed random weights per output.
pub fn weighted_sum_loss(weights: Vec<Tensor<f64>>) -> impl Fn(&[&Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
    move |outputs| {
        let mut loss = 0.0;
        for (y, w) in outputs.iter().zip(&weights) {
            loss += y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        Ok((loss, weights.clone()))
    }
}

fn entries(len: usize, max: Option<usize>, rng: &mut ChaCha8Rng) -> Vec<usize> {
    match max {
        Some(m) if m < len => {
            let mut v = index::sample(rng, len, m).into_vec();
            v.sort_unstable();
            v
        }
        _ => (0..len).collect(),
    }
}

/// Compares back-propagated gradients of `loss ∘ graph` against central
/// differences, for the input and every learnable parameter.
pub fn check_graph(
    component: &str,
    graph: &mut LayerGraph<f64>,
    input: &Tensor<f64>,
    mode: NormMode,
    loss: &LossFn,
    config: &FdConfig,
) -> Result<ComponentReport> {
    let base = graph.forward(input, mode)?;
    let signature = base.kink_signature(graph);
    let (_, output_grads) = loss(&base.outputs())?;
    let grads = graph.backward(&base, &output_grads.into_iter().map(Some).collect::<Vec<_>>())?;
    drop(base);

    let h = config.step;
    let probe = |graph: &LayerGraph<f64>, x: &Tensor<f64>| -> Result<(f64, u64)> {
        let pass = graph.forward(x, mode)?;
        Ok((loss(&pass.outputs())?.0, pass.kink_signature(graph)))
    };
    let mut report = ComponentReport {
        component: component.to_string(),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut x = input.clone();
    for i in entries(input.len(), config.max_entries, &mut rng) {
        let orig = x.data()[i];
        x.data_mut()[i] = orig + h;
        let (lp, sp) = probe(graph, &x)?;
        x.data_mut()[i] = orig - h;
        let (lm, sm) = probe(graph, &x)?;
        x.data_mut()[i] = orig;
        if sp != signature || sm != signature {
            report.skipped += 1;
            continue;
        }
        report.record(|| format!("input[{i}]"), grads.input.data()[i], (lp - lm) / (2.0 * h), config.floor);
    }

    for pid in 0..graph.params().len() {
        if !graph.params()[pid].kind.is_learnable() {
            continue;
        }
        let len = graph.params()[pid].value.len();
        for i in entries(len, config.max_entries, &mut rng) {
            let analytic = grads.param(pid).map_or(0.0, |g| g.data()[i]);
            let orig = graph.params()[pid].value.data()[i];
            graph.params_mut()[pid].value.data_mut()[i] = orig + h;
            let (lp, sp) = probe(graph, input)?;
            graph.params_mut()[pid].value.data_mut()[i] = orig - h;
            let (lm, sm) = probe(graph, input)?;
            graph.params_mut()[pid].value.data_mut()[i] = orig;
            if sp != signature || sm != signature {
                report.skipped += 1;
                continue;
            }
            let name = &graph.params()[pid].name;
            report.record(|| format!("{name}[{i}]"), analytic, (lp - lm) / (2.0 * h), config.floor);
        }
    }
    Ok(report)
}

/// Uniform input in [−1, 1] with every entry at least `gap` away from zero.
fn input_away_from_zero(shape: [usize; 4], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| loop {
        let v: f64 = rng.gen_range(-1.0..1.0);
        if v.abs() >= gap {
            break v;
        }
    })
}

/// Input whose entries are pairwise at least `gap` apart, so no max-pool
/// window has a near tie.
fn input_without_ties(shape: [usize; 4], gap: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut order: Vec<usize> = (0..n).collect();
    rand::seq::SliceRandom::shuffle(&mut order[..], rng);
    Tensor::from_vec(shape, order.into_iter().map(|k| k as f64 * gap - 0.5).collect())
        .expect("length matches shape")
}

fn random_weights(graph: &LayerGraph<f64>, input: &Tensor<f64>, rng: &mut ChaCha8Rng) -> Result<Vec<Tensor<f64>>> {
    let shapes = graph.infer_shapes(input.shape())?;
    Ok(graph
        .outputs()
        .iter()
        .map(|&o| Tensor::random_uniform(shapes[o], -1.0, 1.0, rng))
        .collect())
}

fn single_op(in_channels: usize, seed: u64, build: impl FnOnce(&mut LayerGraph<f64>) -> Result<usize>) -> Result<LayerGraph<f64>> {
    let mut g = LayerGraph::new(in_channels, seed);
    let out = build(&mut g)?;
    g.mark_output(out);
    Ok(g)
}

/// One graph per primitive: (component name, graph, input, mode).
fn primitive_cases(seed: u64) -> Result<Vec<(String, LayerGraph<f64>, Tensor<f64>, NormMode)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut cases = Vec::new();
    let x = |rng: &mut ChaCha8Rng, c| Tensor::random_uniform([2, c, 6, 6], -1.0, 1.0, rng);

    let conv = ConvSpec::new(3, 4, 3).with_padding(1).with_bias(true);
    cases.push(("conv2d", single_op(3, seed, |g| g.conv("conv", conv, 0))?, x(&mut rng, 3), NormMode::Train));
    let strided = ConvSpec::new(3, 4, 3).with_stride(2).with_dilation(2).with_padding(2).with_bias(true);
    cases.push(("conv2d_strided_dilated", single_op(3, seed, |g| g.conv("conv", strided, 0))?, x(&mut rng, 3), NormMode::Train));
    let dw = ConvSpec::depthwise(4, 3, 2);
    cases.push(("conv2d_depthwise", single_op(4, seed, |g| g.conv("conv", dw, 0))?, x(&mut rng, 4), NormMode::Train));
    let grouped = ConvSpec::new(4, 6, 3).with_groups(2).with_padding(1).with_bias(true);
    cases.push(("conv2d_grouped", single_op(4, seed, |g| g.conv("conv", grouped, 0))?, x(&mut rng, 4), NormMode::Train));

    for mode in [NormMode::Train, NormMode::Eval] {
        let mut g = single_op(3, seed, |g| g.batchnorm("bn", 0))?;
        for p in g.params_mut() {
            let (lo, hi) = if p.name.ends_with("var") { (0.5, 2.0) } else { (-0.5, 1.5) };
            p.value = Tensor::random_uniform(p.value.shape(), lo, hi, &mut rng);
        }
        let name = match mode {
            NormMode::Train => "batchnorm_train",
            NormMode::Eval => "batchnorm_eval",
        };
        cases.push((name, g, x(&mut rng, 3), mode));
    }
    cases.push(("relu", single_op(3, seed, |g| g.relu("relu", 0))?, input_away_from_zero([2, 3, 6, 6], 1e-3, &mut rng), NormMode::Train));
    cases.push(("maxpool2x2", single_op(3, seed, |g| g.maxpool("pool", 0))?, input_without_ties([2, 3, 6, 6], 1e-2, &mut rng), NormMode::Train));
    cases.push(("upsample_nearest2x", single_op(3, seed, |g| g.upsample("up", 0))?, x(&mut rng, 3), NormMode::Train));
    cases.push(("add", single_op(3, seed, |g| g.add("add", 0, 0))?, x(&mut rng, 3), NormMode::Train));
    cases.push(("concat_channels", single_op(3, seed, |g| g.concat("cat", &[0, 0]))?, x(&mut rng, 3), NormMode::Train));
    Ok(cases
        .into_iter()
        .map(|(n, g, x, m)| (format!("primitive:{n}"), g, x, m))
        .collect())
}

/// Checks every primitive as a single-op graph.
pub fn check_primitives(seed: u64, fault: Option<OpKind>) -> Result<Vec<ComponentReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    primitive_cases(seed)?
        .into_iter()
        .map(|(name, mut g, x, mode)| {
            g.inject_backward_fault(fault);
            let loss = weighted_sum_loss(random_weights(&g, &x, &mut rng)?);
            check_graph(&name, &mut g, &x, mode, &loss, &FdConfig { seed, ..Default::default() })
        })
        .collect()
}

/// Checks one residual block (with a projection skip) in train mode.
pub fn check_block(variant: Variant, seed: u64, fault: Option<OpKind>) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = BlockSpec::new(variant, 6, 8).with_mid(4);
    let mut g = build_block::<f64>(&spec, seed)?;
    g.inject_backward_fault(fault);
    let x = Tensor::random_uniform([2, 6, 6, 6], -1.0, 1.0, &mut rng);
    let loss = weighted_sum_loss(random_weights(&g, &x, &mut rng)?);
    check_graph(&format!("block:{variant}"), &mut g, &x, NormMode::Train, &loss, &FdConfig { seed, ..Default::default() })
}

/// The small network the suite checks end to end: one stack at 32×32 input.
pub fn tiny_network_config(variant: Variant, reduced_stem: bool) -> NetworkConfig {
    NetworkConfig {
        num_stacks: 1,
        variant,
        hg_depth: 1,
        stem_channels: [4, 8],
        hg_channels: 8,
        input_res: 32,
        heatmap_res: 8,
        reduced_stem,
        ..Default::default()
    }
}

/// Checks the heatmap loss through a 1-stack network in train mode,
/// sampling `entries` values per tensor.
pub fn check_network(config: &NetworkConfig, seed: u64, entries: usize, fault: Option<OpKind>) -> Result<ComponentReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = build_network::<f64>(config, seed)?;
    net.graph_mut().inject_backward_fault(fault);
    let (res, hm, j) = (config.input_res, config.heatmap_res, config.num_joints);
    let x = Tensor::random_uniform([2, 3, res, res], 0.0, 1.0, &mut rng);
    let targets = Tensor::random_uniform([2, j, hm, hm], 0.0, 1.0, &mut rng);
    let weights: Vec<f64> = (0..2 * j).map(|_| if rng.gen_bool(0.8) { 1.0 } else { 0.0 }).collect();
    let loss = move |outs: &[&Tensor<f64>]| heatmap_loss(outs, &targets, &weights);
    let name = format!("network:{}-stack@{res}", config.num_stacks);
    let fd = FdConfig {
        max_entries: Some(entries),
        seed,
        ..Default::default()
    };
    check_graph(&name, net.graph_mut(), &x, NormMode::Train, &loss, &fd)
}

/// Primitives, the block of `variant`, and the tiny network built from it.
pub fn run_suite(variant: Variant, reduced_stem: bool, seed: u64, fault: Option<OpKind>) -> Result<Vec<ComponentReport>> {
    let mut reports = check_primitives(seed, fault)?;
    reports.push(check_block(variant, seed, fault)?);
    reports.push(check_network(&tiny_network_config(variant, reduced_stem), seed, 12, fault)?);
    Ok(reports)
}
