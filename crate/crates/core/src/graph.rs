//! Layer graphs: an ordered DAG of primitive layers plus a named parameter registry.
//!
//! Nodes are appended in topological order (every input id is smaller than the
//! node id), so forward is a single left-to-right sweep and backward a single
//! right-to-left sweep. Node 0 is always the graph input.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::fmt;
use std::hash::{Hash, Hasher};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{
    self, BatchNormCache, ConvSpec, NormMode, RunningStats, Scalar, Shape, Tensor, BN_EPSILON,
};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv {
        spec: ConvSpec,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    },
    Relu,
    MaxPool2,
    Upsample2,
    Add,
    Concat,
}

/// Coarse layer category, used for reporting and fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Input,
    Conv,
    BatchNorm,
    Relu,
    MaxPool,
    Upsample,
    Add,
    Concat,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::Conv,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::MaxPool,
        OpKind::Upsample,
        OpKind::Add,
        OpKind::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Input => "input",
            OpKind::Conv => "conv2d",
            OpKind::BatchNorm => "batchnorm",
            OpKind::Relu => "relu",
            OpKind::MaxPool => "maxpool2x2",
            OpKind::Upsample => "upsample_nearest2x",
            OpKind::Add => "add",
            OpKind::Concat => "concat_channels",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Input => OpKind::Input,
            Op::Conv { .. } => OpKind::Conv,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::Relu => OpKind::Relu,
            Op::MaxPool2 => OpKind::MaxPool,
            Op::Upsample2 => OpKind::Upsample,
            Op::Add => OpKind::Add,
            Op::Concat => OpKind::Concat,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub channels: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    /// Running statistics are state, not learnable parameters.
    pub fn is_learnable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Joins dotted name components, skipping empty ones.
pub fn scoped(prefix: &str, leaf: &str) -> String {
    match (prefix.is_empty(), leaf.is_empty()) {
        (true, _) => leaf.to_string(),
        (_, true) => prefix.to_string(),
        _ => format!("{prefix}.{leaf}"),
    }
}

fn name_hash(name: &str) -> u64 {
    // FNV-1a: stable across platforms and releases.
    name.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Generator dedicated to one parameter, derived from the model seed and the parameter name.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&name_hash(name).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

#[derive(Clone, Debug)]
enum NodeCache<T> {
    None,
    Pool(Vec<usize>),
    Norm(BatchNormCache<T>),
}

/// Activations and caches of one forward sweep.
#[derive(Clone, Debug)]
pub struct ForwardPass<T> {
    mode: NormMode,
    acts: Vec<Option<Tensor<T>>>,
    caches: Vec<NodeCache<T>>,
    outputs: Vec<NodeId>,
}

impl<T: Scalar> ForwardPass<T> {
    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn outputs(&self) -> Vec<&Tensor<T>> {
        self.outputs
            .iter()
            .map(|&id| self.acts[id].as_ref().expect("outputs are retained"))
            .collect()
    }

    pub fn activation(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.acts.get(id).and_then(|a| a.as_ref())
    }

    /// Fingerprint of every non-smooth decision taken in this pass: relu
    /// input signs and max-pool winners. Two passes with equal signatures lie
    /// in the same smooth piece of the network function.
    pub fn kink_signature(&self, graph: &LayerGraph<T>) -> u64 {
        let mut h = DefaultHasher::new();
        for (id, node) in graph.nodes.iter().enumerate() {
            match (&node.op, &self.caches[id]) {
                (Op::Relu, _) => {
                    if let Some(x) = self.activation(node.inputs[0]) {
                        for v in x.data() {
                            (*v > T::zero()).hash(&mut h);
                        }
                    }
                }
                (Op::MaxPool2, NodeCache::Pool(idx)) => idx.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }
}

/// Gradients produced by [`LayerGraph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    pub input: Tensor<T>,
    /// Indexed by [`ParamId`]; `None` for state buffers and unreached parameters.
    pub params: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(id).and_then(|g| g.as_ref())
    }
}

#[derive(Clone, Debug)]
pub struct LayerGraph<T> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    index: HashMap<String, ParamId>,
    outputs: Vec<NodeId>,
    seed: u64,
    fault: Option<OpKind>,
}

impl<T: Scalar> LayerGraph<T> {
    /// An empty graph whose input has `in_channels` channels. Parameters are
    /// initialized from `seed` and their own names, so any two graphs sharing a
    /// parameter name and seed share its initial value.
    pub fn new(in_channels: usize, seed: u64) -> Self {
        LayerGraph {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inputs: vec![],
                channels: in_channels,
            }],
            params: Vec::new(),
            index: HashMap::new(),
            outputs: Vec::new(),
            seed,
            fault: None,
        }
    }

    pub const INPUT: NodeId = 0;

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn channels(&self, id: NodeId) -> usize {
        self.nodes[id].channels
    }

    pub fn outputs(&self) -> &[NodeId] {
        &self.outputs
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.param_id(name).map(|id| &self.params[id])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.param_id(name).map(move |id| &mut self.params[id])
    }

    /// Total learnable scalars (conv weights and biases, norm scales and shifts).
    pub fn param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_learnable())
            .map(|p| p.value.len())
            .sum()
    }

    /// Learnable scalars whose names start with `prefix`.
    pub fn param_count_under(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.is_learnable() && p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    /// Output shape of every node for the given input shape, without computing anything.
    pub fn infer_shapes(&self, input: Shape) -> Result<Vec<Shape>> {
        if input.channels != self.nodes[0].channels {
            return Err(shape_err!(
                "graph expects {} input channels, got {input}",
                self.nodes[0].channels
            ));
        }
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let s = match &node.op {
                Op::Input => input,
                Op::Conv { spec, .. } => {
                    let x = shapes[node.inputs[0]];
                    let (h, w) = spec.output_hw(x.height, x.width)?;
                    Shape::new(x.batch, spec.out_channels, h, w)
                }
                Op::BatchNorm { .. } | Op::Relu => shapes[node.inputs[0]],
                Op::MaxPool2 => {
                    let x = shapes[node.inputs[0]];
                    if !x.height.is_multiple_of(2) || !x.width.is_multiple_of(2) {
                        return Err(Error::Geometry(format!(
                            "{} pools an odd-sized map {x}",
                            node.name
                        )));
                    }
                    Shape::new(x.batch, x.channels, x.height / 2, x.width / 2)
                }
                Op::Upsample2 => {
                    let x = shapes[node.inputs[0]];
                    Shape::new(x.batch, x.channels, x.height * 2, x.width * 2)
                }
                Op::Add => {
                    let (a, b) = (shapes[node.inputs[0]], shapes[node.inputs[1]]);
                    if a != b {
                        return Err(shape_err!("{} adds {a} and {b}", node.name));
                    }
                    a
                }
                Op::Concat => {
                    let first = shapes[node.inputs[0]];
                    let mut c = 0;
                    for &i in &node.inputs {
                        let s = shapes[i];
                        if (s.batch, s.height, s.width) != (first.batch, first.height, first.width)
                        {
                            return Err(shape_err!("{} concatenates {s} with {first}", node.name));
                        }
                        c += s.channels;
                    }
                    first.with_channels(c)
                }
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Convolution multiply-accumulates for one forward pass on a `1×C×h×w` input.
    pub fn mac_count(&self, h: usize, w: usize) -> Result<u64> {
        self.mac_count_where(h, w, |_| true)
    }

    /// Like [`mac_count`](Self::mac_count), restricted to conv nodes whose name satisfies `keep`.
    pub fn mac_count_where(&self, h: usize, w: usize, keep: impl Fn(&str) -> bool) -> Result<u64> {
        let shapes = self.infer_shapes(Shape::new(1, self.nodes[0].channels, h, w))?;
        let mut total = 0u64;
        for node in &self.nodes {
            if let Op::Conv { spec, .. } = &node.op {
                if keep(&node.name) {
                    let x = shapes[node.inputs[0]];
                    total += spec.macs(x.height, x.width)?;
                }
            }
        }
        Ok(total)
    }

    // ---- construction -------------------------------------------------

    fn add_param(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, kind, value });
        Ok(id)
    }

    fn push(&mut self, name: String, op: Op, inputs: Vec<NodeId>, channels: usize) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(Error::Config(format!("{name} references unknown node {bad}")));
        }
        self.nodes.push(Node {
            name,
            op,
            inputs,
            channels,
        });
        Ok(self.nodes.len() - 1)
    }

    /// Convolution with fan-in scaled uniform initialization (bound `sqrt(1/fan_in)`).
    pub fn conv(&mut self, name: &str, spec: ConvSpec, input: NodeId) -> Result<NodeId> {
        spec.validate()?;
        let have = self.channels(input);
        if have != spec.in_channels {
            return Err(shape_err!(
                "{name} expects {} input channels, its input has {have}",
                spec.in_channels
            ));
        }
        let bound = (1.0 / spec.fan_in() as f64).sqrt();
        let wname = scoped(name, "weight");
        let mut rng = param_rng(self.seed, &wname);
        let w = Tensor::random_uniform(spec.weight_shape(), -bound, bound, &mut rng);
        let weight = self.add_param(wname, ParamKind::Weight, w)?;
        let bias = if spec.bias {
            let bname = scoped(name, "bias");
            let mut rng = param_rng(self.seed, &bname);
            let data = (0..spec.out_channels)
                .map(|_| T::of(rng.gen_range(-bound..bound)))
                .collect();
            let b = Tensor::from_vec(Shape::vector(spec.out_channels), data)?;
            Some(self.add_param(bname, ParamKind::Bias, b)?)
        } else {
            None
        };
        self.push(
            name.to_string(),
            Op::Conv { spec, weight, bias },
            vec![input],
            spec.out_channels,
        )
    }

    /// Batch normalization with unit scale, zero shift and identity running statistics.
    pub fn batchnorm(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels(input);
        let v = Shape::vector(c);
        let gamma = self.add_param(scoped(name, "gamma"), ParamKind::Gamma, Tensor::full(v, T::one()))?;
        let beta = self.add_param(scoped(name, "beta"), ParamKind::Beta, Tensor::zeros(v))?;
        let running_mean = self.add_param(
            scoped(name, "running_mean"),
            ParamKind::RunningMean,
            Tensor::zeros(v),
        )?;
        let running_var = self.add_param(
            scoped(name, "running_var"),
            ParamKind::RunningVar,
            Tensor::full(v, T::one()),
        )?;
        self.push(
            name.to_string(),
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            },
            vec![input],
            c,
        )
    }

    pub fn relu(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels(input);
        self.push(name.to_string(), Op::Relu, vec![input], c)
    }

    pub fn maxpool(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels(input);
        self.push(name.to_string(), Op::MaxPool2, vec![input], c)
    }

    pub fn upsample(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let c = self.channels(input);
        self.push(name.to_string(), Op::Upsample2, vec![input], c)
    }

    pub fn add(&mut self, name: &str, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ca, cb) = (self.channels(a), self.channels(b));
        if ca != cb {
            return Err(shape_err!("{name} adds {ca} channels to {cb}"));
        }
        self.push(name.to_string(), Op::Add, vec![a, b], ca)
    }

    pub fn concat(&mut self, name: &str, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(shape_err!("{name} concatenates nothing"));
        }
        let c = parts.iter().map(|&p| self.channels(p)).sum();
        self.push(name.to_string(), Op::Concat, parts.to_vec(), c)
    }

    /// Batch norm followed by relu.
    pub fn bn_relu(&mut self, name: &str, input: NodeId) -> Result<NodeId> {
        let bn = self.batchnorm(&scoped(name, "bn"), input)?;
        self.relu(&scoped(name, "relu"), bn)
    }

    pub fn mark_output(&mut self, id: NodeId) {
        self.outputs.push(id);
    }

    /// Test fixture: scales every gradient produced by layers of `kind` by 1.1.
    #[doc(hidden)]
    pub fn inject_backward_fault(&mut self, kind: Option<OpKind>) {
        self.fault = kind;
    }

    // ---- execution ----------------------------------------------------

    fn stats(&self, mean: ParamId, var: ParamId) -> RunningStats<T> {
        RunningStats {
            mean: self.params[mean].value.data().to_vec(),
            var: self.params[var].value.data().to_vec(),
        }
    }

    fn eval_node(
        &self,
        node: &Node,
        args: &[&Tensor<T>],
        mode: NormMode,
    ) -> Result<(Tensor<T>, NodeCache<T>)> {
        let p = |id: ParamId| &self.params[id].value;
        let out = match &node.op {
            Op::Input => unreachable!("input is seeded, not evaluated"),
            Op::Conv { spec, weight, bias } => (
                tensor::conv2d_forward(args[0], spec, p(*weight), bias.map(p))?,
                NodeCache::None,
            ),
            Op::BatchNorm {
                gamma,
                beta,
                running_mean,
                running_var,
            } => {
                let stats = self.stats(*running_mean, *running_var);
                let (y, cache) = tensor::batchnorm_apply(
                    args[0],
                    p(*gamma).data(),
                    p(*beta).data(),
                    &stats,
                    mode,
                    BN_EPSILON,
                )?;
                (y, NodeCache::Norm(cache))
            }
            Op::Relu => (tensor::relu(args[0]), NodeCache::None),
            Op::MaxPool2 => {
                let (y, idx) = tensor::maxpool2x2_forward(args[0])?;
                (y, NodeCache::Pool(idx))
            }
            Op::Upsample2 => (tensor::upsample_nearest2x(args[0]), NodeCache::None),
            Op::Add => (tensor::add(args[0], args[1])?, NodeCache::None),
            Op::Concat => (tensor::concat_channels(args)?, NodeCache::None),
        };
        out.0.check_finite(&node.name)?;
        Ok(out)
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<()> {
        if input.shape().channels != self.nodes[0].channels {
            return Err(shape_err!(
                "graph expects {} input channels, got {}",
                self.nodes[0].channels,
                input.shape()
            ));
        }
        input.check_finite("graph input")
    }

    /// Runs every node, retaining all activations for [`backward`](Self::backward).
    /// Running statistics are not touched; see [`commit_running_stats`](Self::commit_running_stats).
    pub fn forward(&self, input: &Tensor<T>, mode: NormMode) -> Result<ForwardPass<T>> {
        self.check_input(input)?;
        let mut acts: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut caches = Vec::with_capacity(self.nodes.len());
        acts.push(Some(input.clone()));
        caches.push(NodeCache::None);
        for node in &self.nodes[1..] {
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| acts[i].as_ref().expect("topological order"))
                .collect();
            let (y, cache) = self.eval_node(node, &args, mode)?;
            acts.push(Some(y));
            caches.push(cache);
        }
        Ok(ForwardPass {
            mode,
            acts,
            caches,
            outputs: self.outputs.clone(),
        })
    }

    /// Eval-mode forward that frees each activation after its last consumer.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.check_input(input)?;
        let n = self.nodes.len();
        let mut last_use = vec![0usize; n];
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.inputs {
                last_use[i] = id;
            }
        }
        for &o in &self.outputs {
            last_use[o] = usize::MAX;
        }
        let mut acts: Vec<Option<Tensor<T>>> = vec![None; n];
        acts[0] = Some(input.clone());
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            let args: Vec<&Tensor<T>> = node
                .inputs
                .iter()
                .map(|&i| acts[i].as_ref().expect("topological order"))
                .collect();
            let (y, _) = self.eval_node(node, &args, NormMode::Eval)?;
            acts[id] = Some(y);
            for &i in &node.inputs {
                if last_use[i] == id {
                    acts[i] = None;
                }
            }
        }
        Ok(self
            .outputs
            .iter()
            .map(|&o| acts[o].clone().expect("outputs are retained"))
            .collect())
    }

    /// Folds the batch statistics observed in a train-mode pass into the running statistics.
    pub fn commit_running_stats(&mut self, pass: &ForwardPass<T>, momentum: f64) {
        if pass.mode != NormMode::Train {
            return;
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if let (
                Op::BatchNorm {
                    running_mean,
                    running_var,
                    ..
                },
                NodeCache::Norm(cache),
            ) = (&node.op, &pass.caches[id])
            {
                let mut stats = RunningStats {
                    mean: self.params[*running_mean].value.data().to_vec(),
                    var: self.params[*running_var].value.data().to_vec(),
                };
                stats.update(cache, momentum);
                self.params[*running_mean]
                    .value
                    .data_mut()
                    .copy_from_slice(&stats.mean);
                self.params[*running_var]
                    .value
                    .data_mut()
                    .copy_from_slice(&stats.var);
            }
        }
    }

    /// Back-propagates `output_grads` (aligned with [`outputs`](Self::outputs);
    /// `None` means zero) through the pass.
    pub fn backward(
        &self,
        pass: &ForwardPass<T>,
        output_grads: &[Option<Tensor<T>>],
    ) -> Result<Gradients<T>> {
        if output_grads.len() != self.outputs.len() {
            return Err(shape_err!(
                "graph has {} outputs, got {} output gradients",
                self.outputs.len(),
                output_grads.len()
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; n];
        for (&o, g) in self.outputs.iter().zip(output_grads) {
            if let Some(g) = g {
                let y = pass.activation(o).expect("outputs retained");
                if g.shape() != y.shape() {
                    return Err(shape_err!(
                        "gradient {} for output {} of shape {}",
                        g.shape(),
                        self.nodes[o].name,
                        y.shape()
                    ));
                }
                accumulate(&mut grads[o], g.clone())?;
            }
        }
        let mut pgrads: Vec<Option<Tensor<T>>> = vec![None; self.params.len()];

        for id in (1..n).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let x = |k: usize| {
                pass.activation(node.inputs[k])
                    .expect("forward retains every activation")
            };
            let mut to_inputs: Vec<(NodeId, Tensor<T>)> = Vec::with_capacity(node.inputs.len());
            let mut to_params: Vec<(ParamId, Tensor<T>)> = Vec::new();
            match &node.op {
                Op::Input => unreachable!(),
                Op::Conv { spec, weight, bias } => {
                    let cg = tensor::conv2d_backward(x(0), spec, &self.params[*weight].value, &g)?;
                    to_inputs.push((node.inputs[0], cg.input));
                    to_params.push((*weight, cg.weights));
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        to_params.push((*b, gb));
                    }
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let NodeCache::Norm(cache) = &pass.caches[id] else {
                        unreachable!("batch-norm nodes cache statistics")
                    };
                    let (dx, dg, db) = tensor::batchnorm_backward(
                        x(0),
                        self.params[*gamma].value.data(),
                        cache,
                        &g,
                    )?;
                    let v = Shape::vector(dg.len());
                    to_inputs.push((node.inputs[0], dx));
                    to_params.push((*gamma, Tensor::from_vec(v, dg)?));
                    to_params.push((*beta, Tensor::from_vec(v, db)?));
                }
                Op::Relu => to_inputs.push((node.inputs[0], tensor::relu_backward(x(0), &g)?)),
                Op::MaxPool2 => {
                    let NodeCache::Pool(idx) = &pass.caches[id] else {
                        unreachable!("pool nodes cache winners")
                    };
                    to_inputs.push((
                        node.inputs[0],
                        tensor::maxpool2x2_backward(&g, idx, x(0).shape())?,
                    ));
                }
                Op::Upsample2 => {
                    to_inputs.push((node.inputs[0], tensor::upsample_nearest2x_backward(&g)?))
                }
                Op::Add => {
                    to_inputs.push((node.inputs[0], g.clone()));
                    to_inputs.push((node.inputs[1], g));
                }
                Op::Concat => {
                    let sizes: Vec<usize> = (0..node.inputs.len())
                        .map(|k| x(k).shape().channels)
                        .collect();
                    for (k, part) in tensor::split_channels(&g, &sizes)?.into_iter().enumerate() {
                        to_inputs.push((node.inputs[k], part));
                    }
                }
            }
            let corrupt = self.fault == Some(node.op.kind());
            for (i, mut t) in to_inputs {
                if corrupt {
                    t.scale(T::of(1.1));
                }
                accumulate(&mut grads[i], t)?;
            }
            for (p, mut t) in to_params {
                if corrupt {
                    t.scale(T::of(1.1));
                }
                accumulate(&mut pgrads[p], t)?;
            }
        }

        let input = grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(pass.acts[0].as_ref().expect("input").shape()));
        Ok(Gradients {
            input,
            params: pgrads,
        })
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        None => {
            *slot = Some(g);
            Ok(())
        }
        Some(acc) => acc.add_assign(&g),
    }
}
