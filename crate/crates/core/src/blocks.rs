//! Residual bottlenecks: the original hourglass bottleneck and its four
//! lightweight replacements, plus the ghost module they build on.
//!
//! All blocks are stride 1 and pre-activation: every convolution stage is
//! preceded by batch norm and relu. Convolutions feeding straight into a batch
//! norm carry no bias.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::graph::{scoped, ForwardPass, Gradients, LayerGraph, NodeId};
use crate::tensor::{ConvSpec, NormMode, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// 1×1 reduce, 3×3, 1×1 expand.
    Original,
    /// The 3×3 stage replaced by one depthwise-separable convolution.
    Dw1,
    /// Three 3×3 depthwise-separable convolutions.
    Dw3,
    /// Two ghost modules.
    Ghost,
    /// Three parallel depthwise-separable branches at dilations 1, 2, 3.
    Multidilated,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Original,
        Variant::Dw1,
        Variant::Dw3,
        Variant::Ghost,
        Variant::Multidilated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Original => "original",
            Variant::Dw1 => "dw1",
            Variant::Dw3 => "dw3",
            Variant::Ghost => "ghost",
            Variant::Multidilated => "multidilated",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}`; valid: {}", names.join(", ")))
            })
    }
}

/// How the multidilated branches are merged before the expanding 1×1.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Merge {
    Concat,
    Sum,
}

impl Merge {
    pub fn name(self) -> &'static str {
        match self {
            Merge::Concat => "concat",
            Merge::Sum => "sum",
        }
    }
}

impl FromStr for Merge {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Merge::Concat),
            "sum" => Ok(Merge::Sum),
            _ => Err(Error::Config(format!(
                "unknown merge `{s}`; valid: concat, sum"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BlockSpec {
    pub variant: Variant,
    pub in_channels: usize,
    pub out_channels: usize,
    pub mid_channels: usize,
    /// Multidilated branch dilations, in concatenation order.
    pub dilations: Vec<usize>,
    pub ghost_ratio: usize,
    pub merge: Merge,
}

impl BlockSpec {
    /// Defaults: `mid = out / 2`, dilations `[1, 2, 3]`, ghost ratio 2, concat merge.
    pub fn new(variant: Variant, in_channels: usize, out_channels: usize) -> Self {
        BlockSpec {
            variant,
            in_channels,
            out_channels,
            mid_channels: (out_channels / 2).max(1),
            dilations: vec![1, 2, 3],
            ghost_ratio: 2,
            merge: Merge::Concat,
        }
    }

    pub fn with_mid(mut self, mid_channels: usize) -> Self {
        self.mid_channels = mid_channels;
        self
    }

    pub fn with_merge(mut self, merge: Merge) -> Self {
        self.merge = merge;
        self
    }

    pub fn has_projection(&self) -> bool {
        self.in_channels != self.out_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.mid_channels == 0 {
            return Err(Error::Config(format!(
                "block channels must be positive, got {}→{} (mid {})",
                self.in_channels, self.out_channels, self.mid_channels
            )));
        }
        match self.variant {
            Variant::Ghost => {
                let r = self.ghost_ratio;
                if r == 0 || !self.out_channels.is_multiple_of(r) || !self.mid_channels.is_multiple_of(r) {
                    return Err(Error::Config(format!(
                        "ghost block needs mid {} and out {} divisible by ratio {r}",
                        self.mid_channels, self.out_channels
                    )));
                }
            }
            Variant::Multidilated => {
                if self.dilations.is_empty() || self.dilations.contains(&0) {
                    return Err(Error::Config(format!(
                        "multidilated block needs positive dilations, got {:?}",
                        self.dilations
                    )));
                }
                let mut sorted = self.dilations.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != self.dilations.len() {
                    return Err(Error::Config(format!(
                        "multidilated dilations must be distinct, got {:?}",
                        self.dilations
                    )));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Primary 1×1 convolution to the intrinsic maps, then a cheap depthwise
/// convolution deriving the ghost maps from them; output is their concatenation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GhostModuleSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub ratio: usize,
    pub cheap_kernel: usize,
    pub bias: bool,
}

impl GhostModuleSpec {
    pub fn new(in_channels: usize, out_channels: usize, ratio: usize) -> Self {
        GhostModuleSpec {
            in_channels,
            out_channels,
            ratio,
            cheap_kernel: 3,
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn intrinsic_channels(&self) -> usize {
        self.out_channels / self.ratio
    }

    pub fn ghost_channels(&self) -> usize {
        self.out_channels - self.intrinsic_channels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 || self.ratio == 0 {
            return Err(Error::Config("ghost module sizes must be positive".into()));
        }
        if !self.out_channels.is_multiple_of(self.ratio) {
            return Err(Error::Config(format!(
                "ghost module output {} not divisible by ratio {}",
                self.out_channels, self.ratio
            )));
        }
        if self.cheap_kernel.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "ghost cheap kernel must be odd, got {}",
                self.cheap_kernel
            )));
        }
        Ok(())
    }

    fn primary(&self) -> ConvSpec {
        ConvSpec::pointwise(self.in_channels, self.intrinsic_channels()).with_bias(self.bias)
    }

    fn cheap(&self) -> ConvSpec {
        let n = self.intrinsic_channels();
        ConvSpec::new(n, self.ghost_channels(), self.cheap_kernel)
            .with_groups(n)
            .with_padding(self.cheap_kernel / 2)
            .with_bias(self.bias)
    }
}

// ---- graph construction ---------------------------------------------------

/// Depthwise 3×3 (dilated, same padding) then pointwise 1×1.
pub fn append_separable<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    in_channels: usize,
    out_channels: usize,
    dilation: usize,
    bias: bool,
    input: NodeId,
) -> Result<NodeId> {
    let dw = g.conv(
        &scoped(prefix, "dw"),
        ConvSpec::depthwise(in_channels, 3, dilation),
        input,
    )?;
    g.conv(
        &scoped(prefix, "pw"),
        ConvSpec::pointwise(in_channels, out_channels).with_bias(bias),
        dw,
    )
}

pub fn append_ghost_module<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    spec: &GhostModuleSpec,
    input: NodeId,
) -> Result<NodeId> {
    spec.validate()?;
    let primary = g.conv(&scoped(prefix, "primary"), spec.primary(), input)?;
    if spec.ghost_channels() == 0 {
        return Ok(primary);
    }
    let cheap = g.conv(&scoped(prefix, "cheap"), spec.cheap(), primary)?;
    g.concat(&scoped(prefix, "cat"), &[primary, cheap])
}

/// Appends a residual block reading from `input`; returns the block output node.
pub fn append_block<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    spec: &BlockSpec,
    input: NodeId,
) -> Result<NodeId> {
    append_block_ordered(g, prefix, spec, input, &spec.dilations)
}

/// As [`append_block`], but multidilated branches are *constructed* in
/// `build_order`; they are always merged in `spec.dilations` order.
fn append_block_ordered<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    spec: &BlockSpec,
    input: NodeId,
    build_order: &[usize],
) -> Result<NodeId> {
    spec.validate()?;
    if g.channels(input) != spec.in_channels {
        return Err(shape_err!(
            "{prefix} expects {} channels, its input has {}",
            spec.in_channels,
            g.channels(input)
        ));
    }
    let (cin, mid, cout) = (spec.in_channels, spec.mid_channels, spec.out_channels);
    let s = |leaf: &str| scoped(prefix, leaf);

    let main = match spec.variant {
        Variant::Original | Variant::Dw1 => {
            let a = g.bn_relu(&s("pre1"), input)?;
            let a = g.conv(&s("conv1"), ConvSpec::pointwise(cin, mid), a)?;
            let a = g.bn_relu(&s("pre2"), a)?;
            let a = if spec.variant == Variant::Original {
                g.conv(&s("conv2"), ConvSpec::new(mid, mid, 3).with_padding(1), a)?
            } else {
                append_separable(g, &s("conv2"), mid, mid, 1, false, a)?
            };
            let a = g.bn_relu(&s("pre3"), a)?;
            g.conv(&s("conv3"), ConvSpec::pointwise(mid, cout).with_bias(true), a)?
        }
        Variant::Dw3 => {
            let a = g.bn_relu(&s("pre1"), input)?;
            let a = append_separable(g, &s("sep1"), cin, mid, 1, false, a)?;
            let a = g.bn_relu(&s("pre2"), a)?;
            let a = append_separable(g, &s("sep2"), mid, mid, 1, false, a)?;
            let a = g.bn_relu(&s("pre3"), a)?;
            append_separable(g, &s("sep3"), mid, cout, 1, true, a)?
        }
        Variant::Ghost => {
            let r = spec.ghost_ratio;
            let a = g.batchnorm(&s("pre1.bn"), input)?;
            let a = append_ghost_module(g, &s("ghost1"), &GhostModuleSpec::new(cin, mid, r), a)?;
            let a = g.bn_relu(&s("pre2"), a)?;
            append_ghost_module(
                g,
                &s("ghost2"),
                &GhostModuleSpec::new(mid, cout, r).with_bias(true),
                a,
            )?
        }
        Variant::Multidilated => {
            let pre = g.bn_relu(&s("pre1"), input)?;
            let mut outs = Vec::with_capacity(build_order.len());
            for &d in build_order {
                let b = format!("branch_d{d}");
                let a = g.conv(&s(&format!("{b}.reduce")), ConvSpec::pointwise(cin, mid), pre)?;
                let a = g.bn_relu(&s(&format!("{b}.pre")), a)?;
                let a = append_separable(g, &s(&b), mid, mid, d, false, a)?;
                outs.push((d, a));
            }
            let ordered: Vec<NodeId> = spec
                .dilations
                .iter()
                .map(|d| outs.iter().find(|(od, _)| od == d).map(|(_, n)| *n))
                .collect::<Option<_>>()
                .ok_or_else(|| Error::Config("branch build order must list every dilation".into()))?;
            let merged = match spec.merge {
                Merge::Concat => g.concat(&s("merge"), &ordered)?,
                Merge::Sum => {
                    let mut acc = ordered[0];
                    for (i, &b) in ordered.iter().enumerate().skip(1) {
                        acc = g.add(&s(&format!("merge{i}")), acc, b)?;
                    }
                    acc
                }
            };
            let width = g.channels(merged);
            let a = g.bn_relu(&s("pre3"), merged)?;
            g.conv(&s("conv3"), ConvSpec::pointwise(width, cout).with_bias(true), a)?
        }
    };

    let skip = if spec.has_projection() {
        g.conv(&s("skip"), ConvSpec::pointwise(cin, cout).with_bias(true), input)?
    } else {
        input
    };
    g.add(&s("add"), skip, main)
}

/// A standalone block graph with one input and one output.
pub fn build_block<T: Scalar>(spec: &BlockSpec, seed: u64) -> Result<LayerGraph<T>> {
    let mut g = LayerGraph::new(spec.in_channels, seed);
    let out = append_block(&mut g, "block", spec, LayerGraph::<T>::INPUT)?;
    g.mark_output(out);
    Ok(g)
}

pub fn build_ghost_module<T: Scalar>(spec: &GhostModuleSpec, seed: u64) -> Result<LayerGraph<T>> {
    let mut g = LayerGraph::new(spec.in_channels, seed);
    let out = append_ghost_module(&mut g, "ghost", spec, LayerGraph::<T>::INPUT)?;
    g.mark_output(out);
    Ok(g)
}

/// Forward through a block graph; blocks never change spatial size.
pub fn block_forward<T: Scalar>(
    block: &LayerGraph<T>,
    input: &Tensor<T>,
    mode: NormMode,
) -> Result<ForwardPass<T>> {
    let pass = block.forward(input, mode)?;
    let out = pass.outputs()[0].shape();
    let s = input.shape();
    if (out.height, out.width) != (s.height, s.width) {
        return Err(shape_err!("block changed spatial size {s} → {out}"));
    }
    Ok(pass)
}

pub fn block_backward<T: Scalar>(
    block: &LayerGraph<T>,
    pass: &ForwardPass<T>,
    grad_out: Tensor<T>,
) -> Result<Gradients<T>> {
    block.backward(pass, &[Some(grad_out)])
}

// ---- closed-form accounting -----------------------------------------------

/// Parameters of a batch norm over `c` channels (scale and shift).
const fn bn(c: usize) -> usize {
    2 * c
}

/// Conv weights per output pixel of a depthwise-separable stage.
const fn separable_weights(cin: usize, cout: usize) -> usize {
    cin * 9 + cin * cout
}

/// Primary 1×1 onto the intrinsic maps plus one 3×3 filter per ghost map.
const fn ghost_weights(cin: usize, cout: usize, ratio: usize) -> usize {
    let intrinsic = cout / ratio;
    cin * intrinsic + (cout - intrinsic) * 9
}

/// (conv weights, other learnable parameters) of a block, from the block
/// structure written out by hand rather than from a built graph.
fn closed_form(spec: &BlockSpec) -> (usize, usize) {
    let (cin, mid, cout) = (spec.in_channels, spec.mid_channels, spec.out_channels);
    let (skip_w, skip_b) = if spec.has_projection() {
        (cin * cout, cout)
    } else {
        (0, 0)
    };
    let (weights, other) = match spec.variant {
        Variant::Original => (
            cin * mid + mid * mid * 9 + mid * cout,
            bn(cin) + bn(mid) + bn(mid) + cout,
        ),
        Variant::Dw1 => (
            cin * mid + separable_weights(mid, mid) + mid * cout,
            bn(cin) + bn(mid) + bn(mid) + cout,
        ),
        Variant::Dw3 => (
            separable_weights(cin, mid) + separable_weights(mid, mid) + separable_weights(mid, cout),
            bn(cin) + bn(mid) + bn(mid) + cout,
        ),
        Variant::Ghost => {
            let r = spec.ghost_ratio;
            // only the second module carries biases: one per output map
            (
                ghost_weights(cin, mid, r) + ghost_weights(mid, cout, r),
                bn(cin) + bn(mid) + cout,
            )
        }
        Variant::Multidilated => {
            let k = spec.dilations.len();
            let merged = match spec.merge {
                Merge::Concat => k * mid,
                Merge::Sum => mid,
            };
            (
                k * (cin * mid + separable_weights(mid, mid)) + merged * cout,
                bn(cin) + k * bn(mid) + bn(merged) + cout,
            )
        }
    };
    (weights + skip_w, other + skip_b)
}

/// Learnable parameters from the closed form alone.
pub fn block_param_count_closed_form(spec: &BlockSpec) -> usize {
    let (w, o) = closed_form(spec);
    w + o
}

/// Multiply-accumulates at `h×w` from the closed form alone. Every stage is
/// stride 1 with same padding, so each conv weight is used once per pixel.
pub fn block_mac_count_closed_form(spec: &BlockSpec, h: usize, w: usize) -> u64 {
    closed_form(spec).0 as u64 * (h * w) as u64
}

/// Enumerated parameter count of the built block, checked against the closed form.
pub fn block_param_count(spec: &BlockSpec) -> Result<usize> {
    let g = build_block::<f32>(spec, 0)?;
    let enumerated = g.param_count();
    let closed = block_param_count_closed_form(spec);
    if enumerated != closed {
        return Err(Error::Consistency(format!(
            "{} block {}→{}: enumerated {enumerated} parameters, closed form {closed}",
            spec.variant, spec.in_channels, spec.out_channels
        )));
    }
    Ok(enumerated)
}

/// Enumerated MAC count of the built block at `h×w`, checked against the closed form.
pub fn block_mac_count(spec: &BlockSpec, h: usize, w: usize) -> Result<u64> {
    if h == 0 || w == 0 {
        return Err(Error::Geometry(format!("MAC count needs h, w ≥ 1, got {h}×{w}")));
    }
    let g = build_block::<f32>(spec, 0)?;
    let enumerated = g.mac_count(h, w)?;
    let closed = block_mac_count_closed_form(spec, h, w);
    if enumerated != closed {
        return Err(Error::Consistency(format!(
            "{} block {}→{} at {h}×{w}: enumerated {enumerated} MACs, closed form {closed}",
            spec.variant, spec.in_channels, spec.out_channels
        )));
    }
    Ok(enumerated)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::ParamKind;

    fn conv_weights_under(g: &LayerGraph<f32>, prefix: &str) -> usize {
        g.params()
            .iter()
            .filter(|p| p.name.starts_with(prefix) && p.kind == ParamKind::Weight)
            .map(|p| p.value.len())
            .sum()
    }

    #[test]
    fn original_block_weight_counts() {
        let spec = BlockSpec::new(Variant::Original, 64, 128);
        let g = build_block::<f32>(&spec, 0).unwrap();
        let main: usize = ["block.conv1", "block.conv2", "block.conv3"]
            .iter()
            .map(|p| conv_weights_under(&g, p))
            .sum();
        assert_eq!(main, 49_152);
        assert_eq!(conv_weights_under(&g, "block.skip"), 8_192);
    }

    #[test]
    fn separable_stage_weights() {
        let spec = BlockSpec::new(Variant::Dw1, 128, 128);
        let g = build_block::<f32>(&spec, 0).unwrap();
        assert_eq!(conv_weights_under(&g, "block.conv2"), 4_672);
    }

    #[test]
    fn ghost_module_weights() {
        let g = build_ghost_module::<f32>(&GhostModuleSpec::new(64, 128, 2), 0).unwrap();
        assert_eq!(g.param_count(), 4_672);
        let single = build_ghost_module::<f32>(&GhostModuleSpec::new(64, 128, 1), 0).unwrap();
        assert_eq!(single.param_count(), 64 * 128);
        assert!(single.param("ghost.cheap.weight").is_none());
    }

    #[test]
    fn ghost_primary_maps_come_first() {
        let spec = GhostModuleSpec::new(6, 8, 2);
        let g = build_ghost_module::<f64>(&spec, 4).unwrap();
        let x = Tensor::from_fn([1, 6, 5, 5], |_, c, y, xx| (c as f64 - 2.5) * (y as f64 - xx as f64));
        let pass = g.forward(&x, NormMode::Eval).unwrap();
        let primary = pass.activation(g.nodes().iter().position(|n| n.name == "ghost.primary").unwrap()).unwrap();
        let out = pass.outputs()[0];
        assert_eq!(out.narrow_channels(0, 4).unwrap(), *primary);
    }

    #[test]
    fn lightweight_ordering() {
        let count = |v| block_param_count(&BlockSpec::new(v, 128, 128).with_mid(64)).unwrap();
        let [orig, dw1, dw3, ghost, md] = Variant::ALL.map(count);
        assert!(ghost < dw1 && dw1 < dw3 && dw3 < orig && orig < md, "{ghost} {dw1} {dw3} {orig} {md}");
        assert!(orig - dw1 < 64 * 64 * 9);
    }

    #[test]
    fn closed_forms_agree() {
        for v in Variant::ALL {
            for (cin, cout) in [(64, 128), (128, 128), (32, 128), (128, 256)] {
                let spec = BlockSpec::new(v, cin, cout);
                block_param_count(&spec).unwrap();
                block_mac_count(&spec, 8, 6).unwrap();
            }
            let sum = BlockSpec::new(v, 16, 16).with_merge(Merge::Sum);
            block_param_count(&sum).unwrap();
        }
    }

    #[test]
    fn separable_macs() {
        let mut g = LayerGraph::<f32>::new(64, 0);
        let out = append_separable(&mut g, "ds", 64, 128, 1, false, 0).unwrap();
        g.mark_output(out);
        assert_eq!(g.mac_count(64, 64).unwrap(), (64 * 9 + 64 * 128) * 64 * 64);
    }

    #[test]
    fn zero_main_path_is_identity() {
        for v in Variant::ALL {
            let spec = BlockSpec::new(v, 8, 8);
            let mut g = build_block::<f64>(&spec, 11).unwrap();
            for p in g.params_mut() {
                if matches!(p.kind, ParamKind::Weight | ParamKind::Bias) {
                    p.value.fill(0.0);
                }
            }
            let x = Tensor::from_fn([2, 8, 6, 6], |n, c, y, xx| (n + c) as f64 * 0.1 - (y * xx) as f64);
            for mode in [NormMode::Train, NormMode::Eval] {
                let pass = block_forward(&g, &x, mode).unwrap();
                assert_eq!(*pass.outputs()[0], x, "{v} {mode:?}");
            }
        }
    }

    #[test]
    fn block_shapes() {
        let x = Tensor::<f32>::zeros([2, 64, 16, 16]);
        for v in Variant::ALL {
            let g = build_block::<f32>(&BlockSpec::new(v, 64, 128), 0).unwrap();
            let pass = block_forward(&g, &x, NormMode::Train).unwrap();
            assert_eq!(pass.outputs()[0].shape(), crate::tensor::Shape::new(2, 128, 16, 16));
            assert!(matches!(
                g.forward(&Tensor::zeros([2, 32, 16, 16]), NormMode::Eval),
                Err(Error::Shape(_))
            ));
        }
    }

    #[test]
    fn branch_build_order_is_irrelevant() {
        let spec = BlockSpec::new(Variant::Multidilated, 6, 6).with_mid(4);
        let build = |order: &[usize]| {
            let mut g = LayerGraph::<f64>::new(6, 21);
            let out = append_block_ordered(&mut g, "block", &spec, 0, order).unwrap();
            g.mark_output(out);
            g
        };
        let a = build(&[1, 2, 3]);
        let b = build(&[3, 1, 2]);
        let x = Tensor::from_fn([2, 6, 8, 8], |n, c, y, xx| ((n * 7 + c * 3 + y * 5 + xx) % 11) as f64 - 5.0);
        let ya = a.forward(&x, NormMode::Train).unwrap();
        let yb = b.forward(&x, NormMode::Train).unwrap();
        assert_eq!(ya.outputs()[0], yb.outputs()[0]);
    }

    #[test]
    fn unknown_variant_lists_names() {
        let err = "resnet".parse::<Variant>().unwrap_err().to_string();
        for v in Variant::ALL {
            assert!(err.contains(v.name()));
        }
    }
}
