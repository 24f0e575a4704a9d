//! Recursive hourglass assembly, the stem, stacked composition with
//! per-stack heatmap heads, and whole-network accounting.

use serde::{Deserialize, Serialize};

use crate::blocks::{
    append_block, block_mac_count_closed_form, block_param_count_closed_form, BlockSpec, Merge,
    Variant,
};
use crate::error::{Error, Result};
use crate::graph::{scoped, ForwardPass, LayerGraph, NodeId};
use crate::tensor::{ConvSpec, NormMode, Scalar, Tensor};

/// Width the first stem bottleneck reads when `reduced_stem` is on.
pub const REDUCED_STEM_WIDTH: usize = 32;

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub num_stacks: usize,
    pub variant: Variant,
    pub merge: Merge,
    /// Pooling levels per hourglass.
    pub hg_depth: usize,
    /// Stem conv output width, then stem bottleneck width.
    pub stem_channels: [usize; 2],
    pub hg_channels: usize,
    pub num_joints: usize,
    pub input_res: usize,
    pub heatmap_res: usize,
    pub reduced_stem: bool,
    pub blocks_per_scale: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            num_stacks: 1,
            variant: Variant::Original,
            merge: Merge::Concat,
            hg_depth: 4,
            stem_channels: [64, 128],
            hg_channels: 128,
            num_joints: 16,
            input_res: 256,
            heatmap_res: 64,
            reduced_stem: false,
            blocks_per_scale: 1,
        }
    }
}

impl NetworkConfig {
    pub fn new(num_stacks: usize, variant: Variant) -> Self {
        NetworkConfig {
            num_stacks,
            variant,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_stacks", self.num_stacks),
            ("hg_depth", self.hg_depth),
            ("stem_channels[0]", self.stem_channels[0]),
            ("stem_channels[1]", self.stem_channels[1]),
            ("hg_channels", self.hg_channels),
            ("num_joints", self.num_joints),
            ("input_res", self.input_res),
            ("heatmap_res", self.heatmap_res),
            ("blocks_per_scale", self.blocks_per_scale),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.input_res != 4 * self.heatmap_res {
            return Err(Error::Config(format!(
                "input_res {} must be 4 × heatmap_res {}",
                self.input_res, self.heatmap_res
            )));
        }
        let factor = 1usize
            .checked_shl(self.hg_depth as u32)
            .filter(|f| *f <= self.heatmap_res)
            .ok_or_else(|| {
                Error::Config(format!(
                    "hg_depth {} pools {}×{} below 1×1",
                    self.hg_depth, self.heatmap_res, self.heatmap_res
                ))
            })?;
        if !self.heatmap_res.is_multiple_of(factor) || self.heatmap_res / factor < 4 {
            return Err(Error::Config(format!(
                "hourglass bottoms out at {}×{}; needs an exact size of at least 4×4",
                self.heatmap_res as f64 / factor as f64,
                self.heatmap_res as f64 / factor as f64
            )));
        }
        self.block(self.hg_channels, self.hg_channels).validate()?;
        self.block(self.stem_width(), self.stem_channels[1]).validate()
    }

    /// Channels entering the first stem bottleneck.
    pub fn stem_width(&self) -> usize {
        if self.reduced_stem {
            REDUCED_STEM_WIDTH
        } else {
            self.stem_channels[0]
        }
    }

    /// Spatial size at the innermost hourglass level.
    pub fn innermost_res(&self) -> usize {
        self.heatmap_res >> self.hg_depth
    }

    pub fn block(&self, in_channels: usize, out_channels: usize) -> BlockSpec {
        BlockSpec::new(self.variant, in_channels, out_channels).with_merge(self.merge)
    }

    /// The stem conv followed by its three bottlenecks: (input width, output width, resolution).
    fn stem_blocks(&self) -> [(usize, usize, usize); 3] {
        let half = self.input_res / 2;
        let c1 = self.stem_channels[1];
        [
            (self.stem_width(), c1, half),
            (c1, c1, self.heatmap_res),
            (c1, self.hg_channels, self.heatmap_res),
        ]
    }

    fn stem_conv(&self) -> ConvSpec {
        ConvSpec::new(3, self.stem_width(), 7)
            .with_stride(2)
            .with_padding(3)
    }
}

/// Configuration keys understood by [`NetworkConfig::set`], in display order.
pub const NETWORK_KEYS: [&str; 11] = [
    "num_stacks",
    "variant",
    "merge",
    "hg_depth",
    "stem_channels",
    "hg_channels",
    "num_joints",
    "input_res",
    "heatmap_res",
    "reduced_stem",
    "blocks_per_scale",
];

/// The variant names accepted in configuration; `ghost_reduced` is the ghost
/// variant with a reduced stem.
pub const VARIANT_NAMES: [&str; 6] = ["original", "dw1", "dw3", "ghost", "ghost_reduced", "multidilated"];

fn parse_value<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

impl NetworkConfig {
    /// Sets one configuration key from its text form. Returns `Ok(false)` if
    /// `key` is not a network key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let value = value.trim();
        match key {
            "num_stacks" => self.num_stacks = parse_value(key, value)?,
            "variant" => {
                if value == "ghost_reduced" {
                    self.variant = Variant::Ghost;
                    self.reduced_stem = true;
                } else {
                    self.variant = value.parse().map_err(|_| {
                        Error::Config(format!(
                            "unknown variant `{value}`; valid: {}",
                            VARIANT_NAMES.join(", ")
                        ))
                    })?;
                }
            }
            "merge" => self.merge = value.parse()?,
            "hg_depth" => self.hg_depth = parse_value(key, value)?,
            "stem_channels" => {
                let parts: Vec<usize> = value
                    .split(',')
                    .map(|v| parse_value(key, v.trim()))
                    .collect::<Result<_>>()?;
                self.stem_channels = parts
                    .try_into()
                    .map_err(|_| Error::Config(format!("`{key}` needs two widths, got `{value}`")))?;
            }
            "hg_channels" => self.hg_channels = parse_value(key, value)?,
            "num_joints" => self.num_joints = parse_value(key, value)?,
            "input_res" => self.input_res = parse_value(key, value)?,
            "heatmap_res" => self.heatmap_res = parse_value(key, value)?,
            "reduced_stem" => self.reduced_stem = parse_value(key, value)?,
            "blocks_per_scale" => self.blocks_per_scale = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Every key with its text form; `set` accepts these back unchanged.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.num_stacks.to_string(),
            self.variant.to_string(),
            self.merge.name().to_string(),
            self.hg_depth.to_string(),
            format!("{},{}", self.stem_channels[0], self.stem_channels[1]),
            self.hg_channels.to_string(),
            self.num_joints.to_string(),
            self.input_res.to_string(),
            self.heatmap_res.to_string(),
            self.reduced_stem.to_string(),
            self.blocks_per_scale.to_string(),
        ];
        NETWORK_KEYS.into_iter().zip(values).collect()
    }
}

fn append_blocks<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    spec: &BlockSpec,
    count: usize,
    mut x: NodeId,
) -> Result<NodeId> {
    for j in 0..count {
        x = append_block(g, &format!("{prefix}.b{j}"), spec, x)?;
    }
    Ok(x)
}

/// Appends one hourglass reading from `input`. Level `l` runs at `1/2^l` of
/// the input resolution; the output has the input's shape.
pub fn append_hourglass<T: Scalar>(
    g: &mut LayerGraph<T>,
    prefix: &str,
    depth: usize,
    spec: &BlockSpec,
    blocks_per_scale: usize,
    input: NodeId,
) -> Result<NodeId> {
    fn level<T: Scalar>(
        g: &mut LayerGraph<T>,
        prefix: &str,
        l: usize,
        depth: usize,
        spec: &BlockSpec,
        bps: usize,
        x: NodeId,
    ) -> Result<NodeId> {
        let p = format!("{prefix}.l{l}");
        let skip = append_blocks(g, &scoped(&p, "skip"), spec, bps, x)?;
        let low = g.maxpool(&scoped(&p, "pool"), x)?;
        let low = append_blocks(g, &scoped(&p, "down"), spec, bps, low)?;
        let low = if l + 1 < depth {
            level(g, prefix, l + 1, depth, spec, bps, low)?
        } else {
            append_blocks(g, &scoped(&p, "bottom"), spec, bps, low)?
        };
        let low = append_blocks(g, &scoped(&p, "up"), spec, bps, low)?;
        let up = g.upsample(&scoped(&p, "upsample"), low)?;
        g.add(&scoped(&p, "merge"), skip, up)
    }
    if depth == 0 {
        return Err(Error::Config("hourglass depth must be ≥ 1".into()));
    }
    if spec.in_channels != spec.out_channels {
        return Err(Error::Config(format!(
            "hourglass blocks must preserve width, got {}→{}",
            spec.in_channels, spec.out_channels
        )));
    }
    level(g, prefix, 0, depth, spec, blocks_per_scale, input)
}

/// A standalone hourglass graph of the given width.
pub fn build_hourglass<T: Scalar>(
    depth: usize,
    channels: usize,
    variant: Variant,
    blocks_per_scale: usize,
    seed: u64,
) -> Result<LayerGraph<T>> {
    let mut g = LayerGraph::new(channels, seed);
    let spec = BlockSpec::new(variant, channels, channels);
    let out = append_hourglass(&mut g, "hourglass", depth, &spec, blocks_per_scale, 0)?;
    g.mark_output(out);
    Ok(g)
}

/// A stacked hourglass network; its graph outputs are the per-stack heatmaps.
#[derive(Clone, Debug)]
pub struct StackedHourglass<T = f32> {
    config: NetworkConfig,
    graph: LayerGraph<T>,
}

/// Top-level sub-structures, in registry order.
pub fn sub_structures(config: &NetworkConfig) -> Vec<String> {
    let mut v = vec!["stem".to_string()];
    for i in 0..config.num_stacks {
        v.push(format!("stack{i}.hourglass"));
        v.push(format!("stack{i}.post"));
        v.push(format!("stack{i}.head"));
        if i + 1 < config.num_stacks {
            v.push(format!("stack{i}.remap"));
        }
    }
    v
}

pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<StackedHourglass<T>> {
    config.validate()?;
    let mut g = LayerGraph::new(3, seed);
    let w = config.hg_channels;
    let j = config.num_joints;

    let mut x = g.conv("stem.conv", config.stem_conv(), 0)?;
    x = g.bn_relu("stem.conv_act", x)?;
    let [b1, b2, b3] = config.stem_blocks();
    x = append_block(&mut g, "stem.block1", &config.block(b1.0, b1.1), x)?;
    x = g.maxpool("stem.pool", x)?;
    x = append_block(&mut g, "stem.block2", &config.block(b2.0, b2.1), x)?;
    x = append_block(&mut g, "stem.block3", &config.block(b3.0, b3.1), x)?;

    let spec = config.block(w, w);
    for i in 0..config.num_stacks {
        let p = format!("stack{i}");
        let hg = append_hourglass(
            &mut g,
            &format!("{p}.hourglass"),
            config.hg_depth,
            &spec,
            config.blocks_per_scale,
            x,
        )?;
        let y = append_blocks(&mut g, &format!("{p}.post"), &spec, config.blocks_per_scale, hg)?;
        let y = g.conv(&format!("{p}.head.fc"), ConvSpec::pointwise(w, w), y)?;
        let y = g.bn_relu(&format!("{p}.head.fc_act"), y)?;
        let score = g.conv(
            &format!("{p}.head.score"),
            ConvSpec::pointwise(w, j).with_bias(true),
            y,
        )?;
        g.mark_output(score);
        if i + 1 < config.num_stacks {
            let f = g.conv(
                &format!("{p}.remap.features"),
                ConvSpec::pointwise(w, w).with_bias(true),
                y,
            )?;
            let h = g.conv(
                &format!("{p}.remap.heatmaps"),
                ConvSpec::pointwise(j, w).with_bias(true),
                score,
            )?;
            let merged = g.add(&format!("{p}.remap.add_features"), x, f)?;
            x = g.add(&format!("{p}.remap.add_heatmaps"), merged, h)?;
        }
    }
    Ok(StackedHourglass { config: config.clone(), graph: g })
}

impl<T: Scalar> StackedHourglass<T> {
    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn graph(&self) -> &LayerGraph<T> {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut LayerGraph<T> {
        &mut self.graph
    }

    pub fn seed(&self) -> u64 {
        self.graph.seed()
    }

    pub fn forward(&self, input: &Tensor<T>, mode: NormMode) -> Result<ForwardPass<T>> {
        self.graph.forward(input, mode)
    }

    /// Eval-mode heatmaps, one tensor per stack.
    pub fn infer(&self, input: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        self.graph.infer(input)
    }

    /// Learnable parameters by registry enumeration.
    pub fn param_count(&self) -> usize {
        self.graph.param_count()
    }

    /// Convolution MACs for one `input_res × input_res` sample, by enumeration.
    pub fn mac_count(&self) -> Result<u64> {
        self.graph
            .mac_count(self.config.input_res, self.config.input_res)
    }

    /// Learnable parameters per top-level sub-structure, in registry order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        sub_structures(&self.config)
            .into_iter()
            .map(|name| {
                let n = self.graph.param_count_under(&format!("{name}."));
                (name, n)
            })
            .collect()
    }
}

/// Learnable parameters of the network described by `config`, computed
/// from per-component formulas without building anything.
pub fn closed_form_param_count(config: &NetworkConfig) -> usize {
    let (w, j) = (config.hg_channels, config.num_joints);
    let s = config.num_stacks;
    let stem_conv = 3 * 49 * config.stem_width() + 2 * config.stem_width();
    let stem_blocks: usize = config
        .stem_blocks()
        .iter()
        .map(|&(cin, cout, _)| block_param_count_closed_form(&config.block(cin, cout)))
        .sum();
    let block = block_param_count_closed_form(&config.block(w, w));
    let hourglass_blocks = (3 * config.hg_depth + 1) * config.blocks_per_scale;
    let post = config.blocks_per_scale * block;
    let head = w * w + 2 * w + w * j + j;
    let remap = (w * w + w) + (j * w + w);
    stem_conv + stem_blocks + s * (hourglass_blocks * block + post + head) + (s - 1) * remap
}

/// Convolution MACs for one sample, from per-component formulas.
pub fn closed_form_mac_count(config: &NetworkConfig) -> u64 {
    let (w, j) = (config.hg_channels as u64, config.num_joints as u64);
    let area = |r: usize| (r * r) as u64;
    let half = config.input_res / 2;
    let stem_conv = 3 * 49 * config.stem_width() as u64 * area(half);
    let stem_blocks: u64 = config
        .stem_blocks()
        .iter()
        .map(|&(cin, cout, r)| block_mac_count_closed_form(&config.block(cin, cout), r, r))
        .sum();
    let spec = config.block(config.hg_channels, config.hg_channels);
    let bps = config.blocks_per_scale as u64;
    let at = |r: usize| block_mac_count_closed_form(&spec, r, r);
    let r = config.heatmap_res;
    let mut hourglass = 0;
    for l in 0..config.hg_depth {
        // skip at this level; down and up one level lower
        hourglass += bps * (at(r >> l) + 2 * at(r >> (l + 1)));
    }
    hourglass += bps * at(r >> config.hg_depth);
    let post = bps * at(r);
    let head = (w * w + w * j) * area(r);
    let remap = (w * w + j * w) * area(r);
    let s = config.num_stacks as u64;
    stem_conv + stem_blocks + s * (hourglass + post + head) + (s - 1) * remap
}

/// Enumerated parameter count, audited against the closed form.
pub fn count_parameters<T: Scalar>(net: &StackedHourglass<T>) -> Result<usize> {
    let enumerated = net.param_count();
    let closed = closed_form_param_count(net.config());
    if enumerated != closed {
        return Err(Error::Consistency(format!(
            "network parameters: enumerated {enumerated}, closed form {closed}"
        )));
    }
    Ok(enumerated)
}

/// Enumerated MAC count at the configured input resolution, audited against the closed form.
pub fn count_macs<T: Scalar>(net: &StackedHourglass<T>) -> Result<u64> {
    let enumerated = net.mac_count()?;
    let closed = closed_form_mac_count(net.config());
    if enumerated != closed {
        return Err(Error::Consistency(format!(
            "network MACs: enumerated {enumerated}, closed form {closed}"
        )));
    }
    Ok(enumerated)
}

/// One configuration from the published results roster.
#[derive(Clone, Debug, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub label: &'static str,
    pub config: NetworkConfig,
    /// Published parameter figure, in millions.
    pub published_millions: f64,
}

/// The ten published configurations, in table row order.
pub fn table1_presets() -> Vec<Preset> {
    let cfg = |stacks, variant| NetworkConfig::new(stacks, variant);
    let reduced = NetworkConfig {
        reduced_stem: true,
        ..cfg(1, Variant::Ghost)
    };
    vec![
        Preset { name: "baseline8", label: "8-Stack Hourglass", config: cfg(8, Variant::Original), published_millions: 97.7 },
        Preset { name: "hg1", label: "Single Hourglass", config: cfg(1, Variant::Original), published_millions: 12.6 },
        Preset { name: "hg2", label: "2-Stack Hourglass", config: cfg(2, Variant::Original), published_millions: 24.8 },
        Preset { name: "dw1_1", label: "1 Depthwise Separable (1 stack)", config: cfg(1, Variant::Dw1), published_millions: 5.0 },
        Preset { name: "dw3_1", label: "3 Depthwise Separable (1 stack)", config: cfg(1, Variant::Dw3), published_millions: 5.4 },
        Preset { name: "ghost_1", label: "Ghost Bottleneck (1 stack)", config: cfg(1, Variant::Ghost), published_millions: 2.2 },
        Preset { name: "ghost_reduced_1", label: "Ghost + Reduced Features (1 stack)", config: reduced, published_millions: 2.1 },
        Preset { name: "multidilated_1", label: "Multidilated (1 stack)", config: cfg(1, Variant::Multidilated), published_millions: 13.7 },
        Preset { name: "dw1_2", label: "1 Depthwise Separable (2 stacks)", config: cfg(2, Variant::Dw1), published_millions: 9.9 },
        Preset { name: "multidilated_2", label: "Multidilated (2 stacks)", config: cfg(2, Variant::Multidilated), published_millions: 26.9 },
    ]
}

/// Looks up a roster entry by name; `{variant}_{n}stack` spellings such as
/// `dw1_1stack` or `original_8stack` are accepted too.
pub fn preset(name: &str) -> Option<Preset> {
    let canonical = match name.rsplit_once('_') {
        Some((variant, stacks)) if stacks.ends_with("stack") => {
            let n = stacks.trim_end_matches("stack");
            match (variant, n) {
                ("original", "8") => "baseline8".to_string(),
                ("original", _) => format!("hg{n}"),
                _ => format!("{variant}_{n}"),
            }
        }
        _ => name.to_string(),
    };
    table1_presets().into_iter().find(|p| p.name == canonical)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_invariants() {
        assert!(NetworkConfig::default().validate().is_ok());
        assert_eq!(NetworkConfig::default().innermost_res(), 4);
        let bad_ratio = NetworkConfig {
            input_res: 128,
            ..Default::default()
        };
        assert!(matches!(bad_ratio.validate(), Err(Error::Config(_))));
        let too_deep = NetworkConfig {
            hg_depth: 5,
            ..Default::default()
        };
        assert!(matches!(too_deep.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn head_contribution() {
        assert_eq!(ConvSpec::pointwise(128, 16).with_bias(true).param_count(), 2_064);
    }

    #[test]
    fn presets_in_roster_order() {
        let names: Vec<_> = table1_presets().iter().map(|p| p.name).collect();
        assert_eq!(
            names,
            [
                "baseline8",
                "hg1",
                "hg2",
                "dw1_1",
                "dw3_1",
                "ghost_1",
                "ghost_reduced_1",
                "multidilated_1",
                "dw1_2",
                "multidilated_2"
            ]
        );
        for p in table1_presets() {
            p.config.validate().unwrap();
        }
    }

    #[test]
    fn single_stack_has_no_remap() {
        let net = build_network::<f32>(&NetworkConfig::default(), 1).unwrap();
        assert_eq!(net.graph().outputs().len(), 1);
        assert!(net.graph().params().iter().all(|p| !p.name.contains("remap")));
    }

    #[test]
    fn presets_audit_against_closed_forms() {
        for p in table1_presets() {
            for width in [128, 256] {
                let config = NetworkConfig { hg_channels: width, ..p.config.clone() };
                let net = build_network::<f32>(&config, 0).unwrap();
                let n = count_parameters(&net).unwrap();
                count_macs(&net).unwrap();
                let itemized: usize = net.param_breakdown().iter().map(|(_, c)| c).sum();
                assert_eq!(itemized, n, "{}", p.name);
            }
        }
    }

    #[test]
    fn pairs_round_trip() {
        let mut c = NetworkConfig::default();
        c.set("variant", "ghost_reduced").unwrap();
        assert!(c.reduced_stem && c.variant == Variant::Ghost);
        c.set("stem_channels", "32, 96").unwrap();
        c.set("merge", "sum").unwrap();
        let mut d = NetworkConfig::default();
        for (k, v) in c.to_pairs() {
            assert!(d.set(k, &v).unwrap());
        }
        assert_eq!(c, d);
        assert!(!d.set("lr", "1").unwrap());
        let err = d.set("variant", "resnet").unwrap_err().to_string();
        assert!(VARIANT_NAMES.iter().all(|v| err.contains(v)));
    }

    #[test]
    fn audit_flags_a_graph_that_disagrees_with_its_config() {
        let mut net = build_network::<f32>(&NetworkConfig::new(1, Variant::Dw1), 0).unwrap();
        net.config.num_stacks = 2;
        assert!(matches!(count_parameters(&net), Err(Error::Consistency(_))));
        assert!(matches!(count_macs(&net), Err(Error::Consistency(_))));
    }

    #[test]
    fn preset_aliases() {
        assert_eq!(preset("dw1_1stack").unwrap().name, "dw1_1");
        assert_eq!(preset("original_1stack").unwrap().name, "hg1");
        assert_eq!(preset("original_8stack").unwrap().name, "baseline8");
        assert_eq!(preset("multidilated_2stack").unwrap().name, "multidilated_2");
        assert!(preset("dw1_3stack").is_none());
        assert!(preset("nope").is_none());
    }
}
