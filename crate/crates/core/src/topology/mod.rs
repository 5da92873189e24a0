//! Network configuration and the multi-resolution backbone.
//!
//! Branch `r` carries `C * 2^r` channels at `1 / 2^(r+2)` of the input
//! resolution. The backbone is stem -> stage 1 -> (transition -> stage) x 3,
//! followed by the configured head.

mod blocks;
pub mod presets;

pub use blocks::{
    basic_unit, bottleneck, build_branch_units, build_fusion, build_stage, build_stage1, build_stem,
    build_transition, FusionStyle,
};

use crate::error::{Error, Result};
use crate::graph::{Chw, GraphBuilder, LayerGraph, NodeId};
use crate::heads;
use crate::kernels::batchnorm::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::kernels::UpsampleMode;
use crate::tensor::Scalar;

pub const MAX_BRANCHES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum HeadKind {
    V1,
    V1h,
    V2,
    V2p,
    ClsC,
    ClsCi,
    ClsCii,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::V1,
        HeadKind::V1h,
        HeadKind::V2,
        HeadKind::V2p,
        HeadKind::ClsC,
        HeadKind::ClsCi,
        HeadKind::ClsCii,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            HeadKind::V1 => "v1",
            HeadKind::V1h => "v1h",
            HeadKind::V2 => "v2",
            HeadKind::V2p => "v2p",
            HeadKind::ClsC => "cls-c",
            HeadKind::ClsCi => "cls-ci",
            HeadKind::ClsCii => "cls-cii",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        HeadKind::ALL.into_iter().find(|h| h.as_str() == s.to_ascii_lowercase())
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, HeadKind::ClsC | HeadKind::ClsCi | HeadKind::ClsCii)
    }

    /// Dense per-pixel output at 1/4 resolution.
    pub fn is_dense(&self) -> bool {
        matches!(self, HeadKind::V1 | HeadKind::V1h | HeadKind::V2)
    }
}

impl std::fmt::Display for HeadKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkConfig {
    /// Width C of the highest-resolution branch.
    pub width: usize,
    /// Multi-resolution blocks in stages 2, 3, 4.
    pub stage_blocks: [usize; 3],
    pub units_per_branch: usize,
    pub stage1_units: usize,
    pub stage1_bottleneck_width: usize,
    pub stem_width: usize,
    pub head: HeadKind,
    pub out_dim: usize,
    pub pyramid_levels: usize,
    /// (H, W).
    pub input_size: (usize, usize),
    pub input_channels: usize,
    pub fusion_upsample: UpsampleMode,
    pub head_upsample: UpsampleMode,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            width: 18,
            stage_blocks: [1, 4, 3],
            units_per_branch: 4,
            stage1_units: 4,
            stage1_bottleneck_width: 64,
            stem_width: 64,
            head: HeadKind::V2,
            out_dim: 19,
            pyramid_levels: 5,
            input_size: (224, 224),
            input_channels: 3,
            fusion_upsample: UpsampleMode::Nearest,
            head_upsample: UpsampleMode::Bilinear,
            bn_momentum: DEFAULT_MOMENTUM,
            bn_epsilon: DEFAULT_EPSILON,
        }
    }
}

impl NetworkConfig {
    pub fn branch_width(&self, r: usize) -> usize {
        self.width << r
    }

    pub fn branch_widths(&self, count: usize) -> Vec<usize> {
        (0..count).map(|r| self.branch_width(r)).collect()
    }

    /// Spatial size of branch `r` for the configured input.
    pub fn branch_size(&self, r: usize) -> (usize, usize) {
        (self.input_size.0 >> (r + 2), self.input_size.1 >> (r + 2))
    }

    /// Concatenated width of the aggregated representation, `15C`.
    pub fn mix_width(&self) -> usize {
        (0..MAX_BRANCHES).map(|r| self.branch_width(r)).sum()
    }

    /// Input divisibility required by the network and head.
    pub fn required_divisor(&self) -> usize {
        match self.head {
            HeadKind::V2p => 32usize.max(1 << (self.pyramid_levels + 1)),
            _ => 32,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("units_per_branch", self.units_per_branch),
            ("stage1_units", self.stage1_units),
            ("stage1_bottleneck_width", self.stage1_bottleneck_width),
            ("stem_width", self.stem_width),
            ("out_dim", self.out_dim),
            ("input_channels", self.input_channels),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::invalid("config", format!("{field} must be positive")));
            }
        }
        if self.stage_blocks.contains(&0) {
            return Err(Error::invalid("config", "stage_blocks entries must be positive"));
        }
        if self.head == HeadKind::V2p && self.pyramid_levels == 0 {
            return Err(Error::invalid("config", "pyramid_levels must be positive"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum < 1.0) {
            return Err(Error::invalid("config", "bn_momentum must lie in (0, 1)"));
        }
        if !(self.bn_epsilon > 0.0) {
            return Err(Error::invalid("config", "bn_epsilon must be positive"));
        }
        let (h, w) = self.input_size;
        let d = self.required_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(Error::shape(
                "config",
                format!("input {h}x{w} must be a positive multiple of {d}"),
            ));
        }
        Ok(())
    }

    pub fn input_chw(&self) -> Chw {
        Chw::new(self.input_channels, self.input_size.0, self.input_size.1)
    }
}

/// One feature map per active resolution, highest resolution first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSet {
    pub nodes: Vec<NodeId>,
}

impl BranchSet {
    pub fn new(nodes: Vec<NodeId>) -> Self {
        BranchSet { nodes }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shapes<T: Scalar>(&self, b: &GraphBuilder<T>) -> Vec<Chw> {
        self.nodes.iter().map(|&n| b.shape(n)).collect()
    }

    /// Checks the width and resolution law against `config`.
    pub fn check<T: Scalar>(&self, b: &GraphBuilder<T>, config: &NetworkConfig) -> Result<()> {
        for (r, s) in self.shapes(b).into_iter().enumerate() {
            let (h, w) = config.branch_size(r);
            let want = Chw::new(config.branch_width(r), h, w);
            if s != want {
                return Err(Error::shape("branches", format!("branch {r} is {s}, expected {want}")));
            }
        }
        Ok(())
    }
}

/// Stem, stage 1 and the three multi-resolution stages. Returns the four
/// branches.
pub fn build_backbone<T: Scalar>(b: &mut GraphBuilder<T>, x: NodeId, config: &NetworkConfig) -> Result<BranchSet> {
    build_backbone_with(b, x, config, FusionStyle::Full)
}

pub fn build_backbone_with<T: Scalar>(
    b: &mut GraphBuilder<T>,
    x: NodeId,
    config: &NetworkConfig,
    style: FusionStyle,
) -> Result<BranchSet> {
    let stem = build_stem(b, x, config)?;
    let s1 = build_stage1(b, stem, config)?;
    let mut branches = BranchSet::new(vec![s1]);
    for (k, &blocks) in config.stage_blocks.iter().enumerate() {
        let stage = k + 2;
        branches = build_transition(b, &branches, stage, config)?;
        branches = build_stage(b, &branches, stage, blocks, config, style)?;
        branches.check(b, config)?;
    }
    Ok(branches)
}

/// Full network: backbone and head. Outputs are named `branch0..branch3`
/// plus the head outputs (`logits`, `embedding`, or `p2..`).
pub fn build_network<T: Scalar>(config: &NetworkConfig, seed: u64) -> Result<LayerGraph<T>> {
    build_network_with(GraphBuilder::new(seed), config, FusionStyle::Full)
}

/// Zero-initialized network for static analysis.
pub fn build_skeleton<T: Scalar>(config: &NetworkConfig) -> Result<LayerGraph<T>> {
    build_network_with(GraphBuilder::new(0).skeleton(), config, FusionStyle::Full)
}

pub fn build_network_with<T: Scalar>(
    b: GraphBuilder<T>,
    config: &NetworkConfig,
    style: FusionStyle,
) -> Result<LayerGraph<T>> {
    config.validate()?;
    let mut b = b.with_bn(config.bn_momentum, config.bn_epsilon);
    let x = b.input(config.input_chw());
    let branches = build_backbone_with(&mut b, x, config, style)?;
    for (r, &n) in branches.nodes.iter().enumerate() {
        b.mark_output(&format!("branch{r}"), n);
    }
    heads::build_head(&mut b, &branches, config)?;
    b.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Shape4, Tensor};

    fn tiny() -> NetworkConfig {
        presets::tiny()
    }

    #[test]
    fn head_names_round_trip() {
        for h in HeadKind::ALL {
            assert_eq!(HeadKind::parse(h.as_str()), Some(h));
        }
        assert_eq!(HeadKind::parse("V2"), Some(HeadKind::V2));
        assert_eq!(HeadKind::parse("v3"), None);
    }

    #[test]
    fn w18_branch_shapes_at_224() {
        let config = NetworkConfig {
            head: HeadKind::V2,
            ..NetworkConfig::default()
        };
        let g = build_skeleton::<f32>(&config).unwrap();
        let want = [(18, 56), (36, 28), (72, 14), (144, 7)];
        for (r, &(c, s)) in want.iter().enumerate() {
            let id = g.output_id(&format!("branch{r}")).unwrap();
            assert_eq!(g.node(id).shape, Chw::new(c, s, s));
        }
        assert_eq!(config.mix_width(), 270);
    }

    #[test]
    fn stage_and_fusion_counts() {
        let g = build_skeleton::<f32>(&NetworkConfig::default()).unwrap();
        let fusions: std::collections::BTreeSet<String> = g
            .nodes()
            .iter()
            .filter_map(|n| n.name.split_once(".fuse").map(|(p, _)| p.to_string()))
            .collect();
        assert_eq!(fusions.len(), 1 + 4 + 3);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let mut config = tiny();
        config.input_size = (48, 32);
        assert!(build_network::<f64>(&config, 0).is_err());
        config.input_size = (30, 30);
        assert!(build_network::<f64>(&config, 0).is_err());
    }

    #[test]
    fn builds_are_deterministic() {
        let a = build_network::<f64>(&tiny(), 7).unwrap();
        let b = build_network::<f64>(&tiny(), 7).unwrap();
        assert_eq!(a.nodes(), b.nodes());
        assert_eq!(a.params(), b.params());
        let c = build_network::<f64>(&tiny(), 8).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn tiny_forward_is_finite_and_repeatable() {
        let mut g = build_network::<f64>(&tiny(), 1).unwrap();
        let x = Tensor::from_fn(Shape4::new(2, 3, 32, 32), |n, c, y, x| {
            ((n * 31 + c * 17 + y * 7 + x * 3) % 23) as f64 / 23.0 - 0.5
        });
        let a = g.forward(&x, crate::graph::Mode::Eval).unwrap();
        let b = g.forward(&x, crate::graph::Mode::Eval).unwrap();
        let out = g.output_id("logits").unwrap();
        assert!(a.value(out).all_finite());
        assert_eq!(a.value(out), b.value(out));
    }
}
