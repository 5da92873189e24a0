//! Static parameter and multiply-accumulate counting over a [`LayerGraph`].
//!
//! Only convolutions and linear layers contribute MACs. Parameters are conv
//! and linear weights and biases plus BN scale and shift; running statistics
//! are not parameters.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::graph::{Chw, GraphBuilder, Init, LayerGraph, Op};
use crate::kernels::ConvSpec;
use crate::tensor::Scalar;
use crate::topology::bottleneck;

/// Divisor turning a MAC count into the reported GFLOPs figure.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlopUnit {
    /// MACs / 1e9.
    DecimalMac,
    /// 2 * MACs / 1e9.
    DecimalFlop,
    /// MACs / 2^30.
    BinaryMac,
}

impl FlopUnit {
    pub const CANDIDATES: [FlopUnit; 3] = [FlopUnit::DecimalMac, FlopUnit::DecimalFlop, FlopUnit::BinaryMac];

    pub fn gflops(&self, macs: u64) -> f64 {
        let m = macs as f64;
        match self {
            FlopUnit::DecimalMac => m / 1e9,
            FlopUnit::DecimalFlop => 2.0 * m / 1e9,
            FlopUnit::BinaryMac => m / (1u64 << 30) as f64,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            FlopUnit::DecimalMac => "mac/1e9",
            FlopUnit::DecimalFlop => "2mac/1e9",
            FlopUnit::BinaryMac => "mac/2^30",
        }
    }
}

/// Reporting unit selected by [`calibrate`] against the deep-stem ResNet-50.
pub const REPORT_UNIT: FlopUnit = FlopUnit::BinaryMac;

/// Reference ResNet-50 GFLOPs at 224x224 used for calibration.
pub const RESNET50_GFLOPS: f64 = 3.82;
pub const RESNET50_PARAMS: f64 = 25.6e6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CostScope {
    Full,
    /// Everything except layers tagged with the `head` stage.
    BackboneOnly,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerCost {
    pub layer: String,
    pub stage: String,
    pub branch: Option<usize>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CostReport {
    pub per_layer: Vec<LayerCost>,
    pub input_size: (usize, usize),
    pub params: u64,
    pub macs: u64,
    pub unit: FlopUnit,
}

impl CostReport {
    pub fn gflops(&self) -> f64 {
        self.unit.gflops(self.macs)
    }

    /// (stage, params, macs) in first-appearance order.
    pub fn by_stage(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for l in &self.per_layer {
            match out.iter_mut().find(|(s, _, _)| *s == l.stage) {
                Some(e) => {
                    e.1 += l.params;
                    e.2 += l.macs;
                }
                None => out.push((l.stage.clone(), l.params, l.macs)),
            }
        }
        out
    }

    /// Layers belonging to fusion units.
    pub fn fusion_total(&self) -> (u64, u64) {
        self.per_layer
            .iter()
            .filter(|l| l.layer.contains(".fuse."))
            .fold((0, 0), |a, l| (a.0 + l.params, a.1 + l.macs))
    }

    /// Tab-separated: a header, then `layer stage branch params macs` rows.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("layer\tstage\tbranch\tparams\tmacs\n");
        for l in &self.per_layer {
            let branch = l.branch.map(|b| b.to_string()).unwrap_or_else(|| "-".into());
            let _ = writeln!(s, "{}\t{}\t{}\t{}\t{}", l.layer, l.stage, branch, l.params, l.macs);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "input_size = {}x{}", self.input_size.0, self.input_size.1);
        let _ = writeln!(s, "flop_unit = {}", self.unit.as_str());
        for (stage, p, m) in self.by_stage() {
            let _ = writeln!(
                s,
                "stage {stage:<12} params {p:>12} ({:>8.3}M)  macs {m:>16} ({:>9.3}G)",
                p as f64 / 1e6,
                self.unit.gflops(m)
            );
        }
        let (fp, fm) = self.fusion_total();
        let _ = writeln!(s, "fusion params = {fp}");
        let _ = writeln!(s, "fusion macs = {fm}");
        let _ = writeln!(s, "total params = {} ({:.3}M)", self.params, self.params as f64 / 1e6);
        let _ = writeln!(s, "total macs = {}", self.macs);
        let _ = writeln!(s, "total gflops = {:.3}", self.gflops());
        s
    }
}

fn conv_macs(spec: &ConvSpec, out: Chw) -> u64 {
    (spec.kernel.0 * spec.kernel.1 * spec.in_channels * spec.out_channels * out.h * out.w) as u64
}

fn node_cost(op: &Op, input: Option<Chw>, out: Chw) -> (u64, u64) {
    match op {
        Op::Conv { spec, .. } => (spec.param_count() as u64, conv_macs(spec, out)),
        Op::BatchNorm { .. } => (2 * out.c as u64, 0),
        Op::Linear { bias, .. } => {
            let d = input.map(|s| s.c * s.h * s.w).unwrap_or(0) as u64;
            let out_dim = out.c as u64;
            (d * out_dim + if bias.is_some() { out_dim } else { 0 }, d * out_dim)
        }
        _ => (0, 0),
    }
}

/// Per-layer costs at the given input size, derived from op specs and inferred
/// shapes only.
pub fn report<T: Scalar>(graph: &LayerGraph<T>, input_size: (usize, usize), scope: CostScope) -> Result<CostReport> {
    if input_size.0 == 0 || input_size.1 == 0 {
        return Err(Error::shape("cost", "zero input size"));
    }
    let shapes = graph.infer_shapes(input_size.0, input_size.1)?;
    let mut per_layer = Vec::new();
    for (id, node) in graph.nodes().iter().enumerate() {
        if scope == CostScope::BackboneOnly && node.tag.stage == "head" {
            continue;
        }
        let input = node.inputs.first().map(|&i| shapes[i]);
        let (params, macs) = node_cost(&node.op, input, shapes[id]);
        if params == 0 && macs == 0 {
            continue;
        }
        per_layer.push(LayerCost {
            layer: node.name.clone(),
            stage: node.tag.stage.clone(),
            branch: node.tag.branch,
            params,
            macs,
        });
    }
    let params = per_layer.iter().map(|l| l.params).sum();
    let macs = per_layer.iter().map(|l| l.macs).sum();
    Ok(CostReport {
        per_layer,
        input_size,
        params,
        macs,
        unit: REPORT_UNIT,
    })
}

pub fn count_params<T: Scalar>(graph: &LayerGraph<T>) -> u64 {
    let shapes: Vec<Chw> = graph.nodes().iter().map(|n| n.shape).collect();
    graph
        .nodes()
        .iter()
        .map(|n| node_cost(&n.op, n.inputs.first().map(|&i| shapes[i]), n.shape).0)
        .sum()
}

/// Trainable scalars counted from the instantiated tensors; the independent
/// path to [`count_params`].
pub fn count_params_dynamic<T: Scalar>(graph: &LayerGraph<T>) -> u64 {
    graph.trainable_scalars() as u64
}

pub fn count_flops<T: Scalar>(graph: &LayerGraph<T>, input_size: (usize, usize)) -> Result<u64> {
    Ok(report(graph, input_size, CostScope::Full)?.macs)
}

/// ResNet-50 with the 7x7 stem and max-pool replaced by two strided 3x3
/// convs; stride on the 3x3 of each bottleneck.
pub fn resnet50_deep_stem<T: Scalar>(seed: u64, skeleton: bool) -> Result<LayerGraph<T>> {
    let mut b = GraphBuilder::<T>::new(seed);
    if skeleton {
        b = b.skeleton();
    }
    let x = b.input(Chw::new(3, 224, 224));
    b.set_stage("stem");
    let mut y = b.scoped("stem", |b| {
        let y = b.conv_bn("conv1", x, ConvSpec::square(3, 64, 3, 2), true)?;
        b.conv_bn("conv2", y, ConvSpec::square(64, 64, 3, 2), true)
    })?;
    for (i, &(blocks, planes)) in [(3, 64), (4, 128), (6, 256), (3, 512)].iter().enumerate() {
        let stage = format!("layer{}", i + 1);
        b.set_stage(&stage);
        for k in 0..blocks {
            let stride = if k == 0 && i > 0 { 2 } else { 1 };
            y = bottleneck(&mut b, &format!("{stage}.{k}"), y, planes, 4 * planes, stride, k == 0)?;
        }
    }
    b.set_stage("head");
    let p = b.global_avg_pool("pool", y)?;
    let fc = b.linear("fc", p, 1000, Init::Kaiming)?;
    b.mark_output("logits", fc);
    b.finish()
}

#[derive(Clone, Debug)]
pub struct Calibration {
    pub macs: u64,
    pub params: u64,
    /// (unit, reported GFLOPs, relative error against the reference).
    pub candidates: Vec<(FlopUnit, f64, f64)>,
    pub chosen: Option<FlopUnit>,
}

/// Evaluates every candidate unit on the deep-stem ResNet-50 and picks the one
/// closest to the reference figure, if any is within `tolerance`.
pub fn calibrate(tolerance: f64) -> Result<Calibration> {
    let g = resnet50_deep_stem::<f32>(0, true)?;
    let r = report(&g, (224, 224), CostScope::Full)?;
    let candidates: Vec<(FlopUnit, f64, f64)> = FlopUnit::CANDIDATES
        .iter()
        .map(|&u| {
            let v = u.gflops(r.macs);
            (u, v, (v - RESNET50_GFLOPS) / RESNET50_GFLOPS)
        })
        .collect();
    let chosen = candidates
        .iter()
        .filter(|c| c.2.abs() <= tolerance)
        .min_by(|a, b| a.2.abs().total_cmp(&b.2.abs()))
        .map(|c| c.0);
    Ok(Calibration {
        macs: r.macs,
        params: r.params,
        candidates,
        chosen,
    })
}
