//! Backbone fragments. Each function appends layers to a [`GraphBuilder`] and
//! returns the node(s) carrying its output.

use super::{BranchSet, NetworkConfig};
use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, Init, NodeId};
use crate::kernels::{ConvSpec, UpsampleMode};
use crate::tensor::Scalar;

/// How cross-resolution terms of a fusion are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionStyle {
    /// Strided conv chains down, 1x1 conv + upsample up, identity on the diagonal.
    Full,
    /// Diagonal terms only; branches do not exchange information.
    IdentityOnly,
    /// Every (input, output) pair is a plain stride-1 `k x k` conv without BN,
    /// summed without activation. Requires equal resolutions.
    Plain { kernel: usize },
}

pub fn build_stem<T: Scalar>(b: &mut GraphBuilder<T>, x: NodeId, config: &NetworkConfig) -> Result<NodeId> {
    let s = b.shape(x);
    if !s.h.is_multiple_of(4) || !s.w.is_multiple_of(4) || s.h == 0 || s.w == 0 {
        return Err(Error::shape(
            "stem",
            format!("input {}x{} is not divisible by 4", s.h, s.w),
        ));
    }
    b.set_stage("stem");
    b.scoped("stem", |b| {
        let y = b.conv_bn("conv1", x, ConvSpec::square(s.c, config.stem_width, 3, 2), true)?;
        b.conv_bn(
            "conv2",
            y,
            ConvSpec::square(config.stem_width, config.stem_width, 3, 2),
            true,
        )
    })
}

/// 1x1 reduce -> 3x3 (strided) -> 1x1 expand, with identity or 1x1 projection
/// shortcut, then ReLU.
pub fn bottleneck<T: Scalar>(
    b: &mut GraphBuilder<T>,
    name: &str,
    x: NodeId,
    mid: usize,
    out: usize,
    stride: usize,
    project: bool,
) -> Result<NodeId> {
    let cin = b.shape(x).c;
    if !project && (cin != out || stride != 1) {
        return Err(Error::shape(
            "bottleneck",
            format!("identity shortcut from {cin} to {out} channels at stride {stride}"),
        ));
    }
    b.scoped(name, |b| {
        let y = b.conv_bn("conv1", x, ConvSpec::square(cin, mid, 1, 1), true)?;
        let y = b.conv_bn("conv2", y, ConvSpec::square(mid, mid, 3, stride), true)?;
        let y = b.conv_bn("conv3", y, ConvSpec::square(mid, out, 1, 1), false)?;
        let skip = if project {
            b.conv_bn("downsample", x, ConvSpec::square(cin, out, 1, stride), false)?
        } else {
            x
        };
        let s = b.add("add", vec![y, skip])?;
        b.relu("relu", s)
    })
}

/// conv3x3-BN-ReLU-conv3x3-BN, identity skip, ReLU.
pub fn basic_unit<T: Scalar>(b: &mut GraphBuilder<T>, name: &str, x: NodeId) -> Result<NodeId> {
    let c = b.shape(x).c;
    b.scoped(name, |b| {
        let y = b.conv_bn("conv1", x, ConvSpec::square(c, c, 3, 1), true)?;
        let y = b.conv_bn("conv2", y, ConvSpec::square(c, c, 3, 1), false)?;
        let s = b.add("add", vec![y, x])?;
        b.relu("relu", s)
    })
}

/// Bottleneck units at 1/4 resolution followed by a 3x3 conv down to width C.
pub fn build_stage1<T: Scalar>(b: &mut GraphBuilder<T>, x: NodeId, config: &NetworkConfig) -> Result<NodeId> {
    b.set_stage("stage1");
    b.set_branch(Some(0));
    let mid = config.stage1_bottleneck_width;
    let out = 4 * mid;
    b.scoped("stage1", |b| {
        let mut y = x;
        for u in 0..config.stage1_units {
            y = bottleneck(b, &format!("unit{u}"), y, mid, out, 1, u == 0)?;
        }
        b.conv_bn("reduce", y, ConvSpec::square(out, config.width, 3, 1), true)
    })
}

pub fn build_branch_units<T: Scalar>(b: &mut GraphBuilder<T>, x: NodeId, count: usize) -> Result<NodeId> {
    if count == 0 {
        return Err(Error::invalid("branch_units", "count must be positive"));
    }
    let mut y = x;
    for u in 0..count {
        y = basic_unit(b, &format!("unit{u}"), y)?;
    }
    Ok(y)
}

/// Multi-resolution convolution: output `o` is the ReLU of the sum over all
/// inputs `i` of the resolution-adapted `x_i`. Output resolution `o` is that
/// of input `o`, or half of output `o - 1` for outputs beyond the inputs.
pub fn build_fusion<T: Scalar>(
    b: &mut GraphBuilder<T>,
    inputs: &BranchSet,
    out_widths: &[usize],
    style: FusionStyle,
    up_mode: UpsampleMode,
) -> Result<BranchSet> {
    if inputs.is_empty() || out_widths.is_empty() {
        return Err(Error::invalid("fusion", "empty input or output set"));
    }
    let widths: Vec<usize> = inputs.nodes.iter().map(|&n| b.shape(n).c).collect();
    let mut outs = Vec::with_capacity(out_widths.len());
    b.push_scope("fuse");
    for (o, &wo) in out_widths.iter().enumerate() {
        b.set_branch(Some(o));
        let mut terms = Vec::with_capacity(inputs.len());
        for (i, &xi) in inputs.nodes.iter().enumerate() {
            let wi = widths[i];
            let name = format!("o{o}.i{i}");
            let term = match style {
                FusionStyle::Plain { kernel } => {
                    Some(b.conv(&name, xi, ConvSpec::square(wi, wo, kernel, 1), Init::Kaiming)?)
                }
                FusionStyle::IdentityOnly | FusionStyle::Full if i == o => {
                    if wi != wo {
                        return Err(Error::shape("fusion", format!("identity term {wi} -> {wo} channels")));
                    }
                    Some(xi)
                }
                FusionStyle::IdentityOnly => None,
                FusionStyle::Full if i > o => Some(b.scoped(name.as_str(), |b| {
                    let y = b.conv_bn("conv", xi, ConvSpec::square(wi, wo, 1, 1), false)?;
                    b.upsample("up", y, 1 << (i - o), up_mode)
                })?),
                FusionStyle::Full => Some(b.scoped(name.as_str(), |b| {
                    let steps = o - i;
                    let mut y = xi;
                    for k in 0..steps {
                        let s = b.shape(y);
                        if s.h < 2 || s.w < 2 || s.h % 2 != 0 || s.w % 2 != 0 {
                            return Err(Error::shape(
                                "fusion",
                                format!("cannot halve {}x{} for output {o}", s.h, s.w),
                            ));
                        }
                        let last = k + 1 == steps;
                        let cout = if last { wo } else { wi };
                        y = b.conv_bn(&format!("down{k}"), y, ConvSpec::square(wi, cout, 3, 2), !last)?;
                    }
                    Ok::<_, Error>(y)
                })?),
            };
            terms.extend(term);
        }
        if terms.is_empty() {
            return Err(Error::invalid("fusion", format!("output {o} has no contributing input")));
        }
        let sum = b.add(&format!("o{o}.sum"), terms)?;
        let y = match style {
            FusionStyle::Plain { .. } => sum,
            _ => b.relu(&format!("o{o}.relu"), sum)?,
        };
        outs.push(y);
    }
    b.pop_scope();
    Ok(BranchSet::new(outs))
}

/// Adds the branch for `stage` (2, 3 or 4) from the current lowest branch with
/// a strided conv; other branches pass through unless their width changes.
pub fn build_transition<T: Scalar>(
    b: &mut GraphBuilder<T>,
    branches: &BranchSet,
    stage: usize,
    config: &NetworkConfig,
) -> Result<BranchSet> {
    if !(2..=4).contains(&stage) || branches.len() != stage - 1 {
        return Err(Error::invalid(
            "transition",
            format!("stage {stage} with {} incoming branches", branches.len()),
        ));
    }
    b.set_stage(&format!("transition{stage}"));
    let scope = format!("transition{stage}");
    b.scoped(scope, |b| {
        let mut out = Vec::with_capacity(stage);
        for (r, &x) in branches.nodes.iter().enumerate() {
            b.set_branch(Some(r));
            let c = b.shape(x).c;
            let want = config.branch_width(r);
            out.push(if c == want {
                x
            } else {
                b.conv_bn(&format!("b{r}"), x, ConvSpec::square(c, want, 3, 1), true)?
            });
        }
        let r = stage - 1;
        b.set_branch(Some(r));
        let low = *branches.nodes.last().expect("non-empty");
        let c = b.shape(low).c;
        out.push(b.conv_bn(
            &format!("b{r}"),
            low,
            ConvSpec::square(c, config.branch_width(r), 3, 2),
            true,
        )?);
        Ok(BranchSet::new(out))
    })
}

/// `blocks` multi-resolution blocks: per-branch residual units followed by a
/// fusion across all branches.
pub fn build_stage<T: Scalar>(
    b: &mut GraphBuilder<T>,
    branches: &BranchSet,
    stage: usize,
    blocks: usize,
    config: &NetworkConfig,
    style: FusionStyle,
) -> Result<BranchSet> {
    b.set_stage(&format!("stage{stage}"));
    let widths = config.branch_widths(branches.len());
    let mut cur = branches.clone();
    b.push_scope(format!("stage{stage}"));
    for k in 0..blocks {
        b.push_scope(format!("block{k}"));
        let mut nodes = Vec::with_capacity(cur.len());
        for (r, &x) in cur.nodes.iter().enumerate() {
            b.set_branch(Some(r));
            let scope = format!("b{r}");
            nodes.push(b.scoped(scope, |b| build_branch_units(b, x, config.units_per_branch))?);
        }
        cur = build_fusion(b, &BranchSet::new(nodes), &widths, style, config.fusion_upsample)?;
        b.pop_scope();
    }
    b.pop_scope();
    Ok(cur)
}
