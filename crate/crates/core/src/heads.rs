//! Output heads over the four-resolution branch set.
//!
//! Dense heads emit `logits` at 1/4 resolution, classification heads emit an
//! `embedding` and `logits`, and the pyramid head emits `p2, p3, ...`.

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, Init, NodeId};
use crate::kernels::{ConvSpec, UpsampleMode};
use crate::tensor::Scalar;
use crate::topology::{bottleneck, BranchSet, HeadKind, NetworkConfig, MAX_BRANCHES};

pub const PYRAMID_WIDTH: usize = 256;
pub const EMBEDDING_WIDTH: usize = 2048;

/// Width of the final classifier's input for each classification head.
pub fn classifier_input_width(config: &NetworkConfig) -> usize {
    match config.head {
        HeadKind::ClsCi => config.mix_width(),
        _ => EMBEDDING_WIDTH,
    }
}

fn require_four<T: Scalar>(b: &GraphBuilder<T>, branches: &BranchSet) -> Result<()> {
    if branches.len() != MAX_BRANCHES {
        return Err(Error::invalid(
            "head",
            format!("expected {MAX_BRANCHES} branches, got {}", branches.len()),
        ));
    }
    let c0 = b.shape(branches.nodes[0]).c;
    for (r, s) in branches.shapes(b).into_iter().enumerate() {
        if s.c != c0 << r {
            return Err(Error::shape("head", format!("branch {r} has {} channels", s.c)));
        }
    }
    Ok(())
}

/// 1x1 conv with bias, no normalization.
fn classifier<T: Scalar>(b: &mut GraphBuilder<T>, x: NodeId, out_dim: usize) -> Result<NodeId> {
    let c = b.shape(x).c;
    b.conv("classifier", x, ConvSpec::square(c, out_dim, 1, 1).with_bias(true), Init::Normal(1e-3))
}

pub fn head_v1<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet, out_dim: usize) -> Result<NodeId> {
    require_four(b, branches)?;
    b.set_branch(Some(0));
    classifier(b, branches.nodes[0], out_dim)
}

pub fn head_v1h<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet, out_dim: usize) -> Result<NodeId> {
    require_four(b, branches)?;
    b.set_branch(Some(0));
    let x = branches.nodes[0];
    let c = b.shape(x).c;
    let y = b.conv_bn("expand", x, ConvSpec::square(c, 15 * c, 1, 1), true)?;
    classifier(b, y, out_dim)
}

/// Upsample every branch to 1/4 resolution and concatenate (15C channels).
pub fn aggregate<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet, mode: UpsampleMode) -> Result<NodeId> {
    require_four(b, branches)?;
    let mut parts = vec![branches.nodes[0]];
    for (r, &x) in branches.nodes.iter().enumerate().skip(1) {
        b.set_branch(Some(r));
        parts.push(b.upsample(&format!("up{r}"), x, 1 << r, mode)?);
    }
    b.set_branch(None);
    b.concat("concat", parts)
}

pub fn head_v2<T: Scalar>(
    b: &mut GraphBuilder<T>,
    branches: &BranchSet,
    out_dim: usize,
    mode: UpsampleMode,
) -> Result<NodeId> {
    let cat = aggregate(b, branches, mode)?;
    let w = b.shape(cat).c;
    let y = b.conv_bn("mix", cat, ConvSpec::square(w, w, 1, 1), true)?;
    classifier(b, y, out_dim)
}

/// Pyramid levels `p2, p3, ...` of 256 channels at 1/4, 1/8, ... resolution.
pub fn head_v2p<T: Scalar>(
    b: &mut GraphBuilder<T>,
    branches: &BranchSet,
    levels: usize,
    mode: UpsampleMode,
) -> Result<Vec<NodeId>> {
    if levels == 0 {
        return Err(Error::invalid("pyramid", "at least one level"));
    }
    let cat = aggregate(b, branches, mode)?;
    let w = b.shape(cat).c;
    let mut level = b.conv(
        "reduce",
        cat,
        ConvSpec::square(w, PYRAMID_WIDTH, 1, 1).with_bias(true),
        Init::Kaiming,
    )?;
    let mut out = vec![level];
    for k in 1..levels {
        level = b.avg_pool(&format!("pool{k}"), level, (2, 2), (2, 2))?;
        out.push(level);
    }
    Ok(out)
}

/// Bottleneck increments to 128/256/512/1024 channels, strided downsample-add
/// from high to low resolution, then 1x1 to 2048 and global pooling.
pub fn head_classification_c<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet) -> Result<NodeId> {
    require_four(b, branches)?;
    let mut incre = Vec::with_capacity(MAX_BRANCHES);
    for (r, &x) in branches.nodes.iter().enumerate() {
        b.set_branch(Some(r));
        let planes = 32 << r;
        incre.push(bottleneck(b, &format!("incre{r}"), x, planes, 4 * planes, 1, true)?);
    }
    let mut y = incre[0];
    for r in 0..MAX_BRANCHES - 1 {
        b.set_branch(Some(r + 1));
        let cin = 128 << r;
        y = b.conv_bn(
            &format!("downsamp{r}"),
            y,
            ConvSpec::square(cin, 2 * cin, 3, 2).with_bias(true),
            true,
        )?;
        y = b.add(&format!("merge{}", r + 1), vec![y, incre[r + 1]])?;
    }
    b.set_branch(None);
    let y = b.conv_bn(
        "final",
        y,
        ConvSpec::square(1024, EMBEDDING_WIDTH, 1, 1).with_bias(true),
        true,
    )?;
    b.global_avg_pool("pool", y)
}

/// Per-branch global pooling, concatenated to 15C.
pub fn head_classification_ci<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet) -> Result<NodeId> {
    require_four(b, branches)?;
    let mut parts = Vec::with_capacity(MAX_BRANCHES);
    for (r, &x) in branches.nodes.iter().enumerate() {
        b.set_branch(Some(r));
        parts.push(b.global_avg_pool(&format!("pool{r}"), x)?);
    }
    b.set_branch(None);
    b.concat("concat", parts)
}

/// Branch r goes through 3-r strided doubling bottlenecks to 1/32 resolution,
/// a 1x1 maps each to 512, then concatenation to 2048 and global pooling.
pub fn head_classification_cii<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet) -> Result<NodeId> {
    require_four(b, branches)?;
    let per = EMBEDDING_WIDTH / MAX_BRANCHES;
    let mut parts = Vec::with_capacity(MAX_BRANCHES);
    for (r, &x) in branches.nodes.iter().enumerate() {
        b.set_branch(Some(r));
        let mut y = x;
        for k in 0..MAX_BRANCHES - 1 - r {
            let c = b.shape(y).c;
            y = bottleneck(b, &format!("b{r}.unit{k}"), y, 2 * c, 2 * c, 2, true)?;
        }
        let c = b.shape(y).c;
        parts.push(b.conv_bn(&format!("b{r}.map"), y, ConvSpec::square(c, per, 1, 1), true)?);
    }
    b.set_branch(None);
    let cat = b.concat("concat", parts)?;
    b.global_avg_pool("pool", cat)
}

/// Appends the configured head and marks its outputs.
pub fn build_head<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet, config: &NetworkConfig) -> Result<()> {
    b.set_stage("head");
    b.push_scope("head");
    let r = build_head_inner(b, branches, config);
    b.pop_scope();
    r
}

fn build_head_inner<T: Scalar>(b: &mut GraphBuilder<T>, branches: &BranchSet, config: &NetworkConfig) -> Result<()> {
    let out_dim = config.out_dim;
    match config.head {
        HeadKind::V1 => {
            let y = head_v1(b, branches, out_dim)?;
            b.mark_output("logits", y);
        }
        HeadKind::V1h => {
            let y = head_v1h(b, branches, out_dim)?;
            b.mark_output("logits", y);
        }
        HeadKind::V2 => {
            let y = head_v2(b, branches, out_dim, config.head_upsample)?;
            b.mark_output("logits", y);
        }
        HeadKind::V2p => {
            for (k, id) in head_v2p(b, branches, config.pyramid_levels, config.head_upsample)?
                .into_iter()
                .enumerate()
            {
                b.mark_output(&format!("p{}", k + 2), id);
            }
        }
        HeadKind::ClsC | HeadKind::ClsCi | HeadKind::ClsCii => {
            let e = match config.head {
                HeadKind::ClsC => head_classification_c(b, branches)?,
                HeadKind::ClsCi => head_classification_ci(b, branches)?,
                _ => head_classification_cii(b, branches)?,
            };
            b.mark_output("embedding", e);
            let y = b.linear("fc", e, out_dim, Init::Kaiming)?;
            b.mark_output("logits", y);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Chw, LayerGraph, Mode};
    use crate::tensor::{Shape4, Tensor};
    use crate::topology::{build_network, build_skeleton, presets};

    /// Head on four sliced-and-pooled inputs, so branches can be driven directly.
    fn head_only(c: usize, side: usize, head: HeadKind) -> LayerGraph<f64> {
        let config = NetworkConfig {
            width: c,
            head,
            out_dim: 3,
            pyramid_levels: 3,
            input_size: (side * 4, side * 4),
            ..NetworkConfig::default()
        };
        let mut b = GraphBuilder::<f64>::new(5);
        let x = b.input(Chw::new(15 * c, side, side));
        let mut nodes = Vec::new();
        for r in 0..4 {
            let start = c * ((1 << r) - 1);
            let s = b.slice(&format!("s{r}"), x, start, c << r).unwrap();
            nodes.push(if r == 0 {
                s
            } else {
                b.avg_pool(&format!("p{r}"), s, (1 << r, 1 << r), (1 << r, 1 << r)).unwrap()
            });
        }
        build_head(&mut b, &BranchSet::new(nodes), &config).unwrap();
        b.finish().unwrap()
    }

    fn probe(c: usize, side: usize) -> Tensor<f64> {
        Tensor::from_fn(Shape4::new(2, 15 * c, side, side), |n, ch, y, x| {
            (((n * 13 + ch * 7 + y * 5 + x * 3) % 17) as f64 - 8.0) / 8.0
        })
    }

    fn branch3_region(c: usize) -> std::ops::Range<usize> {
        7 * c..15 * c
    }

    #[test]
    fn v1_ignores_low_branches_v2_does_not() {
        let (c, side) = (2, 16);
        for (head, sensitive) in [(HeadKind::V1, false), (HeadKind::V1h, false), (HeadKind::V2, true)] {
            let mut g = head_only(c, side, head);
            let x = probe(c, side);
            let mut z = x.clone();
            for n in 0..2 {
                for ch in branch3_region(c) {
                    for y in 0..side {
                        for xx in 0..side {
                            z.set(n, ch, y, xx, 0.0);
                        }
                    }
                }
            }
            let out = g.output_id("logits").unwrap();
            let a = g.forward(&x, Mode::Eval).unwrap().value(out).clone();
            let bz = g.forward(&z, Mode::Eval).unwrap().value(out).clone();
            assert_eq!(a.shape(), Shape4::new(2, 3, side, side));
            assert_eq!(a != bz, sensitive, "{head}");
        }
    }

    #[test]
    fn v1_head_passes_no_gradient_to_low_branches() {
        let (c, side) = (2, 8);
        let mut g = head_only(c, side, HeadKind::V1);
        let x = probe(c, side);
        let tape = g.forward(&x, Mode::Train).unwrap();
        let out = g.output_id("logits").unwrap();
        let seed = Tensor::full(tape.value(out).shape(), 1.0);
        let gx = g.backward(&tape, vec![(out, seed)]).unwrap();
        for n in 0..2 {
            for ch in c..15 * c {
                assert!(gx.plane(n, ch).iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn pyramid_levels_are_repeated_pooling() {
        let (c, side) = (2, 16);
        let mut g = head_only(c, side, HeadKind::V2p);
        let tape = g.forward(&probe(c, side), Mode::Eval).unwrap();
        let p2 = tape.value(g.output_id("p2").unwrap()).clone();
        assert_eq!(p2.shape(), Shape4::new(2, PYRAMID_WIDTH, 16, 16));
        let mut pooled = p2.clone();
        for k in 1..3 {
            pooled = crate::kernels::avg_pool(&pooled, (2, 2), (2, 2)).unwrap();
            let level = tape.value(g.output_id(&format!("p{}", k + 2)).unwrap());
            assert_eq!(level, &pooled);
            assert_eq!(level.shape().c, PYRAMID_WIDTH);
        }
        assert!(g.output_id("p5").is_none());
    }

    #[test]
    fn ci_of_constant_branches_is_blockwise_constant() {
        let c = 2;
        let side = 8;
        let mut g = head_only(c, side, HeadKind::ClsCi);
        let x = Tensor::from_fn(Shape4::new(1, 15 * c, side, side), |_, ch, _, _| {
            (0..4).find(|&r| ch < c * ((2 << r) - 1)).unwrap() as f64 + 1.0
        });
        let tape = g.forward(&x, Mode::Eval).unwrap();
        let e = tape.value(g.output_id("embedding").unwrap());
        assert_eq!(e.shape(), Shape4::new(1, 30, 1, 1));
        let want: Vec<f64> = (0..4).flat_map(|r| vec![r as f64 + 1.0; c << r]).collect();
        assert_eq!(e.data(), &want[..]);
    }

    #[test]
    fn embedding_width_is_2048_for_any_c() {
        for c in [4, 18, 44] {
            for head in [HeadKind::ClsC, HeadKind::ClsCii] {
                let g = build_skeleton::<f32>(&presets::classification(c, head)).unwrap();
                let e = g.node(g.output_id("embedding").unwrap()).shape;
                assert_eq!(e, Chw::new(EMBEDDING_WIDTH, 1, 1), "C={c} {head}");
            }
        }
        let g = build_skeleton::<f32>(&presets::classification(27, HeadKind::ClsCi)).unwrap();
        assert_eq!(g.node(g.output_id("embedding").unwrap()).shape.c, 405);
    }

    #[test]
    fn classification_final_map_is_input_over_32() {
        let g = build_skeleton::<f32>(&presets::classification(18, HeadKind::ClsC)).unwrap();
        let fin = g.nodes().iter().find(|n| n.name == "head.final.relu").unwrap();
        assert_eq!(fin.shape, Chw::new(2048, 7, 7));
        let g = build_skeleton::<f32>(&presets::classification(25, HeadKind::ClsCii)).unwrap();
        let cat = g.nodes().iter().find(|n| n.name == "head.concat").unwrap();
        assert_eq!(cat.shape, Chw::new(2048, 7, 7));
    }

    #[test]
    fn landmark_heatmaps_at_quarter_resolution() {
        let g = build_skeleton::<f32>(&presets::w18_landmarks()).unwrap();
        assert_eq!(g.node(g.output_id("logits").unwrap()).shape, Chw::new(98, 64, 64));
        let cat = g.nodes().iter().find(|n| n.name == "head.concat").unwrap();
        assert_eq!(cat.shape.c, 270);
    }

    #[test]
    fn v1h_mixes_to_15c() {
        let mut config = presets::w18_landmarks();
        config.head = HeadKind::V1h;
        let g = build_skeleton::<f32>(&config).unwrap();
        assert_eq!(g.param("head.expand.conv.weight").unwrap().value.shape().n, 270);
    }

    #[test]
    fn zero_input_and_zero_classifier_give_zero_logits() {
        let mut g = build_network::<f64>(&presets::tiny(), 3).unwrap();
        for name in ["head.classifier.weight", "head.classifier.bias"] {
            g.param_mut(name).unwrap().value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let tape = g.forward(&Tensor::zeros(Shape4::new(2, 3, 32, 32)), Mode::Train).unwrap();
        assert!(tape.value(g.output_id("logits").unwrap()).data().iter().all(|&v| v == 0.0));
    }
}
