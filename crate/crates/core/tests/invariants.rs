mod common;

use hrnet_forge::cli::checkpoint::Checkpoint;
use hrnet_forge::costmodel::{self, count_params, count_params_dynamic, CostScope};
use hrnet_forge::graph::{Chw, GraphBuilder};
use hrnet_forge::kernels::{conv2d, ConvSpec, UpsampleMode};
use hrnet_forge::metrics::{decode_plane, ConfusionMatrix, IGNORE_INDEX};
use hrnet_forge::topology::{build_fusion, build_network, build_skeleton, BranchSet, FusionStyle};
use hrnet_forge::{HeadKind, Mode, NetworkConfig, Shape4, Tensor};
use proptest::prelude::*;

fn small_net(width: usize, head: HeadKind, size: usize) -> NetworkConfig {
    NetworkConfig {
        width,
        head,
        out_dim: 3,
        stage_blocks: [1, 1, 1],
        units_per_branch: 1,
        stage1_units: 1,
        stage1_bottleneck_width: 8,
        stem_width: 8,
        input_size: (size, size),
        ..NetworkConfig::default()
    }
}

/// Output map `o` of a two-branch fusion on `input`, where branch 1 is the
/// average-pooled upper half of the channels.
fn fusion_outputs(style: FusionStyle, c: usize, input: &Tensor<f64>) -> Vec<Tensor<f64>> {
    let mut b = GraphBuilder::<f64>::new(3);
    let x = b.input(Chw::new(2 * c, input.shape().h, input.shape().w));
    let x0 = b.slice("x0", x, 0, c).unwrap();
    let hi = b.slice("x1", x, c, c).unwrap();
    let x1 = b.avg_pool("pool", hi, (2, 2), (2, 2)).unwrap();
    let out = build_fusion(&mut b, &BranchSet::new(vec![x0, x1]), &[c, c], style, UpsampleMode::Bilinear).unwrap();
    for (o, &n) in out.nodes.iter().enumerate() {
        b.mark_output(&format!("o{o}"), n);
    }
    let mut g = b.finish().unwrap();
    let tape = g.forward(input, Mode::Eval).unwrap();
    (0..2).map(|o| tape.value(g.output_id(&format!("o{o}")).unwrap()).clone()).collect()
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn conv_output_size_formula(
        cin in 1usize..4, cout in 1usize..4,
        kh in 1usize..5, kw in 1usize..5, sh in 1usize..4, sw in 1usize..4,
        ph in 0usize..3, pw in 0usize..3, h in 1usize..12, w in 1usize..12,
    ) {
        let spec = ConvSpec { in_channels: cin, out_channels: cout, kernel: (kh, kw), stride: (sh, sw), padding: (ph, pw), has_bias: false };
        let fits = h + 2 * ph >= kh && w + 2 * pw >= kw;
        match spec.output_size(h, w) {
            Ok((oh, ow)) => {
                prop_assert!(fits);
                prop_assert_eq!((oh, ow), ((h + 2 * ph - kh) / sh + 1, (w + 2 * pw - kw) / sw + 1));
                let x = common::normal(Shape4::new(1, cin, h, w), 1);
                let y = conv2d(&x, &spec, &Tensor::zeros(spec.weight_shape()), None).unwrap();
                prop_assert_eq!(y.shape(), Shape4::new(1, cout, oh, ow));
            }
            Err(_) => prop_assert!(!fits),
        }
    }

    #[test]
    fn fusion_exchange(c in 1usize..4, half in 2usize..5, seed in 0u64..1000, idx in 0usize..1000) {
        let s = 2 * half;
        let x = common::normal(Shape4::new(1, 2 * c, s, s), seed);
        // perturb one pixel of the channels feeding branch 1
        let mut y = x.clone();
        let plane = s * s;
        let at = c * plane + idx % (c * plane);
        y.data_mut()[at] += 10.0;

        let a = fusion_outputs(FusionStyle::IdentityOnly, c, &x);
        let b = fusion_outputs(FusionStyle::IdentityOnly, c, &y);
        prop_assert_eq!(max_diff(&a[0], &b[0]), 0.0);
        prop_assert!(max_diff(&a[1], &b[1]) > 0.0);

        let a = fusion_outputs(FusionStyle::Full, c, &x);
        let b = fusion_outputs(FusionStyle::Full, c, &y);
        prop_assert!(max_diff(&a[0], &b[0]) > 0.0);
    }

    #[test]
    fn confusion_total_counts_evaluated_pixels(
        px in prop::collection::vec((0u32..4, prop_oneof![0u32..4, Just(IGNORE_INDEX)]), 0..200),
    ) {
        let (pred, gt): (Vec<u32>, Vec<u32>) = px.into_iter().unzip();
        let cm = ConfusionMatrix::from_labels(&pred, &gt, 4, IGNORE_INDEX).unwrap();
        prop_assert_eq!(cm.total(), gt.iter().filter(|&&g| g != IGNORE_INDEX).count() as u64);
    }

    #[test]
    fn decoded_points_stay_on_the_map(h in 2usize..12, w in 2usize..12, seed in 0u64..1000) {
        let map = common::normal(Shape4::new(1, 1, h, w), seed);
        let ((x, y), _) = decode_plane(map.data(), h, w).unwrap();
        prop_assert!((0.0..=(w - 1) as f64).contains(&x) && (0.0..=(h - 1) as f64).contains(&y));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn branch_widths_and_resolutions(c in 1usize..24, mh in 1usize..5, mw in 1usize..5, v2 in prop::bool::ANY) {
        let (h, w) = (32 * mh, 32 * mw);
        let mut cfg = small_net(c, if v2 { HeadKind::V2 } else { HeadKind::V1 }, 32);
        cfg.input_size = (h, w);
        let g = build_skeleton::<f32>(&cfg).unwrap();
        let shapes = g.infer_shapes(h, w).unwrap();
        for r in 0..4 {
            let s = shapes[g.output_id(&format!("branch{r}")).unwrap()];
            prop_assert_eq!(s, Chw::new(c << r, h >> (r + 2), w >> (r + 2)));
        }
        let concat = g.nodes().iter().position(|n| n.name == "head.concat");
        prop_assert_eq!(concat.map(|i| shapes[i].c), v2.then_some(15 * c));
    }

    #[test]
    fn rejects_indivisible_inputs(c in 1usize..8, h in 33usize..100) {
        prop_assume!(h % 32 != 0);
        let mut cfg = small_net(c, HeadKind::V2, 32);
        cfg.input_size = (h, 64);
        prop_assert!(build_skeleton::<f32>(&cfg).is_err());
    }

    #[test]
    fn cost_totals_and_two_param_counts(c in 1usize..16, head in prop_oneof![
        Just(HeadKind::V1), Just(HeadKind::V1h), Just(HeadKind::V2), Just(HeadKind::V2p),
        Just(HeadKind::ClsC), Just(HeadKind::ClsCi), Just(HeadKind::ClsCii),
    ]) {
        let cfg = small_net(c, head, 64);
        let g = build_network::<f32>(&cfg, 1).unwrap();
        let r = costmodel::report(&g, (64, 64), CostScope::Full).unwrap();
        prop_assert_eq!(r.params, r.per_layer.iter().map(|l| l.params).sum::<u64>());
        prop_assert_eq!(r.macs, r.per_layer.iter().map(|l| l.macs).sum::<u64>());
        prop_assert_eq!(count_params(&g), count_params_dynamic(&g));
        prop_assert_eq!(r.params, count_params_dynamic(&g));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact(c in 1usize..6, seed in 0u64..1000, digest in any::<u64>()) {
        let cfg = small_net(c, HeadKind::V2, 64);
        let g = build_network::<f64>(&cfg, seed).unwrap();
        let ck = Checkpoint::capture(&g, None, digest);
        let bytes = ck.encode();
        let back = Checkpoint::<f64>::decode(&bytes).unwrap();
        prop_assert_eq!(back.encode(), bytes);
        let mut fresh = build_network::<f64>(&cfg, seed + 1).unwrap();
        back.restore(&mut fresh, None).unwrap();
        for (p, q) in g.params().iter().zip(fresh.params()) {
            let same = p.value.data().iter().zip(q.value.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same, "{}", p.name);
        }
    }
}
