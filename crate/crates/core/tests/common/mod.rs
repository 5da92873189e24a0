#![allow(dead_code)]

use hrnet_forge::gradcheck::{check_graph, check_points, GradCheckConfig, GradCheckReport, Probe};
use hrnet_forge::graph::{Chw, GraphBuilder, Init, NodeId, Tape};
use hrnet_forge::kernels::{mse_loss, softmax_cross_entropy, ConvSpec, UpsampleMode};
use hrnet_forge::{LayerGraph, Mode, Result, Shape4, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

pub const KERNEL_TOL: f64 = 1e-4;

pub fn normal(shape: Shape4, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.sample(StandardNormal))
}

/// Builds a one-op graph on an input of `shape` and checks the loss
/// `sum(r * y)` for a fixed random `r`.
pub fn check_op(
    shape: Shape4,
    mode: Mode,
    fault: Option<f64>,
    build: impl FnOnce(&mut GraphBuilder<f64>, NodeId) -> Result<NodeId>,
) -> GradCheckReport {
    let mut b = GraphBuilder::<f64>::new(7);
    let x = b.input(Chw::new(shape.c, shape.h, shape.w));
    let y = build(&mut b, x).unwrap();
    b.mark_output("y", y);
    let mut g = b.finish().unwrap();
    check_with_input(&mut g, &normal(shape, 1), mode, fault)
}

pub fn check_with_input(g: &mut LayerGraph<f64>, input: &Tensor<f64>, mode: Mode, fault: Option<f64>) -> GradCheckReport {
    let out = g.output_id("y").unwrap();
    let mut weights: Option<Tensor<f64>> = None;
    let mut obj = |_: &LayerGraph<f64>, tape: &Tape<f64>| {
        let y = tape.value(out);
        let r = weights.get_or_insert_with(|| normal(y.shape(), 99));
        let loss = y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum();
        Ok((loss, vec![(out, r.clone())]))
    };
    check_graph(g, input, mode, &mut obj, &GradCheckConfig::default(), true, fault).unwrap()
}

/// Inputs bounded away from zero, so no probe straddles the ReLU kink.
pub fn relu_report() -> GradCheckReport {
    let shape = Shape4::new(2, 3, 4, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let input = Tensor::from_fn(shape, |_, _, _, _| {
        let m: f64 = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    });
    let mut b = GraphBuilder::<f64>::new(7);
    let x = b.input(Chw::new(3, 4, 4));
    let y = b.relu("relu", x).unwrap();
    b.mark_output("y", y);
    let mut g = b.finish().unwrap();
    check_with_input(&mut g, &input, Mode::Train, None)
}

fn loss_shape() -> Shape4 {
    Shape4::new(2, 3, 2, 3)
}

pub fn cross_entropy_report() -> GradCheckReport {
    let shape = loss_shape();
    let logits = normal(shape, 3);
    let labels: Vec<u32> = (0..12).map(|i| if i == 5 { 255 } else { (i * 5 % 3) as u32 }).collect();
    let (_, g) = softmax_cross_entropy(&logits, &labels, 255).unwrap();
    let mut pts = vec![logits.data().to_vec()];
    check_points(
        &["logits".to_string()],
        &mut pts,
        &[g.into_data()],
        |p| {
            let t = Tensor::from_vec(shape, p[0].clone())?;
            Ok(Probe {
                loss: softmax_cross_entropy(&t, &labels, 255)?.0,
                signature: None,
            })
        },
        &GradCheckConfig::default(),
    )
    .unwrap()
}

pub fn mse_report() -> GradCheckReport {
    let shape = loss_shape();
    let pred = normal(shape, 3);
    let target = normal(shape, 4);
    let (_, g) = mse_loss(&pred, &target).unwrap();
    let mut pts = vec![pred.data().to_vec()];
    check_points(
        &["pred".to_string()],
        &mut pts,
        &[g.into_data()],
        |p| {
            let t = Tensor::from_vec(shape, p[0].clone())?;
            Ok(Probe {
                loss: mse_loss(&t, &target)?.0,
                signature: None,
            })
        },
        &GradCheckConfig::default(),
    )
    .unwrap()
}

/// Every kernel with a backward pass, one report each.
pub fn kernel_reports() -> Vec<(String, GradCheckReport)> {
    let mut v = vec![
        (
            "conv 3x3 + bias".to_string(),
            check_op(Shape4::new(2, 3, 5, 5), Mode::Train, None, |b, x| {
                b.conv("conv", x, ConvSpec::square(3, 4, 3, 1).with_bias(true), Init::Kaiming)
            }),
        ),
        (
            "conv strided + pointwise".to_string(),
            check_op(Shape4::new(2, 3, 6, 6), Mode::Train, None, |b, x| {
                let y = b.conv("down", x, ConvSpec::square(3, 4, 3, 2), Init::Kaiming)?;
                b.conv("point", y, ConvSpec::square(4, 2, 1, 1).with_bias(true), Init::Kaiming)
            }),
        ),
    ];
    for (name, mode) in [("batch norm train", Mode::Train), ("batch norm eval", Mode::Eval)] {
        v.push((
            name.to_string(),
            check_op(Shape4::new(3, 2, 3, 3), mode, None, |b, x| b.batch_norm("bn", x)),
        ));
    }
    v.push(("relu".to_string(), relu_report()));
    for mode in [UpsampleMode::Nearest, UpsampleMode::Bilinear] {
        for factor in [2, 4] {
            v.push((
                format!("upsample {} x{factor}", mode.as_str()),
                check_op(Shape4::new(2, 2, 3, 4), Mode::Train, None, |b, x| b.upsample("up", x, factor, mode)),
            ));
        }
    }
    v.push((
        "avg pool 2x2".to_string(),
        check_op(Shape4::new(2, 3, 8, 8), Mode::Train, None, |b, x| b.avg_pool("pool", x, (2, 2), (2, 2))),
    ));
    v.push((
        "global avg pool".to_string(),
        check_op(Shape4::new(2, 3, 5, 7), Mode::Train, None, |b, x| b.global_avg_pool("gap", x)),
    ));
    v.push((
        "linear".to_string(),
        check_op(Shape4::new(3, 4, 2, 2), Mode::Train, None, |b, x| b.linear("fc", x, 5, Init::Kaiming)),
    ));
    v.push((
        "add/concat/slice".to_string(),
        check_op(Shape4::new(2, 4, 3, 3), Mode::Train, None, |b, x| {
            let a = b.slice("lo", x, 0, 2)?;
            let c = b.slice("hi", x, 2, 2)?;
            let s = b.add("sum", vec![a, c])?;
            b.concat("cat", vec![s, x])
        }),
    ));
    v.push(("softmax cross entropy".to_string(), cross_entropy_report()));
    v.push(("mse".to_string(), mse_report()));
    v
}
