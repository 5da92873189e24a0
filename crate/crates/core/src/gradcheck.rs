//! Central finite-difference gradient checking at double precision.
//!
//! Coordinates are sampled per tensor (all of them for small tensors). A probe
//! may return an activation signature, e.g. the sign pattern of every ReLU
//! input; when the signatures at `x + h` and `x - h` differ the difference
//! straddles a kink, the coordinate is discarded and another one is drawn.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{LayerGraph, Mode, NodeId, Op, Tape};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub samples_per_tensor: usize,
    /// Step is `step * max(1, |x|)`.
    pub step: f64,
    /// Lower bound of the relative-error denominator.
    pub floor: f64,
    pub seed: u64,
    /// Extra draws allowed per tensor to replace coordinates at kinks.
    pub max_redraws: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            samples_per_tensor: 64,
            step: 1e-5,
            floor: 1e-7,
            seed: 0,
            max_redraws: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub tensors: Vec<TensorCheck>,
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
    pub skipped_kinks: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        self.checked > 0 && self.max_rel_error <= tolerance
    }
}

/// Loss value plus an optional non-smoothness signature.
#[derive(Clone, Debug)]
pub struct Probe {
    pub loss: f64,
    pub signature: Option<Vec<bool>>,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Checks `analytic[k]` against finite differences of `eval` with respect to
/// `points[k]`. `eval` sees all points, one of them perturbed.
pub fn check_points<F>(
    names: &[String],
    points: &mut [Vec<f64>],
    analytic: &[Vec<f64>],
    mut eval: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport>
where
    F: FnMut(&[Vec<f64>]) -> Result<Probe>,
{
    if names.len() != points.len() || analytic.len() != points.len() {
        return Err(Error::invalid("grad_check", "names, points and gradients differ in count"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = GradCheckReport {
        tensors: Vec::with_capacity(points.len()),
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
        skipped_kinks: 0,
    };
    for k in 0..points.len() {
        let len = points[k].len();
        if analytic[k].len() != len {
            return Err(Error::shape("grad_check", format!("gradient of {} has wrong length", names[k])));
        }
        let want = cfg.samples_per_tensor.min(len);
        let budget = (want + cfg.max_redraws).min(len);
        let order = sample(&mut rng, len, budget).into_vec();
        let mut tc = TensorCheck {
            name: names[k].clone(),
            checked: 0,
            max_rel_error: 0.0,
            worst_index: 0,
        };
        for &i in &order {
            if tc.checked == want {
                break;
            }
            let x0 = points[k][i];
            let h = cfg.step * x0.abs().max(1.0);
            points[k][i] = x0 + h;
            let plus = eval(points);
            points[k][i] = x0 - h;
            let minus = eval(points);
            points[k][i] = x0;
            let (plus, minus) = (plus?, minus?);
            if !plus.loss.is_finite() || !minus.loss.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("grad_check probe of {}[{i}]", names[k]),
                });
            }
            if plus.signature != minus.signature {
                report.skipped_kinks += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            let e = relative_error(analytic[k][i], numeric, cfg.floor);
            if e > tc.max_rel_error {
                tc.max_rel_error = e;
                tc.worst_index = i;
            }
            tc.checked += 1;
        }
        report.checked += tc.checked;
        if tc.max_rel_error > report.max_rel_error || report.worst.is_empty() {
            report.max_rel_error = tc.max_rel_error.max(report.max_rel_error);
            report.worst = format!("{}[{}]", tc.name, tc.worst_index);
        }
        report.tensors.push(tc);
    }
    Ok(report)
}

/// Scalar objective over graph outputs: returns the loss and the gradient
/// seeds for backward.
pub type Objective<'a> = dyn FnMut(&LayerGraph<f64>, &Tape<f64>) -> Result<(f64, Vec<(NodeId, Tensor<f64>)>)> + 'a;

fn relu_signature(graph: &LayerGraph<f64>, tape: &Tape<f64>) -> Vec<bool> {
    let mut sig = Vec::new();
    for node in graph.nodes() {
        if matches!(node.op, Op::Relu) {
            sig.extend(tape.value(node.inputs[0]).data().iter().map(|&v| v > 0.0));
        }
    }
    sig
}

/// Checks every trainable parameter tensor (and the input when `with_input`)
/// of a graph evaluated in `mode`. `fault` scales the analytic gradient of the
/// first checked tensor, as a negative control.
pub fn check_graph(
    graph: &mut LayerGraph<f64>,
    input: &Tensor<f64>,
    mode: Mode,
    objective: &mut Objective<'_>,
    cfg: &GradCheckConfig,
    with_input: bool,
    fault: Option<f64>,
) -> Result<GradCheckReport> {
    graph.zero_grads();
    let tape = graph.forward(input, mode)?;
    let (_, seeds) = objective(graph, &tape)?;
    let gin = graph.backward(&tape, seeds)?;
    let ids: Vec<usize> = (0..graph.params().len())
        .filter(|&i| graph.params()[i].kind.trainable())
        .collect();
    let mut names: Vec<String> = ids.iter().map(|&i| graph.params()[i].name.clone()).collect();
    let mut points: Vec<Vec<f64>> = ids.iter().map(|&i| graph.params()[i].value.data().to_vec()).collect();
    let mut analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&i| {
            let p = &graph.params()[i].value;
            p.grad().map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; p.len()])
        })
        .collect();
    if with_input {
        names.push("input".into());
        points.push(input.data().to_vec());
        analytic.push(gin.into_data());
    }
    if let (Some(f), Some(first)) = (fault, analytic.first_mut()) {
        first.iter_mut().for_each(|v| *v *= f);
    }
    let shape = input.shape();
    let state: Vec<Vec<f64>> = graph.params().iter().map(|p| p.value.data().to_vec()).collect();
    let eval = |pts: &[Vec<f64>]| -> Result<Probe> {
        for (slot, &i) in ids.iter().enumerate() {
            graph.params_mut()[i].value.data_mut().copy_from_slice(&pts[slot]);
        }
        let x = if with_input {
            Tensor::from_vec(shape, pts[ids.len()].clone())?
        } else {
            input.clone()
        };
        let tape = graph.forward(&x, mode)?;
        let (loss, _) = objective(graph, &tape)?;
        Ok(Probe {
            loss,
            signature: Some(relu_signature(graph, &tape)),
        })
    };
    let report = check_points(&names, &mut points, &analytic, eval, cfg);
    for (p, s) in graph.params_mut().iter_mut().zip(state) {
        p.value.data_mut().copy_from_slice(&s);
    }
    report
}
