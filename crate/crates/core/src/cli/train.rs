//! Training and evaluation drivers.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::StandardNormal;

use super::checkpoint::Checkpoint;
use super::config::{DataSource, RunConfig, Task};
use super::data::{image_batch, read_dataset, stream, synthetic, warp_sample, Dataset, Sample, Target, Warp};
use crate::error::{Error, Result};
use crate::gradcheck::{check_graph, GradCheckConfig, GradCheckReport};
use crate::graph::{LayerGraph, Mode, NodeId, Tape};
use crate::kernels::{mse_loss, softmax_cross_entropy, upsample, upsample_backward, UpsampleMode};
use crate::metrics::{
    argmax_labels, auc_fr, decode_heatmap, gaussian_target, nme, ConfusionMatrix, DecodeConfig, MetricsReport,
    HEATMAP_STRIDE, IGNORE_INDEX,
};
use crate::optim::OptimizerState;
use crate::tensor::{Scalar, Tensor};
use crate::topology::{build_network, HeadKind};

/// Stream offsets that keep batch sampling, gradcheck inputs and data
/// generation independent under one seed.
const TRAIN_STREAM: u64 = 0x7472_6169_6e00_0000;
const GRADCHECK_STREAM: u64 = 0x6772_6164_0000_0000;

/// Failure-rate / AUC threshold on NME.
pub const NME_THRESHOLD: f64 = 0.1;
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

/// Loads the configured dataset and checks it against the network.
pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    let n = &cfg.network;
    let data = match &cfg.data {
        DataSource::Synthetic => synthetic(cfg.task, cfg.data_samples, n.input_size, n.out_dim, n.input_channels, cfg.seed)?,
        DataSource::Directory(dir) => read_dataset(dir)?,
    };
    if data.task != cfg.task {
        return Err(Error::Data(format!(
            "dataset is for {}, config for {}",
            data.task.as_str(),
            cfg.task.as_str()
        )));
    }
    if data.classes != n.out_dim {
        return Err(Error::Data(format!("dataset has {} classes, network outputs {}", data.classes, n.out_dim)));
    }
    if let Some(s) = data.samples.iter().find(|s| s.image.channels != n.input_channels) {
        return Err(Error::Data(format!("{}-channel image for a {}-channel network", s.image.channels, n.input_channels)));
    }
    Ok(data)
}

fn at_iteration(e: Error, it: usize) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} at iteration {it}"),
        },
        other => other,
    }
}

fn logits_id<T: Scalar>(graph: &LayerGraph<T>) -> Result<NodeId> {
    graph
        .output_id("logits")
        .ok_or_else(|| Error::invalid("train", "network has no logits output"))
}

/// Landmark coordinates in heatmap cells.
fn to_cells(points: &[(f64, f64)], shift: f64) -> Vec<(f64, f64)> {
    let s = HEATMAP_STRIDE;
    points.iter().map(|&(x, y)| ((x - shift) / s, (y - shift) / s)).collect()
}

/// Task loss on the logits output and the seed gradient for backward.
pub fn task_loss<T: Scalar>(
    cfg: &RunConfig,
    graph: &LayerGraph<T>,
    tape: &Tape<T>,
    samples: &[Sample],
) -> Result<(f64, Vec<(NodeId, Tensor<T>)>)> {
    let out = logits_id(graph)?;
    let y = tape.value(out);
    let ys = y.shape();
    let (loss, grad) = match cfg.task {
        Task::Segmentation => {
            let img = &samples[0].image;
            let factor = img.height / ys.h;
            let up = upsample(y, factor, UpsampleMode::Bilinear)?;
            let mut labels = Vec::with_capacity(samples.len() * img.height * img.width);
            for s in samples {
                match &s.target {
                    Target::Mask(m) => labels.extend_from_slice(m),
                    _ => return Err(Error::Data("segmentation sample without a mask".into())),
                }
            }
            let (loss, g) = softmax_cross_entropy(&up, &labels, IGNORE_INDEX)?;
            (loss, upsample_backward(&g, factor, UpsampleMode::Bilinear)?)
        }
        Task::Landmarks => {
            let mut maps = Vec::with_capacity(samples.len());
            for s in samples {
                let Target::Points(p) = &s.target else {
                    return Err(Error::Data("landmark sample without points".into()));
                };
                maps.push(gaussian_target::<T>(&to_cells(p, cfg.coord_shift), ys.h, ys.w, cfg.heatmap_sigma)?.0);
            }
            mse_loss(y, &Tensor::stack(&maps)?)?
        }
        Task::Classification => {
            let labels = samples
                .iter()
                .map(|s| match s.target {
                    Target::Class(c) => Ok(c),
                    _ => Err(Error::Data("classification sample without a class".into())),
                })
                .collect::<Result<Vec<u32>>>()?;
            softmax_cross_entropy(y, &labels, IGNORE_INDEX)?
        }
        Task::Pyramid => return Err(Error::invalid("train", "the pyramid task has no training objective")),
    };
    Ok((loss, vec![(out, grad)]))
}

pub struct Trainer<T: Scalar> {
    pub config: RunConfig,
    pub graph: LayerGraph<T>,
    pub optim: OptimizerState<T>,
    pub data: Dataset,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(config: RunConfig, data: Dataset) -> Result<Self> {
        config.validate()?;
        if config.task == Task::Pyramid {
            return Err(Error::invalid("train", "the pyramid task has no training objective"));
        }
        if data.is_empty() {
            return Err(Error::Data("empty dataset".into()));
        }
        let graph = build_network::<T>(&config.network, config.seed)?;
        let optim = OptimizerState::new(config.sgd(), graph.params());
        Ok(Trainer {
            config,
            graph,
            optim,
            data,
        })
    }

    pub fn iteration(&self) -> usize {
        self.optim.iter
    }

    /// Augmented batch of iteration `it`; a pure function of `(seed, it)`.
    pub fn batch(&self, it: usize) -> Vec<Sample> {
        let cfg = &self.config;
        let mut rng = stream(cfg.seed ^ TRAIN_STREAM, it as u64);
        let crop = cfg.crop_size();
        (0..cfg.batch_size)
            .map(|_| {
                let s = &self.data.samples[rng.random_range(0..self.data.len())];
                let src = (s.image.height, s.image.width);
                let warp = Warp::draw(&mut rng, &cfg.augment, src, crop, cfg.task == Task::Landmarks);
                warp_sample(s, &warp)
            })
            .collect()
    }

    /// One optimizer step; returns `(lr, loss)`.
    pub fn step(&mut self) -> Result<(f64, f64)> {
        let it = self.optim.iter;
        let samples = self.batch(it);
        let x = image_batch::<T>(&samples.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        self.graph.zero_grads();
        let run = |this: &mut Self| -> Result<(f64, f64)> {
            let tape = this.graph.forward(&x, Mode::Train)?;
            let (loss, seeds) = task_loss(&this.config, &this.graph, &tape, &samples)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    op: "training loss".into(),
                });
            }
            this.graph.backward(&tape, seeds)?;
            let lr = this.optim.step(this.graph.params_mut())?;
            Ok((lr, loss))
        };
        run(self).map_err(|e| at_iteration(e, it))
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation<T: Scalar> {
    pub report: MetricsReport,
    /// Network outputs (logits or heatmaps) for every sample.
    pub predictions: Tensor<T>,
}

/// Runs the network over `data` in eval mode and computes task metrics.
/// With `flip` the outputs for mirrored inputs are mirrored back and
/// averaged in.
pub fn evaluate<T: Scalar>(graph: &mut LayerGraph<T>, cfg: &RunConfig, data: &Dataset, flip: bool) -> Result<Evaluation<T>> {
    if cfg.task == Task::Pyramid {
        return Err(Error::invalid("eval", "the pyramid task has no metrics"));
    }
    let (h, w) = cfg.network.input_size;
    if let Some(s) = data.samples.iter().find(|s| (s.image.height, s.image.width) != (h, w)) {
        return Err(Error::Data(format!(
            "evaluation image {}x{} differs from the network input {h}x{w}",
            s.image.height, s.image.width
        )));
    }
    let out = logits_id(graph)?;
    let mut parts = Vec::new();
    for chunk in data.samples.chunks(cfg.batch_size) {
        let x = image_batch::<T>(&chunk.iter().map(|s| &s.image).collect::<Vec<_>>())?;
        let mut y = graph.forward(&x, Mode::Eval)?.value(out).clone();
        if flip {
            let yf = graph.forward(&x.flip_horizontal(), Mode::Eval)?.value(out).flip_horizontal();
            let half = T::of(0.5);
            y.data_mut().iter_mut().zip(yf.data()).for_each(|(a, &b)| *a = (*a + b) * half);
        }
        parts.push(y);
    }
    let predictions = Tensor::stack(&parts)?;
    let mut report = MetricsReport::default();
    report.push("samples", data.len() as f64);
    match cfg.task {
        Task::Segmentation => {
            let factor = h / predictions.shape().h;
            let mut cm = ConfusionMatrix::new(cfg.network.out_dim);
            for (i, s) in data.samples.iter().enumerate() {
                let up = upsample(&predictions.select_batch(&[i]), factor, UpsampleMode::Bilinear)?;
                let Target::Mask(m) = &s.target else {
                    return Err(Error::Data("segmentation sample without a mask".into()));
                };
                cm.accumulate(&argmax_labels(&up), m, IGNORE_INDEX)?;
            }
            let sc = cm.scores()?;
            report.push("miou", sc.miou);
            report.push("pixel_acc", sc.pixel_acc);
            report.push("mean_acc", sc.mean_acc);
            for (k, iou) in sc.per_class_iou.iter().enumerate() {
                if let Some(v) = iou {
                    report.push(format!("iou_{k}"), *v);
                }
            }
        }
        Task::Landmarks => {
            let dc = DecodeConfig {
                stride: HEATMAP_STRIDE,
                shift: cfg.coord_shift,
            };
            let mut px = 0.0;
            let mut count = 0usize;
            for (i, s) in data.samples.iter().enumerate() {
                let Target::Points(gt) = &s.target else {
                    return Err(Error::Data("landmark sample without points".into()));
                };
                let d = decode_heatmap(&predictions, i, dc)?;
                for (a, b) in d.coords.iter().zip(gt) {
                    px += (a.0 - b.0).hypot(a.1 - b.1);
                    count += 1;
                }
                report.nmes.push(nme(&d.coords, gt, cfg.nme_normalizer)?);
            }
            let (auc, fr) = auc_fr(&report.nmes, NME_THRESHOLD)?;
            let mean_nme = report.nmes.iter().sum::<f64>() / report.nmes.len() as f64;
            report.push("mean_error_px", px / count.max(1) as f64);
            report.push("nme", mean_nme);
            report.push("auc_0.1", auc);
            report.push("fr_0.1", fr);
        }
        Task::Classification => {
            let pred = argmax_labels(&predictions);
            let correct = data
                .samples
                .iter()
                .zip(&pred)
                .filter(|(s, &p)| s.target == Target::Class(p))
                .count();
            report.push("top1", correct as f64 / data.len() as f64);
        }
        Task::Pyramid => unreachable!(),
    }
    Ok(Evaluation { report, predictions })
}

/// Headline metric of a task, as reported by `train`.
pub fn headline(task: Task) -> &'static str {
    match task {
        Task::Segmentation => "miou",
        Task::Landmarks => "mean_error_px",
        Task::Classification => "top1",
        Task::Pyramid => "",
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub iterations: usize,
    pub final_loss: f64,
    pub report: MetricsReport,
    pub checkpoint: PathBuf,
}

const LOG_HEADER: &str = "iter\tlr\tloss";

/// Keeps the header and the rows of iterations before `start`.
fn truncate_log(path: &Path, start: usize) -> Result<String> {
    let mut kept = format!("{LOG_HEADER}\n");
    if let Ok(text) = std::fs::read_to_string(path) {
        for line in text.lines().skip(1) {
            let it = line.split('\t').next().and_then(|v| v.parse::<usize>().ok());
            if it.is_some_and(|i| i < start) {
                let _ = writeln!(kept, "{line}");
            }
        }
    }
    Ok(kept)
}

pub fn checkpoint_name(iteration: usize) -> String {
    format!("ckpt_{iteration:06}.bin")
}

/// Full training run writing `loss.tsv`, periodic checkpoints,
/// `checkpoint.bin` and `metrics.txt` (training-set metrics) into `out`.
pub fn train<T: Scalar>(
    cfg: &RunConfig,
    out: &Path,
    resume: Option<&Path>,
    progress: &mut dyn FnMut(usize, f64, f64),
) -> Result<TrainSummary> {
    let data = load_dataset(cfg)?;
    let mut tr = Trainer::<T>::new(cfg.clone(), data)?;
    let digest = cfg.digest();
    if let Some(path) = resume {
        let ck = Checkpoint::<T>::load(path, digest)?;
        ck.restore(&mut tr.graph, Some(&mut tr.optim))?;
    }
    std::fs::create_dir_all(out)?;
    let log_path = out.join("loss.tsv");
    let log_text = truncate_log(&log_path, tr.iteration())?;
    let mut log = std::io::BufWriter::new(std::fs::File::create(&log_path)?);
    log.write_all(log_text.as_bytes())?;
    let mut final_loss = f64::NAN;
    while tr.iteration() < cfg.max_iter {
        let it = tr.iteration();
        let (lr, loss) = tr.step()?;
        final_loss = loss;
        writeln!(log, "{it}\t{lr:?}\t{loss:?}")?;
        progress(it, lr, loss);
        let done = it + 1;
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
            log.flush()?;
            Checkpoint::capture(&tr.graph, Some(&tr.optim), digest).save(&out.join(checkpoint_name(done)))?;
        }
    }
    log.flush()?;
    let checkpoint = out.join("checkpoint.bin");
    Checkpoint::capture(&tr.graph, Some(&tr.optim), digest).save(&checkpoint)?;
    let eval = evaluate(&mut tr.graph, cfg, &tr.data, false)?;
    std::fs::write(out.join("metrics.txt"), eval.report.to_text())?;
    Ok(TrainSummary {
        iterations: tr.iteration(),
        final_loss,
        report: eval.report,
        checkpoint,
    })
}

/// Evaluates `checkpoint` on the configured data; writes `metrics.txt`,
/// `predictions.tensor` and (landmarks) `nme.txt` when `out` is given.
pub fn eval<T: Scalar>(cfg: &RunConfig, checkpoint: &Path, out: Option<&Path>, flip: bool) -> Result<MetricsReport> {
    let data = load_dataset(cfg)?;
    let mut graph = build_network::<T>(&cfg.network, cfg.seed)?;
    Checkpoint::<T>::load(checkpoint, cfg.digest())?.restore(&mut graph, None)?;
    let ev = evaluate(&mut graph, cfg, &data, flip)?;
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("metrics.txt"), ev.report.to_text())?;
        super::io::write_tensor(&dir.join("predictions.tensor"), &ev.predictions)?;
        if !ev.report.nmes.is_empty() {
            std::fs::write(dir.join("nme.txt"), ev.report.nme_list())?;
        }
    }
    Ok(ev.report)
}

/// Finite-difference check of the configured network's task loss with
/// respect to every parameter and the input. `fault` scales the analytic
/// gradient of the first parameter (negative control).
pub fn gradcheck(cfg: &RunConfig, fault: Option<f64>) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut graph = build_network::<f64>(&cfg.network, cfg.seed)?;
    let mut rng = stream(cfg.seed ^ GRADCHECK_STREAM, 0);
    let shape = cfg.network.input_chw().with_batch(2);
    let input = Tensor::from_fn(shape, |_, _, _, _| rng.sample::<f64, _>(StandardNormal));
    let head = cfg.network.head;
    let outputs: Vec<NodeId> = graph
        .outputs()
        .iter()
        .filter(|(n, _)| n == "logits" || n.starts_with('p'))
        .map(|(_, id)| *id)
        .collect();
    let mut labels: Option<Vec<u32>> = None;
    let mut weights: Vec<Option<Tensor<f64>>> = vec![None; outputs.len()];
    let k = cfg.network.out_dim as u32;
    let mut objective = |_: &LayerGraph<f64>, tape: &Tape<f64>| -> Result<(f64, Vec<(NodeId, Tensor<f64>)>)> {
        if head != HeadKind::V2p {
            let y = tape.value(outputs[0]);
            let s = y.shape();
            let lab = labels.get_or_insert_with(|| (0..s.n * s.plane()).map(|i| (i as u32 * 7 + 3) % k).collect());
            let (loss, g) = softmax_cross_entropy(y, lab, IGNORE_INDEX)?;
            return Ok((loss, vec![(outputs[0], g)]));
        }
        let mut loss = 0.0;
        let mut seeds = Vec::new();
        for (slot, &id) in outputs.iter().enumerate() {
            let y = tape.value(id);
            let r = weights[slot].get_or_insert_with(|| {
                let mut rr = stream(GRADCHECK_STREAM, slot as u64 + 1);
                Tensor::from_fn(y.shape(), |_, _, _, _| rr.sample(StandardNormal))
            });
            loss += y.data().iter().zip(r.data()).map(|(a, b)| a * b).sum::<f64>();
            seeds.push((id, r.clone()));
        }
        Ok((loss, seeds))
    };
    let gc = GradCheckConfig {
        samples_per_tensor: cfg.gradcheck_samples,
        seed: cfg.seed,
        ..GradCheckConfig::default()
    };
    check_graph(&mut graph, &input, Mode::Train, &mut objective, &gc, true, fault)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cli::config::Precision;

    fn quick(task_preset: &str) -> RunConfig {
        let mut c = RunConfig::preset(task_preset).unwrap();
        c.network.input_size = (32, 32);
        c.max_iter = 6;
        c.data_samples = 6;
        c.batch_size = 2;
        c.checkpoint_every = 3;
        c
    }

    #[test]
    fn resume_is_bit_exact() {
        let cfg = quick("toy-seg");
        let dir = tempfile::tempdir().unwrap();
        let full = dir.path().join("full");
        let part = dir.path().join("part");
        train::<f64>(&cfg, &full, None, &mut |_, _, _| {}).unwrap();
        let mut first = cfg.clone();
        first.max_iter = 3;
        // a run stopped after the iteration-3 checkpoint
        let ck_cfg = cfg.clone();
        let data = load_dataset(&ck_cfg).unwrap();
        let mut tr = Trainer::<f64>::new(ck_cfg.clone(), data).unwrap();
        for _ in 0..3 {
            tr.step().unwrap();
        }
        std::fs::create_dir_all(&part).unwrap();
        let ck = part.join("ck.bin");
        Checkpoint::capture(&tr.graph, Some(&tr.optim), ck_cfg.digest()).save(&ck).unwrap();
        train::<f64>(&cfg, &part, Some(&ck), &mut |_, _, _| {}).unwrap();
        let a = std::fs::read(full.join("checkpoint.bin")).unwrap();
        let b = std::fs::read(part.join("checkpoint.bin")).unwrap();
        assert_eq!(a, b);
        let log = std::fs::read_to_string(part.join("loss.tsv")).unwrap();
        assert!(log.lines().nth(1).unwrap().starts_with("3\t"));
        assert!(full.join(checkpoint_name(3)).exists() && full.join(checkpoint_name(6)).exists());
        assert!(first.max_iter < cfg.max_iter);
    }

    #[test]
    fn eval_reproduces_training_metric() {
        for preset in ["toy-seg", "toy-lm"] {
            let cfg = quick(preset);
            let dir = tempfile::tempdir().unwrap();
            let s = train::<f64>(&cfg, dir.path(), None, &mut |_, _, _| {}).unwrap();
            let r = eval::<f64>(&cfg, &s.checkpoint, Some(dir.path()), false).unwrap();
            let key = headline(cfg.task);
            assert_eq!(r.get(key), s.report.get(key), "{preset}");
            assert!(dir.path().join("predictions.tensor").exists());
        }
    }

    #[test]
    fn digest_mismatch_is_refused() {
        let cfg = quick("toy-seg");
        let dir = tempfile::tempdir().unwrap();
        let s = train::<f32>(&RunConfig { precision: Precision::Fast, ..cfg.clone() }, dir.path(), None, &mut |_, _, _| {}).unwrap();
        let mut other = cfg.clone();
        other.precision = Precision::Fast;
        other.lr = 0.5;
        assert!(matches!(eval::<f32>(&other, &s.checkpoint, None, false), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn pyramid_training_is_rejected() {
        let cfg = RunConfig::preset("w18v2p").unwrap();
        let data = Dataset {
            task: Task::Pyramid,
            classes: 1,
            samples: Vec::new(),
        };
        assert!(matches!(Trainer::<f32>::new(cfg, data), Err(Error::Invalid { .. })));
    }

    #[test]
    fn classification_steps() {
        let mut cfg = RunConfig::preset("w18cls").unwrap();
        cfg.network = crate::topology::presets::tiny();
        cfg.network.head = HeadKind::ClsCi;
        cfg.network.out_dim = 4;
        cfg.batch_size = 2;
        cfg.data_samples = 4;
        let data = load_dataset(&cfg).unwrap();
        let mut tr = Trainer::<f32>::new(cfg.clone(), data).unwrap();
        let (_, loss) = tr.step().unwrap();
        assert!((loss - 4f64.ln()).abs() < 0.5, "{loss}");
        let r = evaluate(&mut tr.graph, &cfg, &tr.data, false).unwrap().report;
        assert!(r.get("top1").is_some());
    }

    #[test]
    fn nan_loss_names_the_iteration() {
        let mut cfg = quick("toy-seg");
        cfg.lr = 1e30;
        cfg.momentum = 0.0;
        let data = load_dataset(&cfg).unwrap();
        let mut tr = Trainer::<f64>::new(cfg, data).unwrap();
        let err = (0..6).map(|_| tr.step()).find_map(|r| r.err()).expect("diverges");
        assert!(matches!(&err, Error::NonFinite { op } if op.contains("iteration")), "{err}");
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn gradcheck_is_deterministic_and_catches_faults() {
        let mut cfg = RunConfig::preset("tiny").unwrap();
        cfg.gradcheck_samples = 3;
        let a = gradcheck(&cfg, None).unwrap();
        let b = gradcheck(&cfg, None).unwrap();
        assert_eq!(a.max_rel_error, b.max_rel_error);
        assert!(a.passed(GRADCHECK_TOLERANCE), "{} at {}", a.max_rel_error, a.worst);
        let bad = gradcheck(&cfg, Some(1.5)).unwrap();
        assert!(!bad.passed(GRADCHECK_TOLERANCE));
    }
}
