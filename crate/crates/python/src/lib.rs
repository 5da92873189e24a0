//! Python bindings: configs, network construction and inference, cost
//! reports, gradient checks, training and the evaluation metrics.

use std::collections::BTreeMap;
use std::path::PathBuf;

use hrnet_forge::cli::config::{Precision, RunConfig};
use hrnet_forge::cli::train;
use hrnet_forge::costmodel::{self, CostScope};
use hrnet_forge::metrics::{self, ConfusionMatrix, IGNORE_INDEX};
use hrnet_forge::topology::build_skeleton;
use hrnet_forge::{build_network, Error, LayerGraph, Mode, Shape4, Tensor};
use pyo3::exceptions::{PyArithmeticError, PyOSError, PyValueError};
use pyo3::prelude::*;

fn py_err(e: Error) -> PyErr {
    match e.exit_code() {
        2 => PyArithmeticError::new_err(e.to_string()),
        3 => PyOSError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

/// Run configuration: a preset or the flat `key = value` text format.
#[pyclass(name = "RunConfig", module = "hrnet_forge_py", from_py_object)]
#[derive(Clone)]
struct PyRunConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyRunConfig {
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        RunConfig::preset(name)
            .map(|inner| PyRunConfig { inner })
            .ok_or_else(|| PyValueError::new_err(format!("unknown preset `{name}`")))
    }

    #[staticmethod]
    fn preset_names() -> Vec<&'static str> {
        RunConfig::preset_names()
    }

    #[staticmethod]
    fn parse(text: &str) -> PyResult<Self> {
        RunConfig::parse(text).map(|inner| PyRunConfig { inner }).map_err(py_err)
    }

    #[staticmethod]
    fn load(spec: &str) -> PyResult<Self> {
        RunConfig::load(spec).map(|inner| PyRunConfig { inner }).map_err(py_err)
    }

    fn render(&self) -> String {
        self.inner.render()
    }

    fn digest(&self) -> u64 {
        self.inner.digest()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(py_err)
    }

    #[getter]
    fn task(&self) -> &'static str {
        self.inner.task.as_str()
    }

    #[getter]
    fn head(&self) -> &'static str {
        self.inner.network.head.as_str()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.network.width
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, seed: u64) {
        self.inner.seed = seed;
    }

    #[getter]
    fn max_iter(&self) -> usize {
        self.inner.max_iter
    }

    #[setter]
    fn set_max_iter(&mut self, n: usize) {
        self.inner.max_iter = n;
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.network.input_size
    }

    #[setter]
    fn set_input_size(&mut self, size: (usize, usize)) {
        self.inner.network.input_size = size;
    }

    #[getter]
    fn precision(&self) -> &'static str {
        self.inner.precision.as_str()
    }

    #[setter]
    fn set_precision(&mut self, p: &str) -> PyResult<()> {
        self.inner.precision = match p {
            "verify" => Precision::Verify,
            "fast" => Precision::Fast,
            _ => return Err(PyValueError::new_err(format!("precision `{p}` is not verify|fast"))),
        };
        Ok(())
    }

    fn __repr__(&self) -> String {
        let n = &self.inner.network;
        format!(
            "RunConfig(task={}, head={}, width={}, input={}x{})",
            self.inner.task.as_str(),
            n.head.as_str(),
            n.width,
            n.input_size.0,
            n.input_size.1
        )
    }
}

/// An instantiated network in double precision.
#[pyclass(name = "Network", module = "hrnet_forge_py", unsendable)]
struct PyNetwork {
    graph: LayerGraph<f64>,
    channels: usize,
}

#[pymethods]
impl PyNetwork {
    #[new]
    #[pyo3(signature = (config, seed = None))]
    fn new(config: &PyRunConfig, seed: Option<u64>) -> PyResult<Self> {
        let cfg = &config.inner;
        cfg.validate().map_err(py_err)?;
        let graph = build_network::<f64>(&cfg.network, seed.unwrap_or(cfg.seed)).map_err(py_err)?;
        Ok(PyNetwork {
            graph,
            channels: cfg.network.input_channels,
        })
    }

    fn num_params(&self) -> u64 {
        costmodel::count_params_dynamic(&self.graph)
    }

    fn param_names(&self) -> Vec<String> {
        self.graph.params().iter().map(|p| p.name.clone()).collect()
    }

    fn output_names(&self) -> Vec<String> {
        self.graph.outputs().iter().map(|(n, _)| n.clone()).collect()
    }

    /// Output shapes `(C, H, W)` for an `h x w` input.
    fn output_shapes(&self, h: usize, w: usize) -> PyResult<BTreeMap<String, (usize, usize, usize)>> {
        let shapes = self.graph.infer_shapes(h, w).map_err(py_err)?;
        Ok(self
            .graph
            .outputs()
            .iter()
            .map(|(n, id)| {
                let s = shapes[*id];
                (n.clone(), (s.c, s.h, s.w))
            })
            .collect())
    }

    /// Eval-mode forward pass on a flat NCHW buffer. Returns, per named
    /// output, its `(N, C, H, W)` shape and flat data.
    #[allow(clippy::type_complexity)]
    fn forward(
        &mut self,
        data: Vec<f64>,
        n: usize,
        h: usize,
        w: usize,
    ) -> PyResult<BTreeMap<String, ((usize, usize, usize, usize), Vec<f64>)>> {
        let input = Tensor::from_vec(Shape4::new(n, self.channels, h, w), data).map_err(py_err)?;
        let tape = self.graph.forward(&input, Mode::Eval).map_err(py_err)?;
        Ok(self
            .graph
            .outputs()
            .iter()
            .map(|(name, id)| {
                let t = tape.value(*id);
                let s = t.shape();
                (name.clone(), ((s.n, s.c, s.h, s.w), t.data().to_vec()))
            })
            .collect())
    }
}

/// Whole-network cost: `params`, `macs` and `gflops`, plus the per-layer TSV.
#[pyfunction]
#[pyo3(signature = (config, size = None))]
fn cost(py: Python<'_>, config: &PyRunConfig, size: Option<(usize, usize)>) -> PyResult<(u64, u64, f64, String)> {
    let net = config.inner.network.clone();
    let size = size.unwrap_or(net.input_size);
    py.detach(|| {
        let g = build_skeleton::<f32>(&net)?;
        costmodel::report(&g, size, CostScope::Full)
    })
    .map(|r| (r.params, r.macs, r.gflops(), r.to_tsv()))
    .map_err(py_err)
}

/// Finite-difference check of the whole network; returns
/// `(max_rel_error, worst_coordinate, checked, passed)`.
#[pyfunction]
fn gradcheck(py: Python<'_>, config: &PyRunConfig) -> PyResult<(f64, String, usize, bool)> {
    let cfg = config.inner.clone();
    let r = py.detach(|| train::gradcheck(&cfg, None)).map_err(py_err)?;
    let pass = r.passed(train::GRADCHECK_TOLERANCE);
    Ok((r.max_rel_error, r.worst, r.checked, pass))
}

/// Trains into `out_dir` and returns the final metrics.
#[pyfunction]
fn train_run(py: Python<'_>, config: &PyRunConfig, out_dir: PathBuf) -> PyResult<BTreeMap<String, f64>> {
    let cfg = config.inner.clone();
    let summary = py
        .detach(|| {
            let mut quiet = |_: usize, _: f64, _: f64| {};
            match cfg.precision {
                Precision::Verify => train::train::<f64>(&cfg, &out_dir, None, &mut quiet),
                Precision::Fast => train::train::<f32>(&cfg, &out_dir, None, &mut quiet),
            }
        })
        .map_err(py_err)?;
    let mut m: BTreeMap<String, f64> = summary.report.values.into_iter().collect();
    m.insert("final_loss".into(), summary.final_loss);
    Ok(m)
}

/// Mean IoU over classes present in prediction or ground truth.
#[pyfunction]
#[pyo3(signature = (pred, gt, classes, ignore_index = IGNORE_INDEX))]
fn miou(pred: Vec<u32>, gt: Vec<u32>, classes: usize, ignore_index: u32) -> PyResult<f64> {
    let cm = ConfusionMatrix::from_labels(&pred, &gt, classes, ignore_index).map_err(py_err)?;
    metrics::miou(&cm).map(|s| s.miou).map_err(py_err)
}

#[pyfunction]
fn nme(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, normalizer: f64) -> PyResult<f64> {
    metrics::nme(&pred, &gt, normalizer).map_err(py_err)
}

/// `(auc, failure_rate)` of per-sample NMEs at threshold `alpha`.
#[pyfunction]
fn auc_fr(nmes: Vec<f64>, alpha: f64) -> PyResult<(f64, f64)> {
    metrics::auc_fr(&nmes, alpha).map_err(py_err)
}

/// Sub-pixel peak `(x, y)` of an `h x w` row-major heatmap.
#[pyfunction]
fn decode_heatmap(map: Vec<f64>, h: usize, w: usize) -> PyResult<(f64, f64)> {
    metrics::decode_plane(&map, h, w).map(|(p, _)| p).map_err(py_err)
}

#[pymodule]
fn hrnet_forge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRunConfig>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(cost, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(miou, m)?)?;
    m.add_function(wrap_pyfunction!(nme, m)?)?;
    m.add_function(wrap_pyfunction!(auc_fr, m)?)?;
    m.add_function(wrap_pyfunction!(decode_heatmap, m)?)?;
    Ok(())
}
