//! Flat `key = value` run configuration.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::path::PathBuf;

use fnv::FnvHasher;

use crate::error::{Error, Result};
use crate::kernels::UpsampleMode;
use crate::optim::{Schedule, SgdConfig};
use crate::topology::{presets, HeadKind, NetworkConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Segmentation,
    Landmarks,
    Classification,
    Pyramid,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Segmentation, Task::Landmarks, Task::Classification, Task::Pyramid];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::Segmentation => "segmentation",
            Task::Landmarks => "landmarks",
            Task::Classification => "classification",
            Task::Pyramid => "pyramid",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Task::ALL.into_iter().find(|t| t.as_str() == s)
    }

    /// Whether `head` produces the outputs this task consumes.
    pub fn accepts(&self, head: HeadKind) -> bool {
        match self {
            Task::Segmentation | Task::Landmarks => head.is_dense(),
            Task::Classification => head.is_classification(),
            Task::Pyramid => head == HeadKind::V2p,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    /// f64 with finiteness checks after every kernel.
    Verify,
    /// f32 without checks.
    Fast,
}

impl Precision {
    pub fn as_str(&self) -> &'static str {
        match self {
            Precision::Verify => "verify",
            Precision::Fast => "fast",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "verify" => Some(Precision::Verify),
            "fast" => Some(Precision::Fast),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    Poly,
    Step,
    Constant,
}

impl ScheduleKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ScheduleKind::Poly => "poly",
            ScheduleKind::Step => "step",
            ScheduleKind::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "poly" => Some(ScheduleKind::Poly),
            "step" => Some(ScheduleKind::Step),
            "constant" => Some(ScheduleKind::Constant),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Augment {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub rotation_deg: f64,
    /// Training crop `(H, W)`; `None` crops to the network input size.
    pub crop: Option<(usize, usize)>,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip_prob: 0.5,
            scale_min: 1.0,
            scale_max: 1.0,
            rotation_deg: 0.0,
            crop: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: Task,
    pub seed: u64,
    pub precision: Precision,
    pub network: NetworkConfig,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub schedule: ScheduleKind,
    pub poly_power: f64,
    pub max_iter: usize,
    /// Step-schedule milestones, in epochs.
    pub milestones: Vec<usize>,
    pub lr_factor: f64,
    pub iters_per_epoch: usize,
    pub batch_size: usize,
    pub data: DataSource,
    pub data_samples: usize,
    pub augment: Augment,
    /// Zero writes only the final checkpoint.
    pub checkpoint_every: usize,
    pub heatmap_sigma: f64,
    /// Added to decoded image coordinates after scaling by the heatmap stride.
    pub coord_shift: f64,
    pub nme_normalizer: f64,
    pub gradcheck_samples: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            task: Task::Segmentation,
            seed: 0,
            precision: Precision::Verify,
            network: NetworkConfig::default(),
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            nesterov: false,
            schedule: ScheduleKind::Poly,
            poly_power: 0.9,
            max_iter: 1000,
            milestones: Vec::new(),
            lr_factor: 0.1,
            iters_per_epoch: 100,
            batch_size: 4,
            data: DataSource::Synthetic,
            data_samples: 64,
            augment: Augment::default(),
            checkpoint_every: 0,
            heatmap_sigma: crate::metrics::DEFAULT_SIGMA,
            coord_shift: 0.0,
            nme_normalizer: 64.0,
            gradcheck_samples: 64,
        }
    }
}

const KEYS: [&str; 40] = [
    "task",
    "seed",
    "precision",
    "width",
    "stage_blocks",
    "units_per_branch",
    "stage1_units",
    "stage1_bottleneck_width",
    "stem_width",
    "head",
    "out_dim",
    "pyramid_levels",
    "input_size",
    "input_channels",
    "fusion_upsample",
    "head_upsample",
    "bn_momentum",
    "bn_epsilon",
    "lr",
    "momentum",
    "weight_decay",
    "nesterov",
    "schedule",
    "poly_power",
    "max_iter",
    "milestones",
    "lr_factor",
    "iters_per_epoch",
    "batch_size",
    "data",
    "data_samples",
    "flip_prob",
    "scale_min",
    "scale_max",
    "rotation_deg",
    "crop",
    "checkpoint_every",
    "heatmap_sigma",
    "coord_shift",
    "nme_normalizer",
];

/// `gradcheck_samples` is rendered after the ordered block above.
const EXTRA_KEYS: [&str; 1] = ["gradcheck_samples"];

pub fn parse_size(s: &str) -> Option<(usize, usize)> {
    let (h, w) = s.trim().split_once(['x', 'X'])?;
    Some((h.trim().parse().ok()?, w.trim().parse().ok()?))
}

fn parse_list(s: &str) -> Option<Vec<usize>> {
    if s.trim().is_empty() {
        return Some(Vec::new());
    }
    s.split(',').map(|v| v.trim().parse().ok()).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn value_err(line: usize, field: &str, value: &str, expected: &str) -> Error {
    Error::config(line, field, format!("`{value}` is not {expected}"))
}

impl RunConfig {
    /// Run configuration for a named preset; network presets get the task
    /// their head implies.
    pub fn preset(name: &str) -> Option<RunConfig> {
        let mut c = RunConfig::default();
        match name {
            "toy-seg" | "toy-seg3" => {
                c.network = toy_network(if name == "toy-seg" { 2 } else { 3 });
                c.precision = Precision::Fast;
                c.lr = 0.05;
                c.weight_decay = 0.0001;
                c.max_iter = 2000;
                c.batch_size = 4;
                c.data_samples = 64;
                c.augment.flip_prob = 0.5;
            }
            "toy-lm" => {
                c.task = Task::Landmarks;
                c.network = toy_network(5);
                c.precision = Precision::Fast;
                c.lr = 0.5;
                c.weight_decay = 0.0001;
                c.max_iter = 2000;
                c.batch_size = 4;
                c.data_samples = 64;
                c.augment.flip_prob = 0.5;
            }
            _ => {
                let net = presets::by_name(name)?;
                c.task = if net.head.is_classification() {
                    Task::Classification
                } else if net.head == HeadKind::V2p {
                    Task::Pyramid
                } else if name.contains("lm") {
                    Task::Landmarks
                } else {
                    Task::Segmentation
                };
                c.network = net;
            }
        }
        Some(c)
    }

    pub fn preset_names() -> Vec<&'static str> {
        let mut v = presets::NAMES.to_vec();
        v.extend(["toy-seg", "toy-seg3", "toy-lm"]);
        v
    }

    /// Loads a preset by name, or parses the file at `spec`.
    pub fn load(spec: &str) -> Result<RunConfig> {
        if let Some(c) = RunConfig::preset(spec) {
            return Ok(c);
        }
        let text = std::fs::read_to_string(spec).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::config(0, "config", format!("`{spec}` is neither a preset nor a readable file"))
            } else {
                Error::Io(e)
            }
        })?;
        RunConfig::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut c = RunConfig::default();
        let mut lines: HashMap<String, usize> = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let ln = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::config(ln, line, "expected `key = value`"))?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) && !EXTRA_KEYS.contains(&key) {
                return Err(Error::config(ln, key, "unknown key"));
            }
            if let Some(prev) = lines.insert(key.to_string(), ln) {
                return Err(Error::config(ln, key, format!("duplicate key (first set on line {prev})")));
            }
            c.set(key, value, ln)?;
        }
        c.validate_at(|field| lines.get(field).copied().unwrap_or(0))?;
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str, ln: usize) -> Result<()> {
        macro_rules! num {
            ($what:expr) => {
                v.parse().map_err(|_| value_err(ln, key, v, $what))?
            };
        }
        let n = &mut self.network;
        match key {
            "task" => self.task = Task::parse(v).ok_or_else(|| value_err(ln, key, v, "a task"))?,
            "seed" => self.seed = num!("an unsigned integer"),
            "precision" => {
                self.precision = Precision::parse(v).ok_or_else(|| value_err(ln, key, v, "verify or fast"))?
            }
            "width" => n.width = num!("an unsigned integer"),
            "stage_blocks" => {
                let list = parse_list(v).filter(|l| l.len() == 3);
                n.stage_blocks = list
                    .map(|l| [l[0], l[1], l[2]])
                    .ok_or_else(|| value_err(ln, key, v, "three comma-separated counts"))?;
            }
            "units_per_branch" => n.units_per_branch = num!("an unsigned integer"),
            "stage1_units" => n.stage1_units = num!("an unsigned integer"),
            "stage1_bottleneck_width" => n.stage1_bottleneck_width = num!("an unsigned integer"),
            "stem_width" => n.stem_width = num!("an unsigned integer"),
            "head" => n.head = HeadKind::parse(v).ok_or_else(|| value_err(ln, key, v, "a head name"))?,
            "out_dim" => n.out_dim = num!("an unsigned integer"),
            "pyramid_levels" => n.pyramid_levels = num!("an unsigned integer"),
            "input_size" => n.input_size = parse_size(v).ok_or_else(|| value_err(ln, key, v, "HxW"))?,
            "input_channels" => n.input_channels = num!("an unsigned integer"),
            "fusion_upsample" => {
                n.fusion_upsample = UpsampleMode::parse(v).ok_or_else(|| value_err(ln, key, v, "nearest or bilinear"))?
            }
            "head_upsample" => {
                n.head_upsample = UpsampleMode::parse(v).ok_or_else(|| value_err(ln, key, v, "nearest or bilinear"))?
            }
            "bn_momentum" => n.bn_momentum = num!("a number"),
            "bn_epsilon" => n.bn_epsilon = num!("a number"),
            "lr" => self.lr = num!("a number"),
            "momentum" => self.momentum = num!("a number"),
            "weight_decay" => self.weight_decay = num!("a number"),
            "nesterov" => self.nesterov = num!("true or false"),
            "schedule" => {
                self.schedule = ScheduleKind::parse(v).ok_or_else(|| value_err(ln, key, v, "poly, step or constant"))?
            }
            "poly_power" => self.poly_power = num!("a number"),
            "max_iter" => self.max_iter = num!("an unsigned integer"),
            "milestones" => {
                self.milestones = parse_list(v).ok_or_else(|| value_err(ln, key, v, "a comma-separated list"))?
            }
            "lr_factor" => self.lr_factor = num!("a number"),
            "iters_per_epoch" => self.iters_per_epoch = num!("an unsigned integer"),
            "batch_size" => self.batch_size = num!("an unsigned integer"),
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    "" => return Err(value_err(ln, key, v, "`synthetic` or a directory")),
                    path => DataSource::Directory(PathBuf::from(path)),
                }
            }
            "data_samples" => self.data_samples = num!("an unsigned integer"),
            "flip_prob" => self.augment.flip_prob = num!("a number"),
            "scale_min" => self.augment.scale_min = num!("a number"),
            "scale_max" => self.augment.scale_max = num!("a number"),
            "rotation_deg" => self.augment.rotation_deg = num!("a number"),
            "crop" => {
                self.augment.crop = match v {
                    "none" => None,
                    s => Some(parse_size(s).ok_or_else(|| value_err(ln, key, v, "none or HxW"))?),
                }
            }
            "checkpoint_every" => self.checkpoint_every = num!("an unsigned integer"),
            "heatmap_sigma" => self.heatmap_sigma = num!("a number"),
            "coord_shift" => self.coord_shift = num!("a number"),
            "nme_normalizer" => self.nme_normalizer = num!("a number"),
            "gradcheck_samples" => self.gradcheck_samples = num!("an unsigned integer"),
            _ => return Err(Error::config(ln, key, "unknown key")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_at(|_| 0)
    }

    fn validate_at(&self, line_of: impl Fn(&str) -> usize) -> Result<()> {
        let fail = |field: &str, detail: String| Err(Error::config(line_of(field), field, detail));
        let n = &self.network;
        let positive_counts = [
            ("width", n.width),
            ("units_per_branch", n.units_per_branch),
            ("stage1_units", n.stage1_units),
            ("stage1_bottleneck_width", n.stage1_bottleneck_width),
            ("stem_width", n.stem_width),
            ("out_dim", n.out_dim),
            ("input_channels", n.input_channels),
            ("max_iter", self.max_iter),
            ("iters_per_epoch", self.iters_per_epoch),
            ("batch_size", self.batch_size),
            ("data_samples", self.data_samples),
            ("gradcheck_samples", self.gradcheck_samples),
        ];
        for (field, v) in positive_counts {
            if v == 0 {
                return fail(field, "must be positive".into());
            }
        }
        if n.stage_blocks.contains(&0) {
            return fail("stage_blocks", "entries must be positive".into());
        }
        if n.head == HeadKind::V2p && n.pyramid_levels == 0 {
            return fail("pyramid_levels", "must be positive".into());
        }
        let open_unit = [("bn_momentum", n.bn_momentum)];
        for (field, v) in open_unit {
            if !(v > 0.0 && v < 1.0) {
                return fail(field, "must lie in (0, 1)".into());
            }
        }
        if !(self.momentum >= 0.0 && self.momentum < 1.0) {
            return fail("momentum", "must lie in [0, 1)".into());
        }
        let strictly_positive = [
            ("bn_epsilon", n.bn_epsilon),
            ("poly_power", self.poly_power),
            ("lr_factor", self.lr_factor),
            ("scale_min", self.augment.scale_min),
            ("heatmap_sigma", self.heatmap_sigma),
            ("nme_normalizer", self.nme_normalizer),
        ];
        for (field, v) in strictly_positive {
            if !(v > 0.0 && v.is_finite()) {
                return fail(field, "must be positive".into());
            }
        }
        let non_negative = [
            ("lr", self.lr),
            ("weight_decay", self.weight_decay),
            ("rotation_deg", self.augment.rotation_deg),
        ];
        for (field, v) in non_negative {
            if !(v >= 0.0 && v.is_finite()) {
                return fail(field, "must be non-negative".into());
            }
        }
        if !self.coord_shift.is_finite() {
            return fail("coord_shift", "must be finite".into());
        }
        if !(0.0..=1.0).contains(&self.augment.flip_prob) {
            return fail("flip_prob", "must lie in [0, 1]".into());
        }
        if !(self.augment.scale_max >= self.augment.scale_min && self.augment.scale_max.is_finite()) {
            return fail("scale_max", "must be at least scale_min".into());
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return fail("milestones", "must be strictly increasing".into());
        }
        if let Some((h, w)) = self.augment.crop {
            if h == 0 || w == 0 {
                return fail("crop", "must be positive".into());
            }
        }
        if !self.task.accepts(n.head) {
            return fail(
                "head",
                format!("head {} cannot serve the {} task", n.head.as_str(), self.task.as_str()),
            );
        }
        let (h, w) = n.input_size;
        let d = n.required_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return fail("input_size", format!("{h}x{w} must be a positive multiple of {d}"));
        }
        if let Some((ch, cw)) = self.augment.crop {
            if ch % d != 0 || cw % d != 0 {
                return fail("crop", format!("{ch}x{cw} must be a multiple of {d}"));
            }
        }
        n.validate().map_err(|e| Error::config(0, "network", e.to_string()))
    }

    /// Canonical text: every key in fixed order, floats in shortest
    /// round-trip form.
    pub fn render(&self) -> String {
        let n = &self.network;
        let a = &self.augment;
        let mut s = String::from("# hrnet-forge run configuration\n");
        let mut put = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        put("task", self.task.as_str().into());
        put("seed", self.seed.to_string());
        put("precision", self.precision.as_str().into());
        put("width", n.width.to_string());
        put("stage_blocks", join(&n.stage_blocks));
        put("units_per_branch", n.units_per_branch.to_string());
        put("stage1_units", n.stage1_units.to_string());
        put("stage1_bottleneck_width", n.stage1_bottleneck_width.to_string());
        put("stem_width", n.stem_width.to_string());
        put("head", n.head.as_str().into());
        put("out_dim", n.out_dim.to_string());
        put("pyramid_levels", n.pyramid_levels.to_string());
        put("input_size", format!("{}x{}", n.input_size.0, n.input_size.1));
        put("input_channels", n.input_channels.to_string());
        put("fusion_upsample", n.fusion_upsample.as_str().into());
        put("head_upsample", n.head_upsample.as_str().into());
        put("bn_momentum", format!("{:?}", n.bn_momentum));
        put("bn_epsilon", format!("{:?}", n.bn_epsilon));
        put("lr", format!("{:?}", self.lr));
        put("momentum", format!("{:?}", self.momentum));
        put("weight_decay", format!("{:?}", self.weight_decay));
        put("nesterov", self.nesterov.to_string());
        put("schedule", self.schedule.as_str().into());
        put("poly_power", format!("{:?}", self.poly_power));
        put("max_iter", self.max_iter.to_string());
        put("milestones", join(&self.milestones));
        put("lr_factor", format!("{:?}", self.lr_factor));
        put("iters_per_epoch", self.iters_per_epoch.to_string());
        put("batch_size", self.batch_size.to_string());
        put(
            "data",
            match &self.data {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Directory(p) => p.display().to_string(),
            },
        );
        put("data_samples", self.data_samples.to_string());
        put("flip_prob", format!("{:?}", a.flip_prob));
        put("scale_min", format!("{:?}", a.scale_min));
        put("scale_max", format!("{:?}", a.scale_max));
        put("rotation_deg", format!("{:?}", a.rotation_deg));
        put(
            "crop",
            match a.crop {
                None => "none".into(),
                Some((h, w)) => format!("{h}x{w}"),
            },
        );
        put("checkpoint_every", self.checkpoint_every.to_string());
        put("heatmap_sigma", format!("{:?}", self.heatmap_sigma));
        put("coord_shift", format!("{:?}", self.coord_shift));
        put("nme_normalizer", format!("{:?}", self.nme_normalizer));
        put("gradcheck_samples", self.gradcheck_samples.to_string());
        s
    }

    /// 64-bit FNV-1a of the canonical text.
    pub fn digest(&self) -> u64 {
        fnv1a64(self.render().as_bytes())
    }

    pub fn sgd(&self) -> SgdConfig {
        let schedule = match self.schedule {
            ScheduleKind::Constant => Schedule::Constant,
            ScheduleKind::Poly => Schedule::Poly {
                power: self.poly_power,
                max_iter: self.max_iter,
            },
            ScheduleKind::Step => Schedule::Step {
                milestones: self.milestones.clone(),
                factor: self.lr_factor,
                iters_per_epoch: self.iters_per_epoch,
            },
        };
        SgdConfig {
            base_lr: self.lr,
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
            schedule,
        }
    }

    /// Spatial size of training samples after augmentation.
    pub fn crop_size(&self) -> (usize, usize) {
        self.augment.crop.unwrap_or(self.network.input_size)
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// HRNet-tiny at 64x64 with `classes` outputs.
fn toy_network(classes: usize) -> NetworkConfig {
    let mut n = presets::tiny();
    n.out_dim = classes;
    n.input_size = (64, 64);
    n
}
