//! Static layer graph: an ordered DAG of ops over named parameter tensors.
//!
//! Nodes are appended in topological order by [`GraphBuilder`]; forward and
//! backward evaluation walk that order, and the cost model walks it without
//! touching any data.

mod builder;
mod exec;

pub use builder::{GraphBuilder, Init};
pub use exec::{Mode, Tape};

use crate::error::{Error, Result};
use crate::kernels::resample::pool_output_size;
use crate::kernels::{ConvSpec, UpsampleMode};
use crate::tensor::{Scalar, Shape4, Tensor};

pub type NodeId = usize;
pub type ParamId = usize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamKind {
    Weight,
    Bias,
    BnScale,
    BnShift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(&self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }

    /// Weight decay applies to conv/linear weights only.
    pub fn decays(&self) -> bool {
        matches!(self, ParamKind::Weight)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
}

/// Grouping label used by the cost report.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct LayerTag {
    pub stage: String,
    pub branch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    Input,
    Conv {
        spec: ConvSpec,
        weight: ParamId,
        bias: Option<ParamId>,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        mean: ParamId,
        var: ParamId,
    },
    Relu,
    /// Elementwise sum of all inputs, in input order.
    Add,
    Upsample {
        factor: usize,
        mode: UpsampleMode,
    },
    AvgPool {
        kernel: (usize, usize),
        stride: (usize, usize),
    },
    GlobalAvgPool,
    /// Channel concatenation, in input order.
    Concat,
    /// Channel range `[start, start + len)`.
    Slice {
        start: usize,
        len: usize,
    },
    Linear {
        weight: ParamId,
        bias: Option<ParamId>,
    },
}

impl Op {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Conv { .. } => "conv",
            Op::BatchNorm { .. } => "bn",
            Op::Relu => "relu",
            Op::Add => "add",
            Op::Upsample { .. } => "upsample",
            Op::AvgPool { .. } => "avgpool",
            Op::GlobalAvgPool => "gap",
            Op::Concat => "concat",
            Op::Slice { .. } => "slice",
            Op::Linear { .. } => "linear",
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        match *self {
            Op::Conv { weight, bias, .. } | Op::Linear { weight, bias } => {
                std::iter::once(weight).chain(bias).collect()
            }
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            } => vec![gamma, beta, mean, var],
            _ => Vec::new(),
        }
    }
}

/// Per-sample feature shape (channels, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Chw {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Chw {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Chw { c, h, w }
    }

    pub fn with_batch(&self, n: usize) -> Shape4 {
        Shape4::new(n, self.c, self.h, self.w)
    }
}

impl std::fmt::Display for Chw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Node {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub tag: LayerTag,
    pub shape: Chw,
}

#[derive(Clone, Debug)]
pub struct LayerGraph<T: Scalar = f64> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    outputs: Vec<(String, NodeId)>,
    bn_momentum: f64,
    bn_epsilon: f64,
}

impl<T: Scalar> LayerGraph<T> {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output_id(&self, name: &str) -> Option<NodeId> {
        self.outputs.iter().find(|(n, _)| n == name).map(|&(_, id)| id)
    }

    pub fn input_shape(&self) -> Chw {
        self.nodes[0].shape
    }

    pub fn bn_settings(&self) -> (f64, f64) {
        (self.bn_momentum, self.bn_epsilon)
    }

    /// Number of trainable scalars, counted from the instantiated tensors.
    pub fn trainable_scalars(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.kind.trainable())
            .map(|p| p.value.len())
            .sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    /// Re-derive every node shape for a different input resolution.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<Chw>> {
        let mut shapes: Vec<Chw> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let ins: Vec<Chw> = node.inputs.iter().map(|&i| shapes[i]).collect();
            let s = match &node.op {
                Op::Input => Chw::new(node.shape.c, h, w),
                op => infer_op_shape(op, &ins, &self.params)?,
            };
            shapes.push(s);
        }
        Ok(shapes)
    }

    /// Build-time acyclicity and ownership checks.
    pub fn validate(&self) -> Result<()> {
        let mut owner = vec![None; self.params.len()];
        for (id, node) in self.nodes.iter().enumerate() {
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(Error::invalid("graph", format!("node {} is not topologically ordered", node.name)));
            }
            for p in node.op.param_ids() {
                if owner[p].replace(id).is_some() {
                    return Err(Error::invalid(
                        "graph",
                        format!("parameter {} shared by several nodes", self.params[p].name),
                    ));
                }
            }
        }
        if let Some(i) = owner.iter().position(|o| o.is_none()) {
            return Err(Error::invalid(
                "graph",
                format!("parameter {} is not used by any node", self.params[i].name),
            ));
        }
        Ok(())
    }
}

pub(crate) fn infer_op_shape<T: Scalar>(op: &Op, ins: &[Chw], params: &[Param<T>]) -> Result<Chw> {
    let first = *ins
        .first()
        .ok_or_else(|| Error::invalid("graph", "op without inputs"))?;
    Ok(match op {
        Op::Input => first,
        Op::Conv { spec, .. } => {
            if first.c != spec.in_channels {
                return Err(Error::shape(
                    "conv2d",
                    format!("input has {} channels, spec {}", first.c, spec.in_channels),
                ));
            }
            let (h, w) = spec.output_size(first.h, first.w)?;
            if h == 0 || w == 0 {
                return Err(Error::shape("conv2d", "output smaller than 1"));
            }
            Chw::new(spec.out_channels, h, w)
        }
        Op::BatchNorm { gamma, .. } => {
            if params[*gamma].value.len() != first.c {
                return Err(Error::shape("batch_norm", "channel count"));
            }
            first
        }
        Op::Relu => first,
        Op::Add => {
            if ins.iter().any(|s| *s != first) {
                return Err(Error::shape("add", format!("operands {ins:?}")));
            }
            first
        }
        Op::Upsample { factor, .. } => {
            if *factor < 2 || !factor.is_power_of_two() {
                return Err(Error::invalid("upsample", format!("factor {factor}")));
            }
            Chw::new(first.c, first.h * factor, first.w * factor)
        }
        Op::AvgPool { kernel, stride } => {
            let (h, w) = pool_output_size(first.h, first.w, *kernel, *stride)?;
            Chw::new(first.c, h, w)
        }
        Op::GlobalAvgPool => {
            if first.h * first.w == 0 {
                return Err(Error::shape("global_avg_pool", "empty spatial extent"));
            }
            Chw::new(first.c, 1, 1)
        }
        Op::Concat => {
            if ins.iter().any(|s| (s.h, s.w) != (first.h, first.w)) {
                return Err(Error::shape("concat", format!("operands {ins:?}")));
            }
            Chw::new(ins.iter().map(|s| s.c).sum(), first.h, first.w)
        }
        Op::Slice { start, len } => {
            if *len == 0 || start + len > first.c {
                return Err(Error::shape(
                    "slice",
                    format!("channels [{start}, {}) of {}", start + len, first.c),
                ));
            }
            Chw::new(*len, first.h, first.w)
        }
        Op::Linear { weight, .. } => {
            let ws = params[*weight].value.shape();
            if ws.c * ws.h * ws.w != first.c * first.h * first.w {
                return Err(Error::shape("linear", "feature count"));
            }
            Chw::new(ws.n, 1, 1)
        }
    })
}
