use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{infer_op_shape, Chw, LayerGraph, LayerTag, Node, NodeId, Op, Param, ParamId, ParamKind};
use crate::error::Result;
use crate::kernels::batchnorm::{DEFAULT_EPSILON, DEFAULT_MOMENTUM};
use crate::kernels::{ConvSpec, UpsampleMode};
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal on fan-in.
    Kaiming,
    Normal(f64),
    Zeros,
}

/// Appends nodes in topological order, naming parameters by a scope path.
pub struct GraphBuilder<T: Scalar> {
    nodes: Vec<Node>,
    params: Vec<Param<T>>,
    outputs: Vec<(String, NodeId)>,
    scope: Vec<String>,
    tag: LayerTag,
    rng: ChaCha8Rng,
    bn_momentum: f64,
    bn_epsilon: f64,
    skeleton: bool,
}

impl<T: Scalar> GraphBuilder<T> {
    pub fn new(seed: u64) -> Self {
        GraphBuilder {
            nodes: Vec::new(),
            params: Vec::new(),
            outputs: Vec::new(),
            scope: Vec::new(),
            tag: LayerTag::default(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn_momentum: DEFAULT_MOMENTUM,
            bn_epsilon: DEFAULT_EPSILON,
            skeleton: false,
        }
    }

    /// Zero-fill every weight instead of sampling. Used for static analysis of
    /// large configurations, where the zeroed pages are never touched.
    pub fn skeleton(mut self) -> Self {
        self.skeleton = true;
        self
    }

    pub fn with_bn(mut self, momentum: f64, epsilon: f64) -> Self {
        self.bn_momentum = momentum;
        self.bn_epsilon = epsilon;
        self
    }

    pub fn shape(&self, id: NodeId) -> Chw {
        self.nodes[id].shape
    }

    pub fn set_stage(&mut self, stage: &str) {
        self.tag.stage = stage.to_string();
        self.tag.branch = None;
    }

    pub fn set_branch(&mut self, branch: Option<usize>) {
        self.tag.branch = branch;
    }

    pub fn stage(&self) -> &str {
        &self.tag.stage
    }

    pub fn push_scope(&mut self, name: impl Into<String>) {
        self.scope.push(name.into());
    }

    pub fn pop_scope(&mut self) {
        self.scope.pop();
    }

    /// Run `f` inside a named scope.
    pub fn scoped<R>(&mut self, name: impl Into<String>, f: impl FnOnce(&mut Self) -> R) -> R {
        self.push_scope(name);
        let r = f(self);
        self.pop_scope();
        r
    }

    fn qualified(&self, leaf: &str) -> String {
        let mut parts: Vec<&str> = self.scope.iter().map(String::as_str).collect();
        if !leaf.is_empty() {
            parts.push(leaf);
        }
        parts.join(".")
    }

    fn add_param(&mut self, leaf: &str, kind: ParamKind, value: Tensor<T>) -> ParamId {
        let name = self.qualified(leaf);
        self.params.push(Param { name, kind, value });
        self.params.len() - 1
    }

    fn push_node(&mut self, leaf: &str, op: Op, inputs: Vec<NodeId>) -> Result<NodeId> {
        let ins: Vec<Chw> = inputs.iter().map(|&i| self.nodes[i].shape).collect();
        let shape = infer_op_shape(&op, &ins, &self.params)?;
        self.nodes.push(Node {
            name: self.qualified(leaf),
            op,
            inputs,
            tag: self.tag.clone(),
            shape,
        });
        Ok(self.nodes.len() - 1)
    }

    fn init_tensor(&mut self, shape: Shape4, fan_in: usize, init: Init) -> Tensor<T> {
        if self.skeleton {
            return Tensor::zeros(shape);
        }
        let std = match init {
            Init::Zeros => return Tensor::zeros(shape),
            Init::Kaiming => (2.0 / fan_in.max(1) as f64).sqrt(),
            Init::Normal(s) => s,
        };
        let dist = Normal::new(0.0, std).expect("finite std");
        let data = (0..shape.numel())
            .map(|_| T::of(dist.sample(&mut self.rng)))
            .collect();
        Tensor::from_vec(shape, data).expect("sized by shape")
    }

    pub fn input(&mut self, shape: Chw) -> NodeId {
        self.nodes.push(Node {
            name: "input".into(),
            op: Op::Input,
            inputs: Vec::new(),
            tag: LayerTag {
                stage: "input".into(),
                branch: None,
            },
            shape,
        });
        self.nodes.len() - 1
    }

    pub fn conv(&mut self, name: &str, x: NodeId, spec: ConvSpec, init: Init) -> Result<NodeId> {
        self.push_scope(name);
        let fan_in = spec.in_channels * spec.kernel.0 * spec.kernel.1;
        let w = self.init_tensor(spec.weight_shape(), fan_in, init);
        let weight = self.add_param("weight", ParamKind::Weight, w);
        let bias = spec.has_bias.then(|| {
            self.add_param(
                "bias",
                ParamKind::Bias,
                Tensor::zeros(Shape4::new(1, spec.out_channels, 1, 1)),
            )
        });
        self.pop_scope();
        self.push_node(name, Op::Conv { spec, weight, bias }, vec![x])
    }

    pub fn batch_norm(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        let c = self.shape(x).c;
        let s = Shape4::new(1, c, 1, 1);
        self.push_scope(name);
        let gamma = self.add_param("gamma", ParamKind::BnScale, Tensor::full(s, T::one()));
        let beta = self.add_param("beta", ParamKind::BnShift, Tensor::zeros(s));
        let mean = self.add_param("running_mean", ParamKind::RunningMean, Tensor::zeros(s));
        let var = self.add_param("running_var", ParamKind::RunningVar, Tensor::full(s, T::one()));
        self.pop_scope();
        self.push_node(
            name,
            Op::BatchNorm {
                gamma,
                beta,
                mean,
                var,
            },
            vec![x],
        )
    }

    pub fn relu(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push_node(name, Op::Relu, vec![x])
    }

    /// conv (no bias) -> BN -> optional ReLU.
    pub fn conv_bn(&mut self, name: &str, x: NodeId, spec: ConvSpec, relu: bool) -> Result<NodeId> {
        self.scoped(name, |b| {
            let y = b.conv("conv", x, spec, Init::Kaiming)?;
            let y = b.batch_norm("bn", y)?;
            if relu {
                b.relu("relu", y)
            } else {
                Ok(y)
            }
        })
    }

    pub fn add(&mut self, name: &str, xs: Vec<NodeId>) -> Result<NodeId> {
        if xs.len() == 1 {
            return Ok(xs[0]);
        }
        self.push_node(name, Op::Add, xs)
    }

    pub fn upsample(&mut self, name: &str, x: NodeId, factor: usize, mode: UpsampleMode) -> Result<NodeId> {
        self.push_node(name, Op::Upsample { factor, mode }, vec![x])
    }

    pub fn avg_pool(&mut self, name: &str, x: NodeId, kernel: (usize, usize), stride: (usize, usize)) -> Result<NodeId> {
        self.push_node(name, Op::AvgPool { kernel, stride }, vec![x])
    }

    pub fn global_avg_pool(&mut self, name: &str, x: NodeId) -> Result<NodeId> {
        self.push_node(name, Op::GlobalAvgPool, vec![x])
    }

    pub fn concat(&mut self, name: &str, xs: Vec<NodeId>) -> Result<NodeId> {
        self.push_node(name, Op::Concat, xs)
    }

    pub fn slice(&mut self, name: &str, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        self.push_node(name, Op::Slice { start, len }, vec![x])
    }

    pub fn linear(&mut self, name: &str, x: NodeId, out: usize, init: Init) -> Result<NodeId> {
        let s = self.shape(x);
        let d = s.c * s.h * s.w;
        self.push_scope(name);
        let wshape = Shape4::new(out, s.c, s.h, s.w);
        let w = match init {
            Init::Kaiming if !self.skeleton => {
                let bound = 1.0 / (d as f64).sqrt();
                let data = (0..wshape.numel())
                    .map(|_| T::of(self.rng.random_range(-bound..bound)))
                    .collect();
                Tensor::from_vec(wshape, data)?
            }
            other => self.init_tensor(wshape, d, other),
        };
        let weight = self.add_param("weight", ParamKind::Weight, w);
        let bias = Some(self.add_param("bias", ParamKind::Bias, Tensor::zeros(Shape4::new(1, out, 1, 1))));
        self.pop_scope();
        self.push_node(name, Op::Linear { weight, bias }, vec![x])
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn finish(self) -> Result<LayerGraph<T>> {
        let g = LayerGraph {
            nodes: self.nodes,
            params: self.params,
            outputs: self.outputs,
            bn_momentum: self.bn_momentum,
            bn_epsilon: self.bn_epsilon,
        };
        g.validate()?;
        Ok(g)
    }
}
