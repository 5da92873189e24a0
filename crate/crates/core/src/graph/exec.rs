use super::{LayerGraph, NodeId, Op};
use crate::error::{Error, Result};
use crate::kernels::{self, BnCache, BnMode, BnParams};
use crate::tensor::{Scalar, Shape4, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in BN, running stats updated.
    Train,
    /// Running statistics in BN.
    Eval,
}

/// Activations recorded by a forward pass.
pub struct Tape<T: Scalar> {
    values: Vec<Option<Tensor<T>>>,
    bn: Vec<Option<BnCache<T>>>,
    mode: Mode,
}

impl<T: Scalar> Tape<T> {
    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        self.values[id].as_ref().expect("node evaluated")
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }
}

fn tag_err(node: &str, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::NonFinite {
            op: format!("{op} at node {node}"),
        },
        other => other,
    }
}

impl<T: Scalar> LayerGraph<T> {
    pub fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tape<T>> {
        let expected = self.input_shape();
        let s = input.shape();
        if (s.c, s.h, s.w) != (expected.c, expected.h, expected.w) {
            return Err(Error::shape(
                "forward",
                format!("input {s}, graph expects n x {expected}"),
            ));
        }
        input.check_finite("input")?;
        let n = s.n;
        let mut values: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        let mut bn: Vec<Option<BnCache<T>>> = vec![None; self.nodes.len()];
        let bn_params = BnParams {
            momentum: self.bn_momentum,
            epsilon: self.bn_epsilon,
            mode: match mode {
                Mode::Train => BnMode::Train,
                Mode::Eval => BnMode::Eval,
            },
        };
        for id in 0..self.nodes.len() {
            let node = &self.nodes[id];
            let arg = |k: usize| values[node.inputs[k]].as_ref().expect("topological order");
            let out = match &node.op {
                Op::Input => Ok(input.clone()),
                Op::Conv { spec, weight, bias } => kernels::conv2d(
                    arg(0),
                    spec,
                    &self.params[*weight].value,
                    bias.map(|b| self.params[b].value.data()),
                ),
                Op::BatchNorm {
                    gamma,
                    beta,
                    mean,
                    var,
                } => {
                    let mut rm = self.params[*mean].value.data().to_vec();
                    let mut rv = self.params[*var].value.data().to_vec();
                    let r = kernels::batch_norm(
                        arg(0),
                        self.params[*gamma].value.data(),
                        self.params[*beta].value.data(),
                        &mut rm,
                        &mut rv,
                        bn_params,
                    );
                    match r {
                        Ok((y, cache)) => {
                            let (mean, var) = (*mean, *var);
                            self.params[mean].value.data_mut().copy_from_slice(&rm);
                            self.params[var].value.data_mut().copy_from_slice(&rv);
                            bn[id] = Some(cache);
                            Ok(y)
                        }
                        Err(e) => Err(e),
                    }
                }
                Op::Relu => kernels::relu(arg(0)),
                Op::Add => {
                    let mut acc = arg(0).clone();
                    let mut r = Ok(());
                    for k in 1..node.inputs.len() {
                        r = r.and(acc.add_assign(arg(k)));
                    }
                    r.and_then(|_| acc.check_finite("add")).map(|_| acc)
                }
                Op::Upsample { factor, mode } => kernels::upsample(arg(0), *factor, *mode),
                Op::AvgPool { kernel, stride } => kernels::avg_pool(arg(0), *kernel, *stride),
                Op::GlobalAvgPool => kernels::global_avg_pool(arg(0)),
                Op::Concat => concat(&node.inputs.iter().map(|&i| values[i].as_ref().unwrap()).collect::<Vec<_>>()),
                Op::Slice { start, len } => Ok(slice_channels(arg(0), *start, *len)),
                Op::Linear { weight, bias } => kernels::linear(
                    arg(0),
                    &self.params[*weight].value,
                    bias.map(|b| self.params[b].value.data()),
                ),
            };
            let out = out.map_err(|e| tag_err(&self.nodes[id].name, e))?;
            debug_assert_eq!(out.shape(), self.nodes[id].shape.with_batch(n), "{}", self.nodes[id].name);
            values.push(Some(out));
        }
        Ok(Tape { values, bn, mode })
    }

    /// Reverse pass from the given output seeds. Parameter gradients are
    /// accumulated into each parameter's grad buffer; the gradient with respect
    /// to the graph input is returned.
    pub fn backward(&mut self, tape: &Tape<T>, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Tensor<T>> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (id, g) in seeds {
            if g.shape() != tape.value(id).shape() {
                return Err(Error::shape("backward", format!("seed for {}", self.nodes[id].name)));
            }
            accumulate(&mut grads[id], g)?;
        }
        for id in (1..self.nodes.len()).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            let x = |k: usize| tape.value(node.inputs[k]);
            let input_grads: Vec<Tensor<T>> = match &node.op {
                Op::Input => unreachable!("input is node 0"),
                Op::Conv { spec, weight, bias } => {
                    let r = kernels::conv2d_backward(x(0), spec, &self.params[*weight].value, &g)
                        .map_err(|e| tag_err(&node.name, e))?;
                    let (weight, bias) = (*weight, *bias);
                    add_to_grad(&mut self.params[weight].value, r.weight.data());
                    if let (Some(b), Some(gb)) = (bias, r.bias.as_ref()) {
                        add_to_grad(&mut self.params[b].value, gb);
                    }
                    vec![r.input]
                }
                Op::BatchNorm { gamma, beta, .. } => {
                    let cache = tape.bn[id].as_ref().expect("bn cache");
                    let r = kernels::batch_norm_backward(cache, self.params[*gamma].value.data(), &g)
                        .map_err(|e| tag_err(&node.name, e))?;
                    let (gamma, beta) = (*gamma, *beta);
                    add_to_grad(&mut self.params[gamma].value, &r.gamma);
                    add_to_grad(&mut self.params[beta].value, &r.beta);
                    vec![r.input]
                }
                Op::Relu => vec![kernels::relu_backward(tape.value(id), &g)?],
                Op::Add => vec![g; node.inputs.len()],
                Op::Upsample { factor, mode } => vec![kernels::upsample_backward(&g, *factor, *mode)?],
                Op::AvgPool { kernel, stride } => {
                    vec![kernels::avg_pool_backward(&g, x(0).shape(), *kernel, *stride)?]
                }
                Op::GlobalAvgPool => vec![kernels::global_avg_pool_backward(&g, x(0).shape())?],
                Op::Concat => split_channels(&g, &node.inputs.iter().map(|&i| tape.value(i).shape().c).collect::<Vec<_>>())?,
                Op::Slice { start, .. } => {
                    let s = x(0).shape();
                    let mut gi = Tensor::zeros(s);
                    let gs = g.shape();
                    let pl = s.plane();
                    for n in 0..s.n {
                        let src = &g.data()[n * gs.c * pl..(n + 1) * gs.c * pl];
                        let off = (n * s.c + start) * pl;
                        gi.data_mut()[off..off + gs.c * pl].copy_from_slice(src);
                    }
                    vec![gi]
                }
                Op::Linear { weight, bias } => {
                    let r = kernels::linear_backward(x(0), &self.params[*weight].value, &g)?;
                    let (weight, bias) = (*weight, *bias);
                    add_to_grad(&mut self.params[weight].value, r.weight.data());
                    if let Some(b) = bias {
                        add_to_grad(&mut self.params[b].value, &r.bias);
                    }
                    vec![r.input]
                }
            };
            let inputs = self.nodes[id].inputs.clone();
            for (k, gi) in inputs.into_iter().zip(input_grads) {
                accumulate(&mut grads[k], gi)?;
            }
        }
        Ok(grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.value(0).shape())))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn add_to_grad<T: Scalar>(t: &mut Tensor<T>, g: &[T]) {
    for (a, &b) in t.grad_mut().iter_mut().zip(g) {
        *a = *a + b;
    }
}

pub(crate) fn concat<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts[0].shape();
    let c: usize = parts.iter().map(|p| p.shape().c).sum();
    let os = Shape4::new(first.n, c, first.h, first.w);
    let mut data = Vec::with_capacity(os.numel());
    for n in 0..first.n {
        for p in parts {
            let s = p.shape();
            if (s.n, s.h, s.w) != (first.n, first.h, first.w) {
                return Err(Error::shape("concat", format!("{s} vs {first}")));
            }
            let per = s.c * s.plane();
            data.extend_from_slice(&p.data()[n * per..(n + 1) * per]);
        }
    }
    Tensor::from_vec(os, data)
}

fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, len: usize) -> Tensor<T> {
    let s = x.shape();
    let pl = s.plane();
    let mut data = Vec::with_capacity(s.n * len * pl);
    for n in 0..s.n {
        let off = (n * s.c + start) * pl;
        data.extend_from_slice(&x.data()[off..off + len * pl]);
    }
    Tensor::from_vec(Shape4::new(s.n, len, s.h, s.w), data).expect("sized by shape")
}

fn split_channels<T: Scalar>(g: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let s = g.shape();
    let pl = s.plane();
    let mut out: Vec<Vec<T>> = channels.iter().map(|c| Vec::with_capacity(s.n * c * pl)).collect();
    for n in 0..s.n {
        let mut off = (n * s.c) * pl;
        for (k, &c) in channels.iter().enumerate() {
            out[k].extend_from_slice(&g.data()[off..off + c * pl]);
            off += c * pl;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &c)| Tensor::from_vec(Shape4::new(s.n, c, s.h, s.w), d))
        .collect()
}
