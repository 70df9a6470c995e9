//! Directed acyclic layer graphs.
//!
//! An [`Architecture`] is the pure description: nodes in topological order,
//! each naming its upstream node ids. A [`Graph`] instantiates one with
//! parameters, batch-norm running statistics and a dropout stream, and runs
//! hand-written forward/backward passes over it. Nodes may feed several
//! downstream nodes; their gradients are summed on the way back.

use std::collections::HashSet;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::activation::{relu_backward, relu_forward, softmax_backward, softmax_forward};
use super::conv::{
    conv2d_backward, conv2d_forward, depthwise_backward, depthwise_forward, pointwise_backward,
    pointwise_forward, ConvGeometry, Padding,
};
use super::dense::{dense_backward, dense_forward};
use super::dropout::{apply_mask, check_rate, dropout_mask};
use super::norm::{
    batchnorm_backward, batchnorm_forward_infer, batchnorm_forward_train, BatchNormCache,
};
use super::pool::{
    global_avg_pool_backward, global_avg_pool_forward, maxpool2d_backward, maxpool2d_forward,
};
use crate::error::{Error, Result};
use crate::tensor::{concat, numel, split, Tensor};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
const DROPOUT_STREAM: u64 = 0xD20F_0A7E_5EED_0001;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Op {
    /// Per-sample shape, e.g. `[C, H, W]`.
    Input { shape: Vec<usize> },
    Conv2d {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    DepthwiseSepConv {
        filters: usize,
        kernel: [usize; 2],
        stride: usize,
        padding: Padding,
    },
    MaxPool2d { window: [usize; 2], stride: [usize; 2] },
    GlobalAvgPool,
    BatchNorm { momentum: f64, eps: f64 },
    Dense { units: usize },
    Relu,
    Softmax,
    Dropout { rate: f64 },
    Flatten,
    /// Concatenation along the channel/feature axis.
    Concat,
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Conv2d { .. } => "conv2d",
            Op::DepthwiseSepConv { .. } => "depthwise_sep_conv",
            Op::MaxPool2d { .. } => "maxpool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::BatchNorm { .. } => "batchnorm",
            Op::Dense { .. } => "dense",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::Dropout { .. } => "dropout",
            Op::Flatten => "flatten",
            Op::Concat => "concat",
        }
    }

    pub fn batch_norm() -> Op {
        Op::BatchNorm {
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Names and shapes of the learnable tensors for a given input shape.
    fn param_shapes(&self, input: &[usize]) -> Vec<(&'static str, Vec<usize>)> {
        match *self {
            Op::Conv2d {
                filters, kernel, ..
            } => vec![
                ("weight", vec![filters, input[0], kernel[0], kernel[1]]),
                ("bias", vec![filters]),
            ],
            Op::DepthwiseSepConv {
                filters, kernel, ..
            } => vec![
                ("depthwise", vec![input[0], kernel[0], kernel[1]]),
                ("pointwise", vec![filters, input[0]]),
                ("bias", vec![filters]),
            ],
            Op::BatchNorm { .. } => vec![("gamma", vec![input[0]]), ("beta", vec![input[0]])],
            Op::Dense { units } => vec![("weight", vec![input[0], units]), ("bias", vec![units])],
            _ => Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeDef {
    pub name: String,
    pub op: Op,
    pub inputs: Vec<usize>,
}

fn spatial(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    match *shape {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::graph(format!("{what} needs a (C, H, W) input, got {s:?}"))),
    }
}

/// Per-sample output shape of `op` applied to `ins`.
fn infer_shape(name: &str, op: &Op, ins: &[&[usize]]) -> Result<Vec<usize>> {
    let arity_ok = match op {
        Op::Input { .. } => ins.is_empty(),
        Op::Concat => ins.len() >= 2,
        _ => ins.len() == 1,
    };
    if !arity_ok {
        return Err(Error::graph(format!(
            "node `{name}` ({}) has {} inputs",
            op.kind(),
            ins.len()
        )));
    }
    let ctx = |e: Error| Error::graph(format!("node `{name}`: {e}"));
    match op {
        Op::Input { shape } => Ok(shape.clone()),
        Op::Conv2d {
            filters,
            kernel,
            stride,
            padding,
        }
        | Op::DepthwiseSepConv {
            filters,
            kernel,
            stride,
            padding,
        } => {
            let (_, h, w) = spatial(ins[0], name)?;
            if *filters == 0 {
                return Err(Error::graph(format!("node `{name}` has zero filters")));
            }
            let g = ConvGeometry::new(h, w, kernel[0], kernel[1], *stride, *padding).map_err(ctx)?;
            Ok(vec![*filters, g.out_h, g.out_w])
        }
        Op::MaxPool2d { window, stride } => {
            let (c, h, w) = spatial(ins[0], name)?;
            if window.contains(&0) || stride.contains(&0) {
                return Err(Error::graph(format!("node `{name}`: zero pool window/stride")));
            }
            if window[0] > h || window[1] > w {
                return Err(Error::graph(format!(
                    "node `{name}`: pool window {window:?} exceeds {h}x{w}"
                )));
            }
            Ok(vec![
                c,
                (h - window[0]) / stride[0] + 1,
                (w - window[1]) / stride[1] + 1,
            ])
        }
        Op::GlobalAvgPool => {
            let (c, h, w) = spatial(ins[0], name)?;
            if h * w == 0 {
                return Err(Error::graph(format!("node `{name}`: empty spatial extent")));
            }
            Ok(vec![c])
        }
        Op::BatchNorm { momentum, eps } => {
            if !(*eps > 0.0) || !(0.0..=1.0).contains(momentum) {
                return Err(Error::graph(format!(
                    "node `{name}`: batch norm needs eps > 0 and momentum in [0, 1]"
                )));
            }
            match ins[0].len() {
                1 | 3 => Ok(ins[0].to_vec()),
                _ => Err(Error::graph(format!(
                    "node `{name}`: batch norm input {:?}",
                    ins[0]
                ))),
            }
        }
        Op::Dense { units } => match *ins[0] {
            [_] if *units > 0 => Ok(vec![*units]),
            ref s => Err(Error::graph(format!(
                "node `{name}`: dense needs a flat input and units > 0, got {s:?}"
            ))),
        },
        Op::Relu => Ok(ins[0].to_vec()),
        Op::Dropout { rate } => {
            check_rate(*rate).map_err(ctx)?;
            Ok(ins[0].to_vec())
        }
        Op::Softmax => match *ins[0] {
            [k] if k >= 1 => Ok(vec![k]),
            ref s => Err(Error::graph(format!(
                "node `{name}`: softmax needs a flat input, got {s:?}"
            ))),
        },
        Op::Flatten => Ok(vec![numel(ins[0])]),
        Op::Concat => {
            let first = ins[0];
            for s in &ins[1..] {
                if s.len() != first.len() || s.is_empty() || s[1..] != first[1..] {
                    return Err(Error::graph(format!(
                        "node `{name}`: cannot concatenate {first:?} with {s:?}"
                    )));
                }
            }
            let mut out = first.to_vec();
            out[0] = ins.iter().map(|s| s[0]).sum();
            Ok(out)
        }
    }
}

/// Incrementally assembles an [`Architecture`], validating each node as it
/// is added.
#[derive(Debug, Default)]
pub struct ArchitectureBuilder {
    nodes: Vec<NodeDef>,
    shapes: Vec<Vec<usize>>,
    names: HashSet<String>,
}

impl ArchitectureBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn input(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<usize> {
        self.add(
            name,
            Op::Input {
                shape: shape.to_vec(),
            },
            &[],
        )
    }

    pub fn add(&mut self, name: impl Into<String>, op: Op, inputs: &[usize]) -> Result<usize> {
        let name = name.into();
        if !self.names.insert(name.clone()) {
            return Err(Error::graph(format!("duplicate node name `{name}`")));
        }
        let id = self.nodes.len();
        if let Some(&bad) = inputs.iter().find(|&&i| i >= id) {
            return Err(Error::graph(format!(
                "node `{name}` refers to node {bad}, which is not earlier in topological order (cycle)"
            )));
        }
        let ins: Vec<&[usize]> = inputs.iter().map(|&i| self.shapes[i].as_slice()).collect();
        let shape = infer_shape(&name, &op, &ins)?;
        self.nodes.push(NodeDef {
            name,
            op,
            inputs: inputs.to_vec(),
        });
        self.shapes.push(shape);
        Ok(id)
    }

    pub fn shape(&self, id: usize) -> &[usize] {
        &self.shapes[id]
    }

    pub fn build(self, output: usize) -> Result<Architecture> {
        Architecture::new(self.nodes, output)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawArchitecture {
    nodes: Vec<NodeDef>,
    output: usize,
}

/// A validated, acyclic network description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawArchitecture", into = "RawArchitecture")]
pub struct Architecture {
    nodes: Vec<NodeDef>,
    output: usize,
    shapes: Vec<Vec<usize>>,
}

impl TryFrom<RawArchitecture> for Architecture {
    type Error = Error;

    fn try_from(raw: RawArchitecture) -> Result<Self> {
        Architecture::new(raw.nodes, raw.output)
    }
}

impl From<Architecture> for RawArchitecture {
    fn from(a: Architecture) -> Self {
        RawArchitecture {
            nodes: a.nodes,
            output: a.output,
        }
    }
}

impl Architecture {
    pub fn new(nodes: Vec<NodeDef>, output: usize) -> Result<Self> {
        let mut b = ArchitectureBuilder::new();
        for n in &nodes {
            b.add(n.name.clone(), n.op.clone(), &n.inputs)?;
        }
        if output >= nodes.len() {
            return Err(Error::graph(format!("output node {output} does not exist")));
        }
        let softmaxes: Vec<usize> = nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.op == Op::Softmax)
            .map(|(i, _)| i)
            .collect();
        if !softmaxes.is_empty() && softmaxes != [output] {
            return Err(Error::graph(
                "a classification graph needs exactly one softmax node, and it must be the output",
            ));
        }
        if !nodes.iter().any(|n| matches!(n.op, Op::Input { .. })) {
            return Err(Error::graph("graph has no input node"));
        }
        Ok(Architecture {
            nodes,
            output,
            shapes: b.shapes,
        })
    }

    pub fn nodes(&self) -> &[NodeDef] {
        &self.nodes
    }

    pub fn output(&self) -> usize {
        self.output
    }

    /// Per-sample output shape of every node.
    pub fn shapes(&self) -> &[Vec<usize>] {
        &self.shapes
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    pub fn input_nodes(&self) -> impl Iterator<Item = (usize, &NodeDef)> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Input { .. }))
    }

    /// `(name, shape)` of every learnable tensor in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for node in &self.nodes {
            let input = node
                .inputs
                .first()
                .map(|&j| self.shapes[j].as_slice())
                .unwrap_or(&[]);
            for (suffix, shape) in node.op.param_shapes(input) {
                out.push((format!("{}.{suffix}", node.name), shape));
            }
        }
        out
    }

    pub fn node_param_count(&self, id: usize) -> usize {
        let node = &self.nodes[id];
        let input = node
            .inputs
            .first()
            .map(|&j| self.shapes[j].as_slice())
            .unwrap_or(&[]);
        node.op
            .param_shapes(input)
            .iter()
            .map(|(_, s)| numel(s))
            .sum()
    }

    pub fn param_count(&self) -> usize {
        (0..self.nodes.len()).map(|i| self.node_param_count(i)).sum()
    }

    /// Non-learnable state tensors (batch-norm running statistics).
    pub fn buffer_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Op::BatchNorm { .. } = node.op {
                let c = self.shapes[i][0];
                out.push((format!("{}.running_mean", node.name), vec![c]));
                out.push((format!("{}.running_var", node.name), vec![c]));
                out.push((format!("{}.num_batches", node.name), vec![]));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Debug, Clone)]
struct RunningStats {
    mean: Tensor,
    var: Tensor,
    batches: u64,
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Pool(Vec<usize>),
    Norm(BatchNormCache),
    Mask(Vec<f64>),
    /// Depthwise stage output, needed by the pointwise backward.
    Depthwise(Tensor),
}

#[derive(Debug, Clone)]
struct Cache {
    acts: Vec<Tensor>,
    aux: Vec<Aux>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One gradient per learnable tensor, in [`Graph::param_names`] order.
    pub params: Vec<Tensor>,
    /// Gradient with respect to each node's output, where one reached it.
    pub nodes: Vec<Option<Tensor>>,
}

/// Seed for the dropout stream of a graph: `(seed, word position)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    #[serde(with = "u128_string")]
    pub word_pos: u128,
}

mod u128_string {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u128, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&v.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u128, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// An instantiated network: architecture plus state.
#[derive(Debug, Clone)]
pub struct Graph {
    arch: Architecture,
    params: Vec<Vec<Tensor>>,
    stats: Vec<Option<RunningStats>>,
    mode: Mode,
    seed: u64,
    rng_seed: u64,
    rng: ChaCha8Rng,
    cache: Option<Cache>,
}

/// Glorot fan-in/fan-out of a weight tensor.
fn fans(op: &Op, shape: &[usize]) -> (usize, usize) {
    match (op, shape) {
        (Op::Conv2d { .. }, &[f, c, kh, kw]) => (c * kh * kw, f * kh * kw),
        (Op::DepthwiseSepConv { .. }, &[_, kh, kw]) => (kh * kw, kh * kw),
        (Op::DepthwiseSepConv { .. }, &[f, c]) => (c, f),
        (_, &[d_in, d_out]) => (d_in, d_out),
        _ => (1, 1),
    }
}

impl Graph {
    /// Instantiates `arch`: Glorot-uniform weights, zero biases, unit
    /// batch-norm scale. Everything is determined by `seed`.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        let mut init_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(arch.nodes.len());
        let mut stats = Vec::with_capacity(arch.nodes.len());
        for (i, node) in arch.nodes.iter().enumerate() {
            let input = node
                .inputs
                .first()
                .map(|&j| arch.shapes[j].clone())
                .unwrap_or_default();
            let mut tensors = Vec::new();
            for (suffix, shape) in node.op.param_shapes(&input) {
                let name = format!("{}.{suffix}", node.name);
                let t = match suffix {
                    "bias" | "beta" => Tensor::zeros(shape),
                    "gamma" => Tensor::full(shape, 1.0),
                    _ => {
                        let (fan_in, fan_out) = fans(&node.op, &shape);
                        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
                        let dist = Uniform::new_inclusive(-a, a);
                        let n = numel(&shape);
                        let data = (0..n).map(|_| dist.sample(&mut init_rng)).collect();
                        Tensor::new(shape, data)?
                    }
                };
                tensors.push(t.with_name(name));
            }
            params.push(tensors);
            stats.push(match node.op {
                Op::BatchNorm { .. } => {
                    let c = arch.shapes[i][0];
                    Some(RunningStats {
                        mean: Tensor::zeros(vec![c]),
                        var: Tensor::full(vec![c], 1.0),
                        batches: 0,
                    })
                }
                _ => None,
            });
        }
        Ok(Graph {
            arch,
            params,
            stats,
            mode: Mode::Train,
            seed,
            rng_seed: seed ^ DROPOUT_STREAM,
            rng: ChaCha8Rng::seed_from_u64(seed ^ DROPOUT_STREAM),
            cache: None,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng_seed,
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn set_rng_state(&mut self, state: RngState) {
        self.rng_seed = state.seed;
        self.rng = ChaCha8Rng::seed_from_u64(state.seed);
        self.rng.set_word_pos(state.word_pos);
    }

    pub fn param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .flatten()
            .map(|t| t.name().unwrap_or_default().to_string())
            .collect()
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.params.iter().flatten().collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.params.iter_mut().flatten().collect()
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.params.iter().flatten().find(|t| t.name() == Some(name))
    }

    /// Replaces a learnable tensor's values; the shape must match.
    pub fn set_param(&mut self, name: &str, values: Tensor) -> Result<()> {
        let slot = self
            .params
            .iter_mut()
            .flatten()
            .find(|t| t.name() == Some(name))
            .ok_or_else(|| Error::graph(format!("no parameter named `{name}`")))?;
        if slot.shape() != values.shape() {
            return Err(Error::ShapeMismatch {
                name: name.to_string(),
                expected: slot.shape().to_vec(),
                found: values.shape().to_vec(),
            });
        }
        *slot = values.with_name(name);
        Ok(())
    }

    /// All persisted tensors: parameters followed by running statistics.
    pub fn state(&self) -> Vec<Tensor> {
        let mut out: Vec<Tensor> = self.params.iter().flatten().cloned().collect();
        for (node, st) in self.arch.nodes.iter().zip(&self.stats) {
            if let Some(st) = st {
                out.push(st.mean.clone().with_name(format!("{}.running_mean", node.name)));
                out.push(st.var.clone().with_name(format!("{}.running_var", node.name)));
                out.push(
                    Tensor::scalar(st.batches as f64).with_name(format!("{}.num_batches", node.name)),
                );
            }
        }
        out
    }

    /// Names and shapes [`Graph::state`] produces.
    pub fn state_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = self.arch.param_shapes();
        out.extend(self.arch.buffer_shapes());
        out
    }

    /// Restores tensors in the order [`Graph::state`] produces them. Named
    /// tensors must carry the expected name.
    pub fn load_state(&mut self, tensors: Vec<Tensor>) -> Result<()> {
        let expected = self.state_shapes();
        if tensors.len() != expected.len() {
            return Err(Error::graph(format!(
                "state has {} tensors, graph expects {}",
                tensors.len(),
                expected.len()
            )));
        }
        let n_params = self.arch.param_shapes().len();
        let mut it = tensors.into_iter().zip(expected);
        for (t, (name, shape)) in it.by_ref().take(n_params) {
            if let Some(found) = t.name().filter(|n| *n != name) {
                return Err(Error::graph(format!(
                    "expected parameter `{name}` in state, found `{found}`"
                )));
            }
            if t.shape() != shape.as_slice() {
                return Err(Error::ShapeMismatch {
                    name,
                    expected: shape,
                    found: t.shape().to_vec(),
                });
            }
            self.set_param(&name, t)?;
        }
        let rest: Vec<(Tensor, (String, Vec<usize>))> = it.collect();
        let mut chunks = rest.chunks(3);
        for st in self.stats.iter_mut().flatten() {
            let chunk = chunks
                .next()
                .ok_or_else(|| Error::graph("missing running statistics"))?;
            for (t, (name, shape)) in chunk {
                if t.shape() != shape.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    });
                }
            }
            st.mean = chunk[0].0.clone();
            st.var = chunk[1].0.clone();
            st.batches = chunk[2].0.data()[0] as u64;
        }
        Ok(())
    }

    /// Output of node `id` from the most recent forward pass.
    pub fn activation(&self, id: usize) -> Option<&Tensor> {
        self.cache.as_ref().map(|c| &c.acts[id])
    }

    /// Pre-softmax scores of the most recent forward pass.
    pub fn logits(&self) -> Option<&Tensor> {
        let out = &self.arch.nodes[self.arch.output];
        match out.op {
            Op::Softmax => self.activation(out.inputs[0]),
            _ => self.activation(self.arch.output),
        }
    }

    /// Evaluates every node in storage order and returns the output node's
    /// activation. `inputs` pairs each input node's name with a batch
    /// `(N, ...shape)`.
    pub fn forward(&mut self, inputs: &[(&str, &Tensor)]) -> Result<Tensor> {
        let nodes = &self.arch.nodes;
        for (name, _) in inputs {
            if !self.arch.input_nodes().any(|(_, n)| n.name == *name) {
                return Err(Error::graph(format!("`{name}` is not an input node")));
            }
        }
        let mut acts: Vec<Tensor> = Vec::with_capacity(nodes.len());
        let mut aux: Vec<Aux> = Vec::with_capacity(nodes.len());
        let mut batch: Option<usize> = None;
        let train = self.mode == Mode::Train;

        for (i, node) in nodes.iter().enumerate() {
            let x = node.inputs.first().map(|&j| &acts[j]);
            let (y, a) = match &node.op {
                Op::Input { shape } => {
                    let t = inputs
                        .iter()
                        .find(|(n, _)| *n == node.name)
                        .map(|(_, t)| *t)
                        .ok_or_else(|| Error::graph(format!("missing input `{}`", node.name)))?;
                    if t.ndim() != shape.len() + 1 || &t.shape()[1..] != shape.as_slice() {
                        return Err(Error::shape(format!(
                            "input `{}` expects (N, {shape:?}), got {:?}",
                            node.name,
                            t.shape()
                        )));
                    }
                    let n = t.shape()[0];
                    if batch.is_some_and(|b| b != n) {
                        return Err(Error::shape("input batches have different sizes"));
                    }
                    batch = Some(n);
                    (t.clone(), Aux::None)
                }
                Op::Conv2d {
                    stride, padding, ..
                } => {
                    let p = &self.params[i];
                    (
                        conv2d_forward(x.unwrap(), &p[0], &p[1], *stride, *padding)?,
                        Aux::None,
                    )
                }
                Op::DepthwiseSepConv {
                    stride, padding, ..
                } => {
                    let p = &self.params[i];
                    let z = depthwise_forward(x.unwrap(), &p[0], *stride, *padding)?;
                    let y = pointwise_forward(&z, &p[1], &p[2])?;
                    (y, Aux::Depthwise(z))
                }
                Op::MaxPool2d { window, stride } => {
                    let (y, arg) = maxpool2d_forward(x.unwrap(), *window, *stride)?;
                    (y, Aux::Pool(arg))
                }
                Op::GlobalAvgPool => (global_avg_pool_forward(x.unwrap())?, Aux::None),
                Op::BatchNorm { momentum, eps } => {
                    let p = &self.params[i];
                    let st = self.stats[i].as_mut().expect("batch norm node has stats");
                    if train {
                        let (y, cache, batch_stats) =
                            batchnorm_forward_train(x.unwrap(), &p[0], &p[1], *eps)?;
                        for (r, b) in st.mean.data_mut().iter_mut().zip(&batch_stats.mean) {
                            *r = (1.0 - momentum) * *r + momentum * b;
                        }
                        for (r, b) in st.var.data_mut().iter_mut().zip(&batch_stats.var) {
                            *r = (1.0 - momentum) * *r + momentum * b;
                        }
                        st.batches += 1;
                        (y, Aux::Norm(cache))
                    } else {
                        if st.batches == 0 {
                            return Err(Error::NoRunningStats(node.name.clone()));
                        }
                        let (y, cache) = batchnorm_forward_infer(
                            x.unwrap(),
                            &p[0],
                            &p[1],
                            &st.mean,
                            &st.var,
                            *eps,
                        )?;
                        (y, Aux::Norm(cache))
                    }
                }
                Op::Dense { .. } => {
                    let p = &self.params[i];
                    (dense_forward(x.unwrap(), &p[0], &p[1])?, Aux::None)
                }
                Op::Relu => (relu_forward(x.unwrap()), Aux::None),
                Op::Softmax => (softmax_forward(x.unwrap())?, Aux::None),
                Op::Dropout { rate } => {
                    if train && *rate > 0.0 {
                        let x = x.unwrap();
                        let mask = dropout_mask(x.len(), *rate, &mut self.rng)?;
                        (apply_mask(x, &mask)?, Aux::Mask(mask))
                    } else {
                        (x.unwrap().clone(), Aux::None)
                    }
                }
                Op::Flatten => {
                    let x = x.unwrap();
                    let n = x.shape()[0];
                    let rest = x.len().checked_div(n).unwrap_or(0);
                    (x.reshape(vec![n, rest])?, Aux::None)
                }
                Op::Concat => {
                    let xs: Vec<&Tensor> = node.inputs.iter().map(|&j| &acts[j]).collect();
                    (concat(&xs, 1)?, Aux::None)
                }
            };
            acts.push(y);
            aux.push(a);
        }
        let out = acts[self.arch.output].clone();
        self.cache = Some(Cache { acts, aux });
        Ok(out)
    }

    /// Back-propagates `dL/d(output)` through the cached forward pass.
    pub fn backward(&self, grad_output: &Tensor) -> Result<Gradients> {
        self.backward_from(self.arch.output, grad_output)
    }

    /// Back-propagates a gradient with respect to the pre-softmax logits,
    /// skipping the softmax Jacobian (fused softmax + cross-entropy).
    pub fn backward_logits(&self, grad_logits: &Tensor) -> Result<Gradients> {
        let out = &self.arch.nodes[self.arch.output];
        if out.op != Op::Softmax {
            return Err(Error::graph("backward_logits needs a softmax output node"));
        }
        self.backward_from(out.inputs[0], grad_logits)
    }

    /// Back-propagates `seed` as the gradient of node `start`'s output.
    pub fn backward_from(&self, start: usize, seed: &Tensor) -> Result<Gradients> {
        let cache = self
            .cache
            .as_ref()
            .ok_or_else(|| Error::graph("backward called before forward"))?;
        let nodes = &self.arch.nodes;
        if start >= nodes.len() {
            return Err(Error::graph(format!("node {start} does not exist")));
        }
        if seed.shape() != cache.acts[start].shape() {
            return Err(Error::shape(format!(
                "seed gradient {:?} for node `{}` with output {:?}",
                seed.shape(),
                nodes[start].name,
                cache.acts[start].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[start] = Some(seed.clone());
        let mut param_grads: Vec<Vec<Tensor>> = self
            .params
            .iter()
            .map(|ps| ps.iter().map(Tensor::zeros_like).collect())
            .collect();

        for i in (0..=start).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            let node = &nodes[i];
            let x = node.inputs.first().map(|&j| &cache.acts[j]);
            let mut upstream: Vec<Tensor> = Vec::new();
            match (&node.op, &cache.aux[i]) {
                (Op::Input { .. }, _) => {}
                (
                    Op::Conv2d {
                        stride, padding, ..
                    },
                    _,
                ) => {
                    let p = &self.params[i];
                    let (dx, dw, db) = conv2d_backward(x.unwrap(), &p[0], &g, *stride, *padding)?;
                    param_grads[i][0] = dw;
                    param_grads[i][1] = db;
                    upstream.push(dx);
                }
                (
                    Op::DepthwiseSepConv {
                        stride, padding, ..
                    },
                    Aux::Depthwise(z),
                ) => {
                    let p = &self.params[i];
                    let (dz, dpw, db) = pointwise_backward(z, &p[1], &g)?;
                    let (dx, ddw) = depthwise_backward(x.unwrap(), &p[0], &dz, *stride, *padding)?;
                    param_grads[i][0] = ddw;
                    param_grads[i][1] = dpw;
                    param_grads[i][2] = db;
                    upstream.push(dx);
                }
                (Op::MaxPool2d { .. }, Aux::Pool(arg)) => {
                    upstream.push(maxpool2d_backward(&g, arg, x.unwrap().shape())?);
                }
                (Op::GlobalAvgPool, _) => {
                    upstream.push(global_avg_pool_backward(&g, x.unwrap().shape())?);
                }
                (Op::BatchNorm { .. }, Aux::Norm(bn)) => {
                    let (dx, dgamma, dbeta) = batchnorm_backward(&g, &self.params[i][0], bn)?;
                    param_grads[i][0] = dgamma;
                    param_grads[i][1] = dbeta;
                    upstream.push(dx);
                }
                (Op::Dense { .. }, _) => {
                    let (dx, dw, db) = dense_backward(x.unwrap(), &self.params[i][0], &g)?;
                    param_grads[i][0] = dw;
                    param_grads[i][1] = db;
                    upstream.push(dx);
                }
                (Op::Relu, _) => upstream.push(relu_backward(x.unwrap(), &g)?),
                (Op::Softmax, _) => upstream.push(softmax_backward(&cache.acts[i], &g)?),
                (Op::Dropout { .. }, Aux::Mask(mask)) => upstream.push(apply_mask(&g, mask)?),
                (Op::Dropout { .. }, _) => upstream.push(g.clone()),
                (Op::Flatten, _) => upstream.push(g.reshape(x.unwrap().shape().to_vec())?),
                (Op::Concat, _) => {
                    let extents: Vec<usize> =
                        node.inputs.iter().map(|&j| cache.acts[j].shape()[1]).collect();
                    upstream = split(&g, 1, &extents)?;
                }
                (op, _) => {
                    return Err(Error::graph(format!(
                        "node `{}` ({}) is missing its forward cache",
                        node.name,
                        op.kind()
                    )))
                }
            }
            for (&j, dx) in node.inputs.iter().zip(upstream) {
                match &mut grads[j] {
                    Some(acc) => acc.add_assign(&dx)?,
                    slot => *slot = Some(dx),
                }
            }
            grads[i] = Some(g);
        }

        Ok(Gradients {
            params: param_grads.into_iter().flatten().collect(),
            nodes: grads,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chain() -> Architecture {
        let mut b = ArchitectureBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let d = b.add("fc", Op::Dense { units: 2 }, &[x]).unwrap();
        b.build(d).unwrap()
    }

    #[test]
    fn identity_chain_reproduces_input() {
        let mut g = Graph::new(chain(), 0).unwrap();
        g.set_param(
            "fc.weight",
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
        )
        .unwrap();
        let x = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(g.forward(&[("x", &x)]).unwrap(), x);
    }

    #[test]
    fn rejects_forward_reference_and_bad_arity() {
        let nodes = vec![
            NodeDef {
                name: "x".into(),
                op: Op::Input { shape: vec![2] },
                inputs: vec![],
            },
            NodeDef {
                name: "a".into(),
                op: Op::Relu,
                inputs: vec![2],
            },
            NodeDef {
                name: "b".into(),
                op: Op::Relu,
                inputs: vec![1],
            },
        ];
        assert!(matches!(Architecture::new(nodes, 2), Err(Error::Graph(_))));

        let mut b = ArchitectureBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        assert!(b.add("c", Op::Concat, &[x]).is_err());
        assert!(b.add("r", Op::Relu, &[]).is_err());
    }

    #[test]
    fn softmax_must_be_output() {
        let mut b = ArchitectureBuilder::new();
        let x = b.input("x", &[3]).unwrap();
        let s = b.add("sm", Op::Softmax, &[x]).unwrap();
        let r = b.add("r", Op::Relu, &[s]).unwrap();
        assert!(b.build(r).is_err());
    }

    #[test]
    fn missing_input_and_backward_before_forward() {
        let mut g = Graph::new(chain(), 0).unwrap();
        assert!(g.backward(&Tensor::zeros(vec![1, 2])).is_err());
        assert!(g.forward(&[]).is_err());
    }

    #[test]
    fn infer_without_stats_errors() {
        let mut b = ArchitectureBuilder::new();
        let x = b.input("x", &[2]).unwrap();
        let n = b.add("bn", Op::batch_norm(), &[x]).unwrap();
        let mut g = Graph::new(b.build(n).unwrap(), 0).unwrap();
        g.set_mode(Mode::Infer);
        let x = Tensor::zeros(vec![2, 2]);
        assert!(matches!(
            g.forward(&[("x", &x)]),
            Err(Error::NoRunningStats(_))
        ));
        g.set_mode(Mode::Train);
        g.forward(&[("x", &x)]).unwrap();
        g.set_mode(Mode::Infer);
        g.forward(&[("x", &x)]).unwrap();
    }

    #[test]
    fn architecture_serde_round_trip() {
        let a = chain();
        let json = serde_json::to_string(&a).unwrap();
        let back: Architecture = serde_json::from_str(&json).unwrap();
        assert_eq!(a, back);
    }
}
