use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::kernels::{self, ConvGeometry};
use super::{AutodiffError, Tensor};

/// Guard added to row norms so that zero rows normalize to zero rows.
pub const L2_NORMALIZE_EPS: f64 = 1e-12;
/// Variance floor inside `channel_affine_norm`.
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named tensors bound to a graph's inputs and parameters.
pub type Bindings<'a> = HashMap<&'a str, &'a Tensor>;

#[derive(Clone, Debug, PartialEq)]
pub enum Op {
    /// A bound tensor; `trainable` inputs receive gradients.
    Input {
        name: String,
        trainable: bool,
    },
    Constant(Tensor),
    Add,
    Sub,
    Mul,
    MatMul {
        transpose_rhs: bool,
    },
    Conv2d {
        stride: usize,
        bias: bool,
    },
    Relu,
    MaxPool2,
    GlobalAvgPool,
    /// Per-channel standardization followed by a learned scale/shift. In
    /// training mode the batch statistics are used; otherwise the two extra
    /// inputs carry the running mean and variance.
    ChannelAffineNorm {
        key: String,
        training: bool,
    },
    Reshape(Vec<usize>),
    Concat {
        axis: usize,
    },
    L2Normalize,
    Softmax,
    LogSoftmax,
    Log,
    Exp,
    Sum,
    Mean,
    ScalarMul(f64),
}

impl Op {
    pub fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant(_) => "constant",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool2 => "max_pool2d",
            Op::GlobalAvgPool => "global_avg_pool",
            Op::ChannelAffineNorm { .. } => "channel_affine_norm",
            Op::Reshape(_) => "reshape",
            Op::Concat { .. } => "concat",
            Op::L2Normalize => "l2_normalize",
            Op::Softmax => "softmax",
            Op::LogSoftmax => "log_softmax",
            Op::Log => "log",
            Op::Exp => "exp",
            Op::Sum => "sum",
            Op::Mean => "mean",
            Op::ScalarMul(_) => "scalar_mul",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub shape: Vec<usize>,
}

/// Incrementally builds a [`Graph`]. Every method validates shapes, so a
/// finished graph is acyclic and shape-consistent by construction.
#[derive(Default)]
pub struct GraphBuilder {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
}

fn mismatch(msg: String) -> AutodiffError {
    AutodiffError::ShapeMismatch(msg)
}

fn is_suffix(long: &[usize], short: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

impl GraphBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node { op, inputs, shape });
        id
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    fn named(&mut self, name: &str, shape: &[usize], trainable: bool) -> Result<NodeId, AutodiffError> {
        if self.names.contains_key(name) {
            return Err(AutodiffError::DuplicateName(name.to_string()));
        }
        let id = self.push(Op::Input { name: name.to_string(), trainable }, Vec::new(), shape.to_vec());
        self.names.insert(name.to_string(), id);
        Ok(id)
    }

    /// A bound tensor that does not receive gradients.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.named(name, shape, false)
    }

    /// A bound tensor that receives gradients.
    pub fn param(&mut self, name: &str, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        self.named(name, shape, true)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(value), Vec::new(), shape)
    }

    fn broadcast_binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if !is_suffix(&sa, &sb) {
            return Err(mismatch(format!("{}: {sb:?} does not broadcast onto {sa:?}", op.kind())));
        }
        Ok(self.push(op, vec![a, b], sa))
    }

    /// `a + b`, where `b`'s shape must be a suffix of `a`'s.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.broadcast_binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.broadcast_binary(Op::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.broadcast_binary(Op::Mul, a, b)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, transpose_rhs: bool) -> Result<NodeId, AutodiffError> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch(format!("matmul needs rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let (k_rhs, n) = if transpose_rhs { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if sa[1] != k_rhs {
            return Err(mismatch(format!("matmul inner extents differ: {sa:?} · {sb:?}")));
        }
        Ok(self.push(Op::MatMul { transpose_rhs }, vec![a, b], vec![sa[0], n]))
    }

    /// Square-kernel convolution with zero padding `kernel / 2`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        stride: usize,
    ) -> Result<NodeId, AutodiffError> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(weight).to_vec());
        if sx.len() != 4 || sw.len() != 4 {
            return Err(mismatch(format!("conv2d needs NCHW input and OCKK weight, got {sx:?}, {sw:?}")));
        }
        if sw[1] != sx[1] || sw[2] != sw[3] || sw[2] % 2 == 0 {
            return Err(mismatch(format!("conv2d weight {sw:?} incompatible with input {sx:?}")));
        }
        if stride != 1 && stride != 2 {
            return Err(mismatch(format!("conv2d stride {stride} unsupported")));
        }
        let mut inputs = vec![x, weight];
        if let Some(b) = bias {
            if self.shape(b) != [sw[0]] {
                return Err(mismatch(format!("conv2d bias {:?} for {} filters", self.shape(b), sw[0])));
            }
            inputs.push(b);
        }
        let geo = ConvGeometry { channels: sx[1], height: sx[2], width: sx[3], kernel: sw[2], stride };
        let shape = vec![sx[0], sw[0], geo.out_height(), geo.out_width()];
        Ok(self.push(Op::Conv2d { stride, bias: bias.is_some() }, inputs, shape))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::Relu, vec![x], shape))
    }

    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(mismatch(format!("max_pool2d needs NCHW with H, W ≥ 2, got {s:?}")));
        }
        Ok(self.push(Op::MaxPool2, vec![x], vec![s[0], s[1], s[2] / 2, s[3] / 2]))
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(mismatch(format!("global_avg_pool needs NCHW, got {s:?}")));
        }
        Ok(self.push(Op::GlobalAvgPool, vec![x], vec![s[0], s[1]]))
    }

    /// Batch-statistics normalization (training mode).
    pub fn channel_affine_norm_train(
        &mut self,
        key: &str,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        self.norm_impl(key, x, vec![scale, shift], true)
    }

    /// Running-statistics normalization (inference mode).
    pub fn channel_affine_norm_eval(
        &mut self,
        key: &str,
        x: NodeId,
        scale: NodeId,
        shift: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
    ) -> Result<NodeId, AutodiffError> {
        self.norm_impl(key, x, vec![scale, shift, running_mean, running_var], false)
    }

    fn norm_impl(&mut self, key: &str, x: NodeId, rest: Vec<NodeId>, training: bool) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(mismatch(format!("channel_affine_norm needs rank ≥ 2, got {s:?}")));
        }
        for &r in &rest {
            if self.shape(r) != [s[1]] {
                return Err(mismatch(format!("channel_affine_norm operand {:?} for {} channels", self.shape(r), s[1])));
            }
        }
        let mut inputs = vec![x];
        inputs.extend(rest);
        Ok(self.push(Op::ChannelAffineNorm { key: key.to_string(), training }, inputs, s))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId, AutodiffError> {
        let count: usize = self.shape(x).iter().product();
        if shape.iter().product::<usize>() != count {
            return Err(mismatch(format!("cannot reshape {:?} into {shape:?}", self.shape(x))));
        }
        Ok(self.push(Op::Reshape(shape.to_vec()), vec![x], shape.to_vec()))
    }

    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId, AutodiffError> {
        let first =
            parts.first().map(|&p| self.shape(p).to_vec()).ok_or_else(|| mismatch("concat of nothing".to_string()))?;
        if axis >= first.len() {
            return Err(mismatch(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(mismatch(format!("concat of {s:?} with {first:?} along {axis}")));
            }
            shape[axis] += s[axis];
        }
        Ok(self.push(Op::Concat { axis }, parts.to_vec(), shape))
    }

    pub fn l2_normalize(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch(format!("l2_normalize needs rank 2, got {s:?}")));
        }
        Ok(self.push(Op::L2Normalize, vec![x], s))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(mismatch("softmax of a scalar".to_string()));
        }
        Ok(self.push(Op::Softmax, vec![x], s))
    }

    /// `log(softmax(x))` over the last axis, computed without forming the
    /// probabilities.
    pub fn log_softmax(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        if s.is_empty() {
            return Err(mismatch("log_softmax of a scalar".to_string()));
        }
        Ok(self.push(Op::LogSoftmax, vec![x], s))
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Log, vec![x], s))
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::Exp, vec![x], s))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        Ok(self.push(Op::Sum, vec![x], Vec::new()))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId, AutodiffError> {
        Ok(self.push(Op::Mean, vec![x], Vec::new()))
    }

    pub fn scalar_mul(&mut self, x: NodeId, factor: f64) -> Result<NodeId, AutodiffError> {
        let s = self.shape(x).to_vec();
        Ok(self.push(Op::ScalarMul(factor), vec![x], s))
    }

    pub fn build(self) -> Graph {
        let mut requires_grad = vec![false; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            requires_grad[i] = match &node.op {
                Op::Input { trainable, .. } => *trainable,
                _ => node.inputs.iter().any(|p| requires_grad[p.0]),
            };
        }
        Graph { nodes: self.nodes, names: self.names, requires_grad }
    }
}

/// An immutable, topologically ordered computation graph.
#[derive(Clone, Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    names: HashMap<String, NodeId>,
    requires_grad: Vec<bool>,
}

/// Statistics observed by a training-mode normalization node.
#[derive(Clone, Debug, PartialEq)]
pub struct NormBatchStats {
    pub key: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Aux {
    None,
    PoolArgmax(Vec<usize>),
    Norm { xhat: Vec<f64>, inv_std: Vec<f64>, mean: Vec<f64>, var: Vec<f64> },
}

/// Forward values of every node in a graph.
pub struct Values<'a> {
    values: Vec<Cow<'a, Tensor>>,
    aux: Vec<Aux>,
    graph: &'a Graph,
}

impl<'a> Values<'a> {
    pub fn get(&self, id: NodeId) -> &Tensor {
        &self.values[id.0]
    }

    /// Batch statistics of every training-mode normalization node, in graph order.
    pub fn norm_batch_stats(&self) -> Vec<NormBatchStats> {
        self.graph
            .nodes
            .iter()
            .zip(&self.aux)
            .filter_map(|(node, aux)| match (&node.op, aux) {
                (Op::ChannelAffineNorm { key, training: true }, Aux::Norm { mean, var, .. }) => {
                    Some(NormBatchStats { key: key.clone(), mean: mean.clone(), var: var.clone() })
                }
                _ => None,
            })
            .collect()
    }
}

/// Loss value, forward values, and gradients for every trainable input.
pub struct Gradients<'a> {
    pub values: Values<'a>,
    pub grads: BTreeMap<String, Tensor>,
}

impl Graph {
    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Names of all trainable inputs.
    pub fn trainable_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Input { name, trainable: true } => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }

    /// Runs the forward pass.
    pub fn evaluate<'a>(&'a self, bindings: &Bindings<'a>) -> Result<Values<'a>, AutodiffError> {
        let mut values: Vec<Cow<'a, Tensor>> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let (value, extra) = match &node.op {
                Op::Input { name, .. } => {
                    let bound =
                        *bindings.get(name.as_str()).ok_or_else(|| AutodiffError::UnboundInput(name.clone()))?;
                    if bound.shape() != node.shape.as_slice() {
                        return Err(mismatch(format!(
                            "input `{name}` declared {:?}, bound {:?}",
                            node.shape,
                            bound.shape()
                        )));
                    }
                    if !bound.is_finite() {
                        return Err(AutodiffError::NonFiniteResult(format!("input `{name}`")));
                    }
                    (Cow::Borrowed(bound), Aux::None)
                }
                Op::Constant(t) => (Cow::Owned(t.clone()), Aux::None),
                op => {
                    let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| values[i.0].as_ref()).collect();
                    let (t, extra) = forward(op, &inputs, &node.shape);
                    if !t.is_finite() {
                        return Err(AutodiffError::NonFiniteResult(op.kind().to_string()));
                    }
                    (Cow::Owned(t), extra)
                }
            };
            values.push(value);
            aux.push(extra);
        }
        Ok(Values { values, aux, graph: self })
    }

    /// Forward pass followed by reverse-mode accumulation from a scalar `loss`.
    pub fn gradients<'a>(&'a self, loss: NodeId, bindings: &Bindings<'a>) -> Result<Gradients<'a>, AutodiffError> {
        if self.nodes[loss.0].shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let values = self.evaluate(bindings)?;
        let mut adjoints: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        adjoints[loss.0] = Some(Tensor::full(&self.nodes[loss.0].shape, 1.0));
        let mut grads = BTreeMap::new();
        for idx in (0..=loss.0).rev() {
            let Some(adjoint) = adjoints[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Input { name, trainable: true } = &node.op {
                if !adjoint.is_finite() {
                    return Err(AutodiffError::NonFiniteGradient(name.clone()));
                }
                grads.insert(name.clone(), adjoint);
                continue;
            }
            let wanted: Vec<bool> = node.inputs.iter().map(|p| self.requires_grad[p.0]).collect();
            if !wanted.iter().any(|&w| w) {
                continue;
            }
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|i| values.get(*i)).collect();
            let input_grads = backward(&node.op, &inputs, values.get(NodeId(idx)), &values.aux[idx], &adjoint, &wanted);
            for ((parent, wanted), grad) in node.inputs.iter().zip(wanted).zip(input_grads) {
                if !wanted {
                    continue;
                }
                let Some(grad) = grad else { continue };
                match adjoints[parent.0].as_mut() {
                    Some(acc) => acc.add_assign(&grad),
                    None => adjoints[parent.0] = Some(grad),
                }
            }
        }
        Ok(Gradients { values, grads })
    }
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("kernel produced a consistent shape")
}

fn forward(op: &Op, inputs: &[&Tensor], shape: &[usize]) -> (Tensor, Aux) {
    let out = |data: Vec<f64>| tensor(shape, data);
    match op {
        Op::Input { .. } | Op::Constant(_) => unreachable!("leaf nodes are bound directly"),
        Op::Add | Op::Sub | Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let period = b.len();
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            let data = a.iter().enumerate().map(|(i, &x)| f(x, b[i % period])).collect();
            (out(data), Aux::None)
        }
        Op::MatMul { transpose_rhs } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = shape[1];
            let mut data = vec![0.0; m * n];
            if *transpose_rhs {
                kernels::gemm_nt_acc(a.data(), b.data(), &mut data, m, k, n);
            } else {
                kernels::gemm_acc(a.data(), b.data(), &mut data, m, k, n);
            }
            (out(data), Aux::None)
        }
        Op::Conv2d { stride, bias } => {
            let (x, w) = (inputs[0], inputs[1]);
            let geo = conv_geometry(x, w, *stride);
            let bias = bias.then(|| inputs[2].data());
            let data = kernels::conv2d_forward(x.data(), x.shape()[0], &geo, w.data(), w.shape()[0], bias);
            (out(data), Aux::None)
        }
        Op::Relu => (out(inputs[0].data().iter().map(|&v| v.max(0.0)).collect()), Aux::None),
        Op::MaxPool2 => {
            let s = inputs[0].shape();
            let (data, arg) = kernels::max_pool2_forward(inputs[0].data(), s[0] * s[1], s[2], s[3]);
            (out(data), Aux::PoolArgmax(arg))
        }
        Op::GlobalAvgPool => {
            let s = inputs[0].shape();
            let plane = s[2] * s[3];
            let data = inputs[0].data().chunks(plane).map(|c| c.iter().sum::<f64>() / plane as f64).collect();
            (out(data), Aux::None)
        }
        Op::ChannelAffineNorm { training, .. } => norm_forward(inputs, *training, shape),
        Op::Reshape(_) => (out(inputs[0].data().to_vec()), Aux::None),
        Op::Concat { axis } => {
            let outer: usize = shape[..*axis].iter().product();
            let mut data = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for part in inputs {
                    let block: usize = part.shape()[*axis..].iter().product();
                    data.extend_from_slice(&part.data()[o * block..(o + 1) * block]);
                }
            }
            (out(data), Aux::None)
        }
        Op::L2Normalize => {
            let width = shape[1];
            let mut data = Vec::with_capacity(inputs[0].len());
            for row in inputs[0].data().chunks(width) {
                let norm = kernels::dot(row, row).sqrt() + L2_NORMALIZE_EPS;
                data.extend(row.iter().map(|v| v / norm));
            }
            (out(data), Aux::None)
        }
        Op::Softmax => {
            let width = *shape.last().unwrap();
            let mut data = Vec::with_capacity(inputs[0].len());
            for row in inputs[0].data().chunks(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let start = data.len();
                data.extend(row.iter().map(|v| (v - max).exp()));
                let total: f64 = data[start..].iter().sum();
                for v in &mut data[start..] {
                    *v /= total;
                }
            }
            (out(data), Aux::None)
        }
        Op::LogSoftmax => {
            let width = *shape.last().unwrap();
            let mut data = Vec::with_capacity(inputs[0].len());
            for row in inputs[0].data().chunks(width) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                data.extend(row.iter().map(|v| v - lse));
            }
            (out(data), Aux::None)
        }
        Op::Log => (out(inputs[0].data().iter().map(|v| v.ln()).collect()), Aux::None),
        Op::Exp => (out(inputs[0].data().iter().map(|v| v.exp()).collect()), Aux::None),
        Op::Sum => (out(vec![inputs[0].data().iter().sum()]), Aux::None),
        Op::Mean => {
            let n = inputs[0].len().max(1) as f64;
            (out(vec![inputs[0].data().iter().sum::<f64>() / n]), Aux::None)
        }
        Op::ScalarMul(c) => (out(inputs[0].data().iter().map(|v| v * c).collect()), Aux::None),
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, stride: usize) -> ConvGeometry {
    let s = x.shape();
    ConvGeometry { channels: s[1], height: s[2], width: s[3], kernel: w.shape()[2], stride }
}

fn norm_layout(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

fn norm_forward(inputs: &[&Tensor], training: bool, shape: &[usize]) -> (Tensor, Aux) {
    let (batch, channels, spatial) = norm_layout(shape);
    let x = inputs[0].data();
    let (scale, shift) = (inputs[1].data(), inputs[2].data());
    let (mean, var) = if training {
        kernels::channel_moments(x, batch, channels, spatial)
    } else {
        (inputs[3].data().to_vec(), inputs[4].data().to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + NORM_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut y = vec![0.0; x.len()];
    for (i, ((xs, hs), ys)) in x.chunks(spatial).zip(xhat.chunks_mut(spatial)).zip(y.chunks_mut(spatial)).enumerate() {
        let c = i % channels;
        let (m, s, a, b) = (mean[c], inv_std[c], scale[c], shift[c]);
        for ((&xv, h), yv) in xs.iter().zip(hs.iter_mut()).zip(ys.iter_mut()) {
            *h = (xv - m) * s;
            *yv = a * *h + b;
        }
    }
    (tensor(shape, y), Aux::Norm { xhat, inv_std, mean, var })
}

/// Sums a broadcast operand's gradient back down to its own shape.
fn reduce_to(grad: Vec<f64>, target: &Tensor) -> Tensor {
    let period = target.len();
    if grad.len() == period {
        return tensor(target.shape(), grad);
    }
    let mut acc = vec![0.0; period];
    for chunk in grad.chunks(period) {
        for (a, g) in acc.iter_mut().zip(chunk) {
            *a += g;
        }
    }
    tensor(target.shape(), acc)
}

fn backward(
    op: &Op,
    inputs: &[&Tensor],
    output: &Tensor,
    aux: &Aux,
    adjoint: &Tensor,
    wanted: &[bool],
) -> Vec<Option<Tensor>> {
    let g = adjoint.data();
    let like = |t: &Tensor, data: Vec<f64>| Some(tensor(t.shape(), data));
    match op {
        Op::Input { .. } | Op::Constant(_) => Vec::new(),
        Op::Add | Op::Sub => {
            let rhs: Vec<f64> = if matches!(op, Op::Sub) { g.iter().map(|v| -v).collect() } else { g.to_vec() };
            vec![like(inputs[0], g.to_vec()), wanted[1].then(|| reduce_to(rhs, inputs[1]))]
        }
        Op::Mul => {
            let (a, b) = (inputs[0].data(), inputs[1].data());
            let period = b.len();
            let ga = wanted[0]
                .then(|| tensor(inputs[0].shape(), g.iter().enumerate().map(|(i, v)| v * b[i % period]).collect()));
            let gb = wanted[1].then(|| reduce_to(g.iter().zip(a).map(|(v, x)| v * x).collect(), inputs[1]));
            vec![ga, gb]
        }
        Op::MatMul { transpose_rhs } => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = output.shape()[1];
            let ga = wanted[0].then(|| {
                let mut ga = vec![0.0; m * k];
                if *transpose_rhs {
                    // b is (n, k): ga = g · b
                    kernels::gemm_acc(g, b.data(), &mut ga, m, n, k);
                } else {
                    // b is (k, n): ga = g · bᵀ
                    kernels::gemm_nt_acc(g, b.data(), &mut ga, m, n, k);
                }
                tensor(a.shape(), ga)
            });
            let gb = wanted[1].then(|| {
                if *transpose_rhs {
                    // gb (n, k) = gᵀ · a
                    let mut gb = vec![0.0; n * k];
                    kernels::gemm_tn_acc(g, a.data(), &mut gb, n, m, k);
                    tensor(b.shape(), gb)
                } else {
                    // gb (k, n) = aᵀ · g
                    let mut gb = vec![0.0; k * n];
                    kernels::gemm_tn_acc(a.data(), g, &mut gb, k, m, n);
                    tensor(b.shape(), gb)
                }
            });
            vec![ga, gb]
        }
        Op::Conv2d { stride, bias } => {
            let (x, w) = (inputs[0], inputs[1]);
            let geo = conv_geometry(x, w, *stride);
            let grads = kernels::conv2d_backward(x.data(), x.shape()[0], &geo, w.data(), w.shape()[0], g, wanted[0]);
            let mut out = vec![grads.input.map(|d| tensor(x.shape(), d)), like(w, grads.weight)];
            if *bias {
                out.push(like(inputs[2], grads.bias));
            }
            out
        }
        Op::Relu => {
            let data = inputs[0].data().iter().zip(g).map(|(&x, &v)| if x > 0.0 { v } else { 0.0 }).collect();
            vec![like(inputs[0], data)]
        }
        Op::MaxPool2 => {
            let Aux::PoolArgmax(arg) = aux else { unreachable!() };
            let mut data = vec![0.0; inputs[0].len()];
            for (&idx, &v) in arg.iter().zip(g) {
                data[idx] += v;
            }
            vec![like(inputs[0], data)]
        }
        Op::GlobalAvgPool => {
            let s = inputs[0].shape();
            let plane = s[2] * s[3];
            let mut data = Vec::with_capacity(inputs[0].len());
            for &v in g {
                data.extend(std::iter::repeat(v / plane as f64).take(plane));
            }
            vec![like(inputs[0], data)]
        }
        Op::ChannelAffineNorm { training, .. } => norm_backward(inputs, aux, g, *training, wanted),
        Op::Reshape(_) => vec![like(inputs[0], g.to_vec())],
        Op::Concat { axis } => {
            let shape = output.shape();
            let outer: usize = shape[..*axis].iter().product();
            let mut parts: Vec<Vec<f64>> = inputs.iter().map(|p| Vec::with_capacity(p.len())).collect();
            let mut pos = 0;
            for _ in 0..outer {
                for (part, dst) in inputs.iter().zip(parts.iter_mut()) {
                    let block: usize = part.shape()[*axis..].iter().product();
                    dst.extend_from_slice(&g[pos..pos + block]);
                    pos += block;
                }
            }
            inputs.iter().zip(parts).map(|(p, d)| like(p, d)).collect()
        }
        Op::L2Normalize => {
            let width = output.shape()[1];
            let mut data = Vec::with_capacity(inputs[0].len());
            for (row, grow) in inputs[0].data().chunks(width).zip(g.chunks(width)) {
                let norm = kernels::dot(row, row).sqrt();
                let denom = norm + L2_NORMALIZE_EPS;
                let proj = if norm > 0.0 { kernels::dot(grow, row) / (denom * denom * norm) } else { 0.0 };
                data.extend(row.iter().zip(grow).map(|(x, gv)| gv / denom - x * proj));
            }
            vec![like(inputs[0], data)]
        }
        Op::Softmax => {
            let width = *output.shape().last().unwrap();
            let mut data = Vec::with_capacity(output.len());
            for (y, gy) in output.data().chunks(width).zip(g.chunks(width)) {
                let inner = kernels::dot(y, gy);
                data.extend(y.iter().zip(gy).map(|(yv, gv)| yv * (gv - inner)));
            }
            vec![like(inputs[0], data)]
        }
        Op::LogSoftmax => {
            let width = *output.shape().last().unwrap();
            let mut data = Vec::with_capacity(output.len());
            for (y, gy) in output.data().chunks(width).zip(g.chunks(width)) {
                let total: f64 = gy.iter().sum();
                data.extend(y.iter().zip(gy).map(|(yv, gv)| gv - yv.exp() * total));
            }
            vec![like(inputs[0], data)]
        }
        Op::Log => vec![like(inputs[0], inputs[0].data().iter().zip(g).map(|(x, v)| v / x).collect())],
        Op::Exp => vec![like(inputs[0], output.data().iter().zip(g).map(|(y, v)| v * y).collect())],
        Op::Sum => vec![Some(Tensor::full(inputs[0].shape(), g[0]))],
        Op::Mean => vec![Some(Tensor::full(inputs[0].shape(), g[0] / inputs[0].len().max(1) as f64))],
        Op::ScalarMul(c) => vec![like(inputs[0], g.iter().map(|v| v * c).collect())],
    }
}

fn norm_backward(inputs: &[&Tensor], aux: &Aux, g: &[f64], training: bool, wanted: &[bool]) -> Vec<Option<Tensor>> {
    let Aux::Norm { xhat, inv_std, .. } = aux else { unreachable!() };
    let (batch, channels, spatial) = norm_layout(inputs[0].shape());
    let scale = inputs[1].data();
    let count = (batch * spatial) as f64;
    let mut g_scale = vec![0.0; channels];
    let mut g_shift = vec![0.0; channels];
    for (i, (gs, hs)) in g.chunks(spatial).zip(xhat.chunks(spatial)).enumerate() {
        let c = i % channels;
        g_scale[c] += kernels::dot(gs, hs);
        g_shift[c] += gs.iter().sum::<f64>();
    }
    let gx = wanted[0].then(|| {
        let mut gx = vec![0.0; g.len()];
        for (i, ((gs, hs), out)) in g.chunks(spatial).zip(xhat.chunks(spatial)).zip(gx.chunks_mut(spatial)).enumerate()
        {
            let c = i % channels;
            let (a, s) = (scale[c], inv_std[c]);
            if training {
                // Batch statistics depend on x: remove the mean and the
                // component along xhat.
                let (k0, k1) = (s / count * a * g_shift[c], s / count * a * g_scale[c]);
                for ((o, &gv), &h) in out.iter_mut().zip(gs).zip(hs) {
                    *o = s * a * gv - k0 - h * k1;
                }
            } else {
                for (o, &gv) in out.iter_mut().zip(gs) {
                    *o = gv * a * s;
                }
            }
        }
        tensor(inputs[0].shape(), gx)
    });
    let mut out = vec![gx, Some(tensor(inputs[1].shape(), g_scale)), Some(tensor(inputs[2].shape(), g_shift))];
    if !training {
        // Running statistics are buffers, never optimized.
        out.extend([None, None]);
    }
    out
}
