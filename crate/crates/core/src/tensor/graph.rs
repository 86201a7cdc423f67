use std::collections::hash_map::DefaultHasher;
use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Mean,
    Sum,
}

#[derive(Debug, Clone)]
enum Op {
    Input { name: String },
    Param { name: String },
    Constant,
    Conv2d { stride: usize, pad: usize },
    Relu,
    MaxPool2,
    Linear,
    Softmax,
    Flatten,
    Add,
    Sub,
    Scale(f64),
    Affine { scale: f64, shift: f64 },
    Sum,
    SumSquares,
    L2Norm,
    CrossEntropy { targets: Vec<usize>, reduction: Reduction },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Param { .. } => "param",
            Op::Constant => "constant",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu => "relu",
            Op::MaxPool2 => "maxpool2",
            Op::Linear => "linear",
            Op::Softmax => "softmax",
            Op::Flatten => "flatten",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Scale(_) => "scale",
            Op::Affine { .. } => "affine",
            Op::Sum => "sum",
            Op::SumSquares => "sum_squares",
            Op::L2Norm => "l2_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Input { .. } | Op::Param { .. } | Op::Constant)
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    Argmax(Vec<usize>),
    Probs(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    shape: Vec<usize>,
    requires_grad: bool,
    value: Option<Tensor>,
    aux: Aux,
}

/// A declared computation: leaves (inputs, parameters, constants) followed by
/// operations in construction order. Construction order is a topological order,
/// and [`Graph::backward`] walks it in exact reverse.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    outputs: Vec<(String, NodeId)>,
    evaluated: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        let requires_grad = match &op {
            Op::Param { .. } => true,
            Op::Input { .. } | Op::Constant => false,
            _ => inputs.iter().any(|i| self.nodes[i.0].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            requires_grad,
            value,
            aux: Aux::None,
        });
        self.evaluated = false;
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} is not part of this graph", id.0)))
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    /// Placeholder fed at [`Graph::forward`] time.
    pub fn input(&mut self, name: &str, shape: &[usize]) -> NodeId {
        self.push(Op::Input { name: name.to_string() }, vec![], shape.to_vec(), None)
    }

    /// Placeholder whose gradient is wanted (adversarial inputs).
    pub fn input_with_grad(&mut self, name: &str, shape: &[usize]) -> NodeId {
        let id = self.input(name, shape);
        self.nodes[id.0].requires_grad = true;
        id
    }

    pub fn param(&mut self, name: &str, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Param { name: name.to_string() }, vec![], shape, Some(value))
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, vec![], shape, Some(value))
    }

    pub fn conv2d(&mut self, x: NodeId, weight: NodeId, bias: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let xs = self.check(x)?.shape.clone();
        let ws = self.check(weight)?.shape.clone();
        let bs = self.check(bias)?.shape.clone();
        let g = ConvGeom::new(&xs, &ws, stride, pad)
            .ok_or_else(|| Error::shape("conv2d input/weight", &ws, &xs))?;
        if bs != [g.c_out] {
            return Err(Error::shape("conv2d bias", &[g.c_out], &bs));
        }
        Ok(self.push(
            Op::Conv2d { stride, pad },
            vec![x, weight, bias],
            vec![g.n, g.c_out, g.oh, g.ow],
            None,
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.shape.clone();
        Ok(self.push(Op::Relu, vec![x], s, None))
    }

    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.shape.clone();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(Error::InvalidArgument(format!("maxpool2 needs NCHW with h,w >= 2, got {s:?}")));
        }
        Ok(self.push(Op::MaxPool2, vec![x], vec![s[0], s[1], s[2] / 2, s[3] / 2], None))
    }

    /// `x (n, d_in) · weightᵀ (d_out, d_in) + bias (d_out)`.
    pub fn linear(&mut self, x: NodeId, weight: NodeId, bias: NodeId) -> Result<NodeId> {
        let xs = self.check(x)?.shape.clone();
        let ws = self.check(weight)?.shape.clone();
        let bs = self.check(bias)?.shape.clone();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(Error::shape("linear input/weight", &ws, &xs));
        }
        if bs != [ws[0]] {
            return Err(Error::shape("linear bias", &[ws[0]], &bs));
        }
        Ok(self.push(Op::Linear, vec![x, weight, bias], vec![xs[0], ws[0]], None))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.shape.clone();
        if s.len() != 2 {
            return Err(Error::InvalidArgument(format!("softmax expects (rows, k), got {s:?}")));
        }
        Ok(self.push(Op::Softmax, vec![x], s, None))
    }

    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.check(x)?.shape.clone();
        if s.is_empty() {
            return Err(Error::InvalidArgument("cannot flatten a scalar".into()));
        }
        let rest: usize = s[1..].iter().product();
        Ok(self.push(Op::Flatten, vec![x], vec![s[0], rest], None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(Op::Sub, a, b)
    }

    fn binary(&mut self, op: Op, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.shape.clone();
        let sb = self.check(b)?.shape.clone();
        if sa != sb {
            return Err(Error::shape(op.name(), &sa, &sb));
        }
        Ok(self.push(op, vec![a, b], sa, None))
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> Result<NodeId> {
        let s = self.check(x)?.shape.clone();
        Ok(self.push(Op::Scale(factor), vec![x], s, None))
    }

    /// `x * scale + shift`, elementwise.
    pub fn affine(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        let s = self.check(x)?.shape.clone();
        Ok(self.push(Op::Affine { scale, shift }, vec![x], s, None))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::Sum, vec![x], vec![], None))
    }

    pub fn sum_squares(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::SumSquares, vec![x], vec![], None))
    }

    /// Euclidean norm; its gradient at the origin is taken to be zero.
    pub fn l2_norm(&mut self, x: NodeId) -> Result<NodeId> {
        self.check(x)?;
        Ok(self.push(Op::L2Norm, vec![x], vec![], None))
    }

    /// Softmax cross-entropy of `(rows, k)` logits against integer targets.
    pub fn cross_entropy(&mut self, logits: NodeId, targets: &[usize], reduction: Reduction) -> Result<NodeId> {
        let s = self.check(logits)?.shape.clone();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::shape("cross_entropy logits", &[targets.len(), 0], &s));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= s[1]) {
            return Err(Error::UnknownClass(t));
        }
        Ok(self.push(
            Op::CrossEntropy {
                targets: targets.to_vec(),
                reduction,
            },
            vec![logits],
            vec![],
            None,
        ))
    }

    pub fn mark_output(&mut self, name: &str, id: NodeId) {
        self.outputs.push((name.to_string(), id));
    }

    pub fn params(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Param { .. }))
            .map(|(i, _)| NodeId(i))
            .collect()
    }

    /// Inputs declared with [`Graph::input_with_grad`].
    pub fn grad_inputs(&self) -> Vec<(NodeId, String)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.op {
                Op::Input { name } if n.requires_grad => Some((NodeId(i), name.clone())),
                _ => None,
            })
            .collect()
    }

    pub fn leaf_name(&self, id: NodeId) -> Option<&str> {
        match &self.nodes.get(id.0)?.op {
            Op::Input { name } | Op::Param { name } => Some(name),
            _ => None,
        }
    }

    pub fn set_param(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self
            .nodes
            .get_mut(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} missing", id.0)))?;
        if !matches!(node.op, Op::Param { .. } | Op::Constant) {
            return Err(Error::InvalidArgument(format!("node {} is not a parameter", id.0)));
        }
        if node.shape != value.shape() {
            return Err(Error::shape("set_param", &node.shape, value.shape()));
        }
        node.value = Some(value);
        self.evaluated = false;
        Ok(())
    }

    pub(crate) fn leaf_data_mut(&mut self, id: NodeId) -> Option<&mut [f64]> {
        let node = self.nodes.get_mut(id.0)?;
        if !node.op.is_leaf() {
            return None;
        }
        self.evaluated = false;
        node.value.as_mut().map(|t| t.data_mut())
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        self.check(id)?
            .value
            .as_ref()
            .ok_or(Error::BackwardBeforeForward)
    }

    /// Gradient accumulated by the last [`Graph::backward`] for a leaf or any
    /// node. Unreachable leaves report an all-zero gradient.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes.get(id.0)?.value.as_ref()?.grad()
    }

    /// Feed inputs by name and evaluate every node.
    pub fn forward(&mut self, feeds: &[(&str, &Tensor)]) -> Result<()> {
        for node in &mut self.nodes {
            if let Op::Input { name } = &node.op {
                let (_, t) = feeds
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::InvalidArgument(format!("no value fed for input `{name}`")))?;
                if t.shape() != node.shape.as_slice() {
                    return Err(Error::shape(format!("input `{name}`"), &node.shape, t.shape()));
                }
                let mut v = (*t).clone();
                v.clear_grad();
                node.value = Some(v);
            } else if let Some(v) = node.value.as_mut() {
                v.clear_grad();
            }
        }
        for i in 0..self.nodes.len() {
            if self.nodes[i].op.is_leaf() {
                let v = self.nodes[i]
                    .value
                    .as_ref()
                    .ok_or_else(|| Error::InvalidArgument(format!("leaf {i} has no value")))?;
                if !v.is_finite() {
                    return Err(Error::NonFinite(format!("{} leaf {i}", self.nodes[i].op.name())));
                }
                continue;
            }
            let (data, aux) = self.eval_node(i)?;
            if data.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("{} node {i}", self.nodes[i].op.name())));
            }
            let shape = self.nodes[i].shape.clone();
            self.nodes[i].value = Some(Tensor::new(shape, data)?);
            self.nodes[i].aux = aux;
        }
        self.evaluated = true;
        Ok(())
    }

    /// [`Graph::forward`] followed by collecting every marked output.
    pub fn forward_named(&mut self, feeds: &[(&str, &Tensor)]) -> Result<BTreeMap<String, Tensor>> {
        self.forward(feeds)?;
        let mut out = BTreeMap::new();
        for (name, id) in &self.outputs {
            out.insert(name.clone(), self.value(*id)?.clone());
        }
        Ok(out)
    }

    fn input_value(&self, i: usize, k: usize) -> &Tensor {
        self.nodes[self.nodes[i].inputs[k].0]
            .value
            .as_ref()
            .expect("inputs precede their consumers")
    }

    fn eval_node(&self, i: usize) -> Result<(Vec<f64>, Aux)> {
        let node = &self.nodes[i];
        let x = |k| self.input_value(i, k);
        let out = match &node.op {
            Op::Input { .. } | Op::Param { .. } | Op::Constant => unreachable!("leaves are not evaluated"),
            Op::Conv2d { stride, pad } => {
                let (xv, w, b) = (x(0), x(1), x(2));
                let g = ConvGeom::new(xv.shape(), w.shape(), *stride, *pad).expect("validated at build");
                (kernels::conv2d_forward(&g, xv.data(), w.data(), b.data()), Aux::None)
            }
            Op::Relu => (x(0).data().iter().map(|v| v.max(0.0)).collect(), Aux::None),
            Op::MaxPool2 => {
                let (out, arg, _) = kernels::maxpool2_forward(x(0).shape(), x(0).data());
                (out, Aux::Argmax(arg))
            }
            Op::Linear => {
                let (xv, w, b) = (x(0), x(1), x(2));
                let (n, d_in, d_out) = (xv.shape()[0], xv.shape()[1], w.shape()[0]);
                (kernels::linear_forward(n, d_in, d_out, xv.data(), w.data(), b.data()), Aux::None)
            }
            Op::Softmax => {
                let k = node.shape[1];
                (kernels::softmax_rows(x(0).data(), k), Aux::None)
            }
            Op::Flatten => (x(0).data().to_vec(), Aux::None),
            Op::Add => (x(0).data().iter().zip(x(1).data()).map(|(a, b)| a + b).collect(), Aux::None),
            Op::Sub => (x(0).data().iter().zip(x(1).data()).map(|(a, b)| a - b).collect(), Aux::None),
            Op::Scale(c) => (x(0).data().iter().map(|v| v * c).collect(), Aux::None),
            Op::Affine { scale, shift } => (x(0).data().iter().map(|v| v * scale + shift).collect(), Aux::None),
            Op::Sum => (vec![x(0).data().iter().sum()], Aux::None),
            Op::SumSquares => (vec![x(0).data().iter().map(|v| v * v).sum()], Aux::None),
            Op::L2Norm => (vec![x(0).l2_norm()], Aux::None),
            Op::CrossEntropy { targets, reduction } => {
                let logits = x(0);
                let k = logits.shape()[1];
                let mut total = 0.0;
                for (row, &t) in logits.data().chunks_exact(k).zip(targets) {
                    total -= kernels::log_softmax_row(row)[t];
                }
                if *reduction == Reduction::Mean {
                    total /= targets.len() as f64;
                }
                let probs = kernels::softmax_rows(logits.data(), k);
                (vec![total], Aux::Probs(probs))
            }
        };
        Ok(out)
    }

    /// Reverse-mode sweep from a scalar loss. Populates the gradient buffer of
    /// every leaf that requires a gradient; leaves with no path to the loss get
    /// exact zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        self.check(loss)?;
        if !self.evaluated {
            return Err(Error::BackwardBeforeForward);
        }
        let loss_len = self.nodes[loss.0].value.as_ref().map(|v| v.len()).unwrap_or(0);
        if loss_len != 1 {
            return Err(Error::NonScalarLoss(self.nodes[loss.0].shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if self.nodes[i].op.is_leaf() || !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            self.backprop_node(i, &gout, &mut grads)?;
            grads[i] = Some(gout);
        }
        for (i, node) in self.nodes.iter_mut().enumerate() {
            if !node.op.is_leaf() || !node.requires_grad {
                continue;
            }
            let len = node.value.as_ref().map(|v| v.len()).unwrap_or(0);
            let g = grads[i].take().unwrap_or_else(|| vec![0.0; len]);
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of leaf {i}")));
            }
            if let Some(v) = node.value.as_mut() {
                v.set_grad(g)?;
            }
        }
        Ok(())
    }

    fn backprop_node(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let inputs = node.inputs.clone();
        let wants = |k: usize| self.nodes[inputs[k].0].requires_grad;
        let val = |k: usize| self.input_value(i, k);
        let take = |k: usize, grads: &mut [Option<Vec<f64>>]| -> Option<Vec<f64>> {
            if !wants(k) {
                return None;
            }
            let len = self.nodes[inputs[k].0].value.as_ref().map(|v| v.len()).unwrap_or(0);
            Some(grads[inputs[k].0].take().unwrap_or_else(|| vec![0.0; len]))
        };
        let put = |k: usize, g: Option<Vec<f64>>, grads: &mut [Option<Vec<f64>>]| {
            if let Some(g) = g {
                grads[inputs[k].0] = Some(g);
            }
        };
        match &node.op {
            Op::Input { .. } | Op::Param { .. } | Op::Constant => {}
            Op::Conv2d { stride, pad } => {
                let geom = ConvGeom::new(val(0).shape(), val(1).shape(), *stride, *pad).expect("validated");
                let mut gx = take(0, grads);
                let mut gw = take(1, grads);
                let mut gb = take(2, grads);
                kernels::conv2d_backward(
                    &geom,
                    val(0).data(),
                    val(1).data(),
                    gout,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                put(0, gx, grads);
                put(1, gw, grads);
                put(2, gb, grads);
            }
            Op::Linear => {
                let xs = val(0).shape();
                let (n, d_in, d_out) = (xs[0], xs[1], val(1).shape()[0]);
                let mut gx = take(0, grads);
                let mut gw = take(1, grads);
                let mut gb = take(2, grads);
                kernels::linear_backward(
                    n,
                    d_in,
                    d_out,
                    val(0).data(),
                    val(1).data(),
                    gout,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                put(0, gx, grads);
                put(1, gw, grads);
                put(2, gb, grads);
            }
            Op::Relu => {
                if let Some(mut g) = take(0, grads) {
                    for ((d, xv), gv) in g.iter_mut().zip(val(0).data()).zip(gout) {
                        if *xv > 0.0 {
                            *d += gv;
                        }
                    }
                    put(0, Some(g), grads);
                }
            }
            Op::MaxPool2 => {
                if let Some(mut g) = take(0, grads) {
                    let Aux::Argmax(arg) = &node.aux else {
                        return Err(Error::BackwardBeforeForward);
                    };
                    for (&src, gv) in arg.iter().zip(gout) {
                        g[src] += gv;
                    }
                    put(0, Some(g), grads);
                }
            }
            Op::Softmax => {
                if let Some(mut g) = take(0, grads) {
                    let k = node.shape[1];
                    let s = node.value.as_ref().expect("evaluated").data();
                    for ((gr, sr), dr) in gout.chunks_exact(k).zip(s.chunks_exact(k)).zip(g.chunks_exact_mut(k)) {
                        let dot: f64 = gr.iter().zip(sr).map(|(a, b)| a * b).sum();
                        for ((d, gv), sv) in dr.iter_mut().zip(gr).zip(sr) {
                            *d += sv * (gv - dot);
                        }
                    }
                    put(0, Some(g), grads);
                }
            }
            Op::Flatten | Op::Add => {
                for k in 0..inputs.len() {
                    if let Some(mut g) = take(k, grads) {
                        add_into(&mut g, gout, 1.0);
                        put(k, Some(g), grads);
                    }
                }
            }
            Op::Sub => {
                if let Some(mut g) = take(0, grads) {
                    add_into(&mut g, gout, 1.0);
                    put(0, Some(g), grads);
                }
                if let Some(mut g) = take(1, grads) {
                    add_into(&mut g, gout, -1.0);
                    put(1, Some(g), grads);
                }
            }
            Op::Scale(c) | Op::Affine { scale: c, .. } => {
                if let Some(mut g) = take(0, grads) {
                    add_into(&mut g, gout, *c);
                    put(0, Some(g), grads);
                }
            }
            Op::Sum => {
                if let Some(mut g) = take(0, grads) {
                    g.iter_mut().for_each(|d| *d += gout[0]);
                    put(0, Some(g), grads);
                }
            }
            Op::SumSquares => {
                if let Some(mut g) = take(0, grads) {
                    for (d, xv) in g.iter_mut().zip(val(0).data()) {
                        *d += 2.0 * xv * gout[0];
                    }
                    put(0, Some(g), grads);
                }
            }
            Op::L2Norm => {
                if let Some(mut g) = take(0, grads) {
                    let norm = node.value.as_ref().expect("evaluated").item();
                    if norm > 0.0 {
                        for (d, xv) in g.iter_mut().zip(val(0).data()) {
                            *d += xv / norm * gout[0];
                        }
                    }
                    put(0, Some(g), grads);
                }
            }
            Op::CrossEntropy { targets, reduction } => {
                if let Some(mut g) = take(0, grads) {
                    let Aux::Probs(probs) = &node.aux else {
                        return Err(Error::BackwardBeforeForward);
                    };
                    let k = val(0).shape()[1];
                    let scale = match reduction {
                        Reduction::Mean => gout[0] / targets.len() as f64,
                        Reduction::Sum => gout[0],
                    };
                    for (r, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            g[r * k + j] += scale * (probs[r * k + j] - onehot);
                        }
                    }
                    put(0, Some(g), grads);
                }
            }
        }
        Ok(())
    }

    /// Fingerprint of every piecewise-linear branch taken in the last forward
    /// pass (ReLU masks and max-pool winners). Two evaluations with the same
    /// signature lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            match (&node.op, &node.aux) {
                (Op::Relu, _) => {
                    i.hash(&mut h);
                    for v in self.input_value(i, 0).data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                (Op::MaxPool2, Aux::Argmax(arg)) => {
                    i.hash(&mut h);
                    arg.hash(&mut h);
                }
                (Op::L2Norm, _) => {
                    (node.value.as_ref().map(|v| v.item() > 0.0)).hash(&mut h);
                }
                _ => {}
            }
        }
        h.finish()
    }

    /// True when some ReLU in the last forward pass saw an input of exactly 0.
    pub fn has_relu_at_zero(&self) -> bool {
        self.nodes.iter().enumerate().any(|(i, n)| {
            matches!(n.op, Op::Relu) && self.input_value(i, 0).data().iter().any(|v| *v == 0.0)
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64], factor: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += factor * s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward() {
        let mut g = Graph::new();
        let x = g.input("x", &[3]);
        let r = g.relu(x).unwrap();
        g.forward(&[("x", &t(&[3], &[-1.0, 0.0, 2.0]))]).unwrap();
        assert_eq!(g.value(r).unwrap().data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 4]);
        let s = g.softmax(x).unwrap();
        g.mark_output("probs", s);
        let out = g.forward_named(&[("x", &Tensor::zeros(&[1, 4]))]).unwrap();
        assert_eq!(out["probs"].data(), &[0.25; 4]);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.0, 9.0]));
        let s = g.sum(p).unwrap();
        g.forward(&[]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn unreachable_params_get_zero_gradient() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0]));
        let q = g.param("q", t(&[2], &[3.0, 4.0]));
        let c = g.constant(t(&[2], &[5.0, 6.0]));
        let loss = g.sum_squares(c).unwrap();
        let _other = g.sum(q).unwrap();
        g.forward(&[]).unwrap();
        g.backward(loss).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0]);
        assert_eq!(g.grad(q).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn backward_requires_forward_and_scalar() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0]));
        let s = g.sum(p).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardBeforeForward)));
        g.forward(&[]).unwrap();
        assert!(matches!(g.backward(p), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_errors_at_build_and_feed() {
        let mut g = Graph::new();
        let x = g.input("x", &[1, 3, 4, 4]);
        let w = g.param("w", Tensor::zeros(&[2, 2, 3, 3]));
        let b = g.param("b", Tensor::zeros(&[2]));
        assert!(matches!(g.conv2d(x, w, b, 1, 0), Err(Error::ShapeMismatch { .. })));
        let y = g.input("y", &[2, 2]);
        let r = g.relu(y).unwrap();
        let _ = r;
        assert!(matches!(
            g.forward(&[("x", &Tensor::zeros(&[1, 3, 4, 4])), ("y", &Tensor::zeros(&[2, 3]))]),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut g = Graph::new();
        let x = g.input("x", &[2]);
        let s = g.scale(x, 1e308).unwrap();
        let _ = g.scale(s, 10.0).unwrap();
        let err = g.forward(&[("x", &t(&[2], &[1.0, 1.0]))]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn relu_gradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[3], &[-1.0, 0.0, 1.0]));
        let r = g.relu(p).unwrap();
        let s = g.sum(r).unwrap();
        g.forward(&[]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn maxpool_routes_to_first_max() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[1, 1, 2, 2], &[1.0, 3.0, 3.0, 0.0]));
        let m = g.maxpool2(p).unwrap();
        let s = g.sum(m).unwrap();
        g.forward(&[]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let p = g.param("p", t(&[2], &[1.0, 2.0]));
        let a = g.scale(p, 2.0).unwrap();
        let b = g.add(a, p).unwrap();
        let s = g.sum(b).unwrap();
        g.forward(&[]).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[3.0, 3.0]);
    }

    #[test]
    fn input_gradient_when_requested() {
        let mut g = Graph::new();
        let x = g.input_with_grad("x", &[1, 2]);
        let w = g.constant(t(&[3, 2], &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]));
        let b = g.constant(Tensor::zeros(&[3]));
        let l = g.linear(x, w, b).unwrap();
        let ce = g.cross_entropy(l, &[2], Reduction::Sum).unwrap();
        g.forward(&[("x", &t(&[1, 2], &[0.3, -0.1]))]).unwrap();
        g.backward(ce).unwrap();
        let gx = g.grad(x).unwrap();
        assert_eq!(gx.len(), 2);
        assert!(gx.iter().all(|v| v.is_finite() && *v != 0.0));
    }
}
