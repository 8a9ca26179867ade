use statrs::function::gamma::{digamma, ln_gamma};

use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use crate::error::{Error, Result};

pub type NodeId = usize;

/// Primitive operation recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Op {
    /// Externally bound value. Trainable inputs are the leaves gradients are reported for.
    Input { trainable: bool },
    Constant,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Neg(NodeId),
    Square(NodeId),
    Abs(NodeId),
    Log(NodeId),
    Exp(NodeId),
    /// Exponential linear unit with alpha = 1.
    Elu(NodeId),
    Softplus(NodeId),
    Relu(NodeId),
    /// Log-gamma, needed by the Student likelihood.
    LGamma(NodeId),
    /// `max(x, floor)`; gradient passes only where `x > floor`.
    ClampMin(NodeId, f64),
    ReduceSum(NodeId),
    ReduceMean(NodeId),
    /// Broadcast to the node's own shape.
    Broadcast(NodeId),
    StopGradient(NodeId),
    /// `value * mask`; the mask receives no gradient.
    DropoutMask(NodeId, NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Constant => "constant",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(_) => "neg",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Elu(_) => "elu",
            Op::Softplus(_) => "softplus",
            Op::Relu(_) => "relu",
            Op::LGamma(_) => "lgamma",
            Op::ClampMin(..) => "clamp-min",
            Op::ReduceSum(_) => "reduce-sum",
            Op::ReduceMean(_) => "reduce-mean",
            Op::Broadcast(_) => "broadcast",
            Op::StopGradient(_) => "stop-gradient",
            Op::DropoutMask(..) => "dropout-mask-apply",
        }
    }

    /// All operands, in order.
    pub fn operands(&self) -> Vec<NodeId> {
        match *self {
            Op::Input { .. } | Op::Constant => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::DropoutMask(a, b) => vec![a, b],
            Op::Neg(a)
            | Op::Square(a)
            | Op::Abs(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Elu(a)
            | Op::Softplus(a)
            | Op::Relu(a)
            | Op::LGamma(a)
            | Op::ClampMin(a, _)
            | Op::ReduceSum(a)
            | Op::ReduceMean(a)
            | Op::Broadcast(a)
            | Op::StopGradient(a) => vec![a],
        }
    }

    /// Operands that gradient flows back into. Stop-gradient has none.
    pub fn live_operands(&self) -> Vec<NodeId> {
        match *self {
            Op::StopGradient(_) => vec![],
            Op::DropoutMask(a, _) => vec![a],
            _ => self.operands(),
        }
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Option<Tensor>,
}

/// Gradients of a scalar loss, indexed by node id.
///
/// Nodes without a live path to the loss, or not depending on a trainable input, have no entry.
#[derive(Debug, Clone)]
pub struct GradientMap {
    grads: Vec<Option<Tensor>>,
}

impl GradientMap {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.get(id).is_some()
    }

    /// Gradient, or zeros of `shape` if the node was shielded.
    pub fn get_or_zeros(&self, id: NodeId, shape: &[usize]) -> Tensor {
        self.get(id).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }

    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Reverse-mode differentiable computation graph over dense tensors.
///
/// Nodes are appended in topological order, so a node's operands always have
/// smaller ids. Shapes are checked when a node is added.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fresh: bool,
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

    pub fn op(&self, id: NodeId) -> Result<Op> {
        self.nodes.get(id).map(|n| n.op).ok_or(Error::UnknownNode(id))
    }

    pub fn shape(&self, id: NodeId) -> Result<&[usize]> {
        self.nodes
            .get(id)
            .map(|n| n.shape.as_slice())
            .ok_or(Error::UnknownNode(id))
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor> {
        let node = self.nodes.get(id).ok_or(Error::UnknownNode(id))?;
        if !self.fresh && !matches!(node.op, Op::Input { .. } | Op::Constant) {
            return Err(Error::StaleForward);
        }
        node.value.as_ref().ok_or(Error::StaleForward)
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Option<Tensor>) -> NodeId {
        self.fresh = false;
        self.nodes.push(Node { op, shape, value });
        self.nodes.len() - 1
    }

    fn check(&self, id: NodeId) -> Result<&[usize]> {
        self.shape(id)
    }

    /// Non-trainable input placeholder (covariates, targets, masks).
    pub fn input(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input { trainable: false }, shape.to_vec(), None)
    }

    /// Trainable input placeholder; gradients are reported for these.
    pub fn parameter(&mut self, shape: &[usize]) -> NodeId {
        self.push(Op::Input { trainable: true }, shape.to_vec(), None)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant, shape, Some(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a value to an input node. Invalidates cached forward values.
    pub fn bind(&mut self, id: NodeId, value: Tensor) -> Result<()> {
        let node = self.nodes.get_mut(id).ok_or(Error::UnknownNode(id))?;
        if !matches!(node.op, Op::Input { .. }) {
            return Err(Error::NotAnInput(id));
        }
        if node.shape != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "bind",
                lhs: node.shape.clone(),
                rhs: value.shape().to_vec(),
            });
        }
        node.value = Some(value);
        self.fresh = false;
        Ok(())
    }

    fn binary_same(&mut self, a: NodeId, b: NodeId, op: Op) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?;
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op: op.name(),
                lhs: sa,
                rhs: sb.to_vec(),
            });
        }
        Ok(self.push(op, sa, None))
    }

    fn unary(&mut self, a: NodeId, op: Op) -> Result<NodeId> {
        let s = self.check(a)?.to_vec();
        Ok(self.push(op, s, None))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let sa = self.check(a)?.to_vec();
        let sb = self.check(b)?.to_vec();
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::MatMul(a, b), vec![sa[0], sb[1]], None))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same(a, b, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Neg(a))
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Abs(a))
    }

    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Log(a))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Exp(a))
    }

    pub fn elu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Elu(a))
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Softplus(a))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::Relu(a))
    }

    pub fn lgamma(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::LGamma(a))
    }

    pub fn clamp_min(&mut self, a: NodeId, floor: f64) -> Result<NodeId> {
        self.unary(a, Op::ClampMin(a, floor))
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(a, Op::StopGradient(a))
    }

    pub fn reduce_sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::ReduceSum(a), vec![], None))
    }

    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::ReduceMean(a), vec![], None))
    }

    /// Broadcasts `a` to `shape` using trailing-dimension alignment.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let src = self.check(a)?.to_vec();
        if !broadcastable(&src, shape) {
            return Err(Error::ShapeMismatch {
                op: "broadcast",
                lhs: src,
                rhs: shape.to_vec(),
            });
        }
        Ok(self.push(Op::Broadcast(a), shape.to_vec(), None))
    }

    pub fn dropout_mask(&mut self, a: NodeId, mask: NodeId) -> Result<NodeId> {
        self.binary_same(a, mask, Op::DropoutMask(a, mask))
    }

    /// Constant scalar broadcast to the shape of `like`.
    pub fn filled_like(&mut self, value: f64, like: NodeId) -> Result<NodeId> {
        let shape = self.check(like)?.to_vec();
        let c = self.scalar(value);
        if shape.is_empty() {
            return Ok(c);
        }
        self.broadcast(c, &shape)
    }

    pub fn add_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        let c = self.filled_like(value, a)?;
        self.add(a, c)
    }

    pub fn mul_scalar(&mut self, a: NodeId, value: f64) -> Result<NodeId> {
        let c = self.filled_like(value, a)?;
        self.mul(a, c)
    }

    /// Computes every node's value in id order.
    pub fn forward(&mut self) -> Result<()> {
        for id in 0..self.nodes.len() {
            let op = self.nodes[id].op;
            let value = match op {
                Op::Input { .. } => {
                    if self.nodes[id].value.is_none() {
                        return Err(Error::UnboundInput(id));
                    }
                    continue;
                }
                Op::Constant => continue,
                _ => self.eval(id, op),
            };
            if !value.all_finite() {
                return Err(Error::NonFinite {
                    node: id,
                    op: op.name(),
                });
            }
            self.nodes[id].value = Some(value);
        }
        self.fresh = true;
        Ok(())
    }

    fn val(&self, id: NodeId) -> &Tensor {
        self.nodes[id]
            .value
            .as_ref()
            .expect("operand evaluated before its consumer")
    }

    fn eval(&self, id: NodeId, op: Op) -> Tensor {
        let shape = self.nodes[id].shape.clone();
        let zip = |a: NodeId, b: NodeId, f: fn(f64, f64) -> f64| {
            let (x, y) = (self.val(a).data(), self.val(b).data());
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect::<Vec<_>>()
        };
        let map = |a: NodeId, f: fn(f64) -> f64| self.val(a).data().iter().map(|&v| f(v)).collect();
        let data: Vec<f64> = match op {
            Op::Input { .. } | Op::Constant => unreachable!(),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.val(a).shape(), self.val(b).shape());
                matmul(self.val(a).data(), self.val(b).data(), sa[0], sa[1], sb[1])
            }
            Op::Add(a, b) => zip(a, b, |p, q| p + q),
            Op::Sub(a, b) => zip(a, b, |p, q| p - q),
            Op::Mul(a, b) | Op::DropoutMask(a, b) => zip(a, b, |p, q| p * q),
            Op::Div(a, b) => zip(a, b, |p, q| p / q),
            Op::Neg(a) => map(a, |v| -v),
            Op::Square(a) => map(a, |v| v * v),
            Op::Abs(a) => map(a, f64::abs),
            Op::Log(a) => map(a, f64::ln),
            Op::Exp(a) => map(a, f64::exp),
            Op::Elu(a) => map(a, |v| if v > 0.0 { v } else { v.exp_m1() }),
            Op::Softplus(a) => map(a, softplus),
            Op::Relu(a) => map(a, |v| if v > 0.0 { v } else { 0.0 }),
            Op::LGamma(a) => map(a, |v| if v > 0.0 { ln_gamma(v) } else { f64::NAN }),
            Op::ClampMin(a, floor) => self.val(a).data().iter().map(|&v| v.max(floor)).collect(),
            Op::ReduceSum(a) => vec![sum(self.val(a).data())],
            Op::ReduceMean(a) => {
                let d = self.val(a).data();
                vec![sum(d) / d.len() as f64]
            }
            Op::Broadcast(a) => broadcast_forward(self.val(a), &shape),
            Op::StopGradient(a) => self.val(a).data().to_vec(),
        };
        Tensor::new(shape, data).expect("shape validated at construction")
    }

    /// Operand ids from which `target` is reachable along gradient-carrying edges, `target` included.
    pub fn live_ancestors(&self, target: NodeId) -> Result<Vec<bool>> {
        if target >= self.nodes.len() {
            return Err(Error::UnknownNode(target));
        }
        let mut mark = vec![false; self.nodes.len()];
        mark[target] = true;
        for id in (0..=target).rev() {
            if mark[id] {
                for op in self.nodes[id].op.live_operands() {
                    mark[op] = true;
                }
            }
        }
        Ok(mark)
    }

    /// True when gradient can flow from `descendant` back to `ancestor`.
    pub fn has_live_path(&self, ancestor: NodeId, descendant: NodeId) -> Result<bool> {
        Ok(self.live_ancestors(descendant)?[ancestor])
    }

    /// Reverse-mode gradients of the scalar `loss` with respect to every node
    /// that both depends on a trainable input and reaches the loss along
    /// gradient-carrying edges. Contributions are accumulated in descending
    /// node-id order.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap> {
        let loss_shape = self.shape(loss)?;
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss {
                node: loss,
                shape: loss_shape.to_vec(),
            });
        }
        if !self.fresh {
            return Err(Error::StaleForward);
        }
        let n = self.nodes.len();
        let reaches_loss = self.live_ancestors(loss)?;
        let mut trainable = vec![false; n];
        for id in 0..n {
            trainable[id] = match self.nodes[id].op {
                Op::Input { trainable } => trainable,
                op => op.live_operands().iter().any(|&o| trainable[o]),
            };
        }
        let needs: Vec<bool> = (0..n).map(|i| reaches_loss[i] && trainable[i]).collect();

        let mut grads: Vec<Option<Tensor>> = vec![None; n];
        if needs[loss] {
            grads[loss] = Some(Tensor::full(loss_shape, 1.0));
        }
        for id in (0..=loss).rev() {
            let Some(g) = grads[id].take() else { continue };
            let op = self.nodes[id].op;
            for (operand, contribution) in self.local_grads(id, op, &g, &needs) {
                accumulate(&mut grads[operand], contribution);
            }
            grads[id] = Some(g);
        }
        Ok(GradientMap { grads })
    }

    fn local_grads(&self, id: NodeId, op: Op, g: &Tensor, needs: &[bool]) -> Vec<(NodeId, Tensor)> {
        let mut out = Vec::with_capacity(2);
        let gd = g.data();
        let with = |a: NodeId, data: Vec<f64>| {
            Tensor::new(self.nodes[a].shape.clone(), data).expect("gradient shape matches operand")
        };
        let elementwise = |a: NodeId, f: &dyn Fn(f64, f64) -> f64| -> Tensor {
            let x = self.val(a).data();
            with(a, gd.iter().zip(x).map(|(&gv, &xv)| f(gv, xv)).collect())
        };
        match op {
            Op::Input { .. } | Op::Constant | Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.val(a), self.val(b));
                let (m, k, nn) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
                if needs[a] {
                    out.push((a, with(a, matmul_nt(gd, vb.data(), m, k, nn))));
                }
                if needs[b] {
                    out.push((b, with(b, matmul_tn(va.data(), gd, m, k, nn))));
                }
            }
            Op::Add(a, b) => {
                if needs[a] {
                    out.push((a, g.clone()));
                }
                if needs[b] {
                    out.push((b, g.clone()));
                }
            }
            Op::Sub(a, b) => {
                if needs[a] {
                    out.push((a, g.clone()));
                }
                if needs[b] {
                    out.push((b, g.map(|v| -v)));
                }
            }
            Op::Mul(a, b) => {
                if needs[a] {
                    out.push((a, elementwise(b, &|gv, bv| gv * bv)));
                }
                if needs[b] {
                    out.push((b, elementwise(a, &|gv, av| gv * av)));
                }
            }
            Op::Div(a, b) => {
                let vb = self.val(b).data();
                if needs[a] {
                    out.push((a, with(a, gd.iter().zip(vb).map(|(&gv, &bv)| gv / bv).collect())));
                }
                if needs[b] {
                    let out_v = self.val(id).data();
                    let data = gd
                        .iter()
                        .zip(vb)
                        .zip(out_v)
                        .map(|((&gv, &bv), &q)| -gv * q / bv)
                        .collect();
                    out.push((b, with(b, data)));
                }
            }
            Op::DropoutMask(a, mask) => {
                if needs[a] {
                    out.push((a, elementwise(mask, &|gv, m| gv * m)));
                }
            }
            Op::Neg(a) => out.push((a, g.map(|v| -v))),
            Op::Square(a) => out.push((a, elementwise(a, &|gv, x| gv * (2.0 * x)))),
            Op::Abs(a) => out.push((a, elementwise(a, &|gv, x| gv * sign0(x)))),
            Op::Log(a) => out.push((a, elementwise(a, &|gv, x| gv / x))),
            Op::Exp(a) => {
                let y = self.val(id).data();
                out.push((a, with(a, gd.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect())));
            }
            Op::Elu(a) => out.push((a, elementwise(a, &|gv, x| if x > 0.0 { gv } else { gv * x.exp() }))),
            Op::Softplus(a) => out.push((a, elementwise(a, &|gv, x| gv * sigmoid(x)))),
            Op::Relu(a) => out.push((a, elementwise(a, &|gv, x| if x > 0.0 { gv } else { 0.0 }))),
            Op::LGamma(a) => out.push((a, elementwise(a, &|gv, x| gv * digamma(x)))),
            Op::ClampMin(a, floor) => {
                out.push((a, elementwise(a, &|gv, x| if x > floor { gv } else { 0.0 })))
            }
            Op::ReduceSum(a) => {
                out.push((a, Tensor::full(&self.nodes[a].shape, g.item())));
            }
            Op::ReduceMean(a) => {
                let len = self.nodes[a].shape.iter().product::<usize>() as f64;
                out.push((a, Tensor::full(&self.nodes[a].shape, g.item() / len)));
            }
            Op::Broadcast(a) => {
                let src = &self.nodes[a].shape;
                out.push((a, with(a, broadcast_backward(g, src))));
            }
        }
        out
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        None => *slot = Some(contribution),
        Some(acc) => {
            for (a, c) in acc.data_mut().iter_mut().zip(contribution.data()) {
                *a += c;
            }
        }
    }
}

fn sum(values: &[f64]) -> f64 {
    values.iter().fold(0.0, |acc, &v| acc + v)
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign0(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn broadcastable(src: &[usize], dst: &[usize]) -> bool {
    if src.len() > dst.len() {
        return src.iter().product::<usize>() == 1 && dst.iter().product::<usize>() == 1;
    }
    let offset = dst.len() - src.len();
    src.iter()
        .enumerate()
        .all(|(i, &s)| s == 1 || s == dst[offset + i])
}

/// For each destination element, the flat index of its source element.
fn source_indices(src: &[usize], dst: &[usize]) -> Vec<usize> {
    let total: usize = dst.iter().product();
    let src_len: usize = src.iter().product();
    if src_len == 1 {
        return vec![0; total];
    }
    let offset = dst.len() - src.len();
    let mut strides = vec![0usize; dst.len()];
    let mut stride = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[offset + i] = stride;
        }
        stride *= src[i];
    }
    let mut idx = vec![0usize; dst.len()];
    let mut out = Vec::with_capacity(total);
    for _ in 0..total {
        out.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..dst.len()).rev() {
            idx[d] += 1;
            if idx[d] < dst[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn broadcast_forward(src: &Tensor, dst: &[usize]) -> Vec<f64> {
    let sd = src.data();
    if sd.len() == 1 {
        return vec![sd[0]; dst.iter().product()];
    }
    source_indices(src.shape(), dst).into_iter().map(|i| sd[i]).collect()
}

fn broadcast_backward(g: &Tensor, src: &[usize]) -> Vec<f64> {
    let len: usize = src.iter().product();
    if len == 1 {
        return vec![sum(g.data())];
    }
    let mut out = vec![0.0; len];
    for (gv, i) in g.data().iter().zip(source_indices(src, g.shape())) {
        out[i] += gv;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_graph(value: f64, f: impl Fn(&mut Graph, NodeId) -> NodeId) -> f64 {
        let mut g = Graph::new();
        let x = g.input(&[]);
        let y = f(&mut g, x);
        g.bind(x, Tensor::scalar(value)).unwrap();
        g.forward().unwrap();
        g.value(y).unwrap().item()
    }

    #[test]
    fn softplus_of_zero_is_ln2() {
        let v = scalar_graph(0.0, |g, x| g.softplus(x).unwrap());
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((v - 0.693147).abs() < 1e-6);
    }

    #[test]
    fn elu_values() {
        assert_eq!(scalar_graph(0.0, |g, x| g.elu(x).unwrap()), 0.0);
        let far = scalar_graph(-800.0, |g, x| g.elu(x).unwrap());
        assert_eq!(far, -1.0);
        assert_eq!(scalar_graph(2.5, |g, x| g.elu(x).unwrap()), 2.5);
    }

    #[test]
    fn matmul_of_ones() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[2, 3], 1.0));
        let b = g.constant(Tensor::full(&[3, 2], 1.0));
        let c = g.matmul(a, b).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(c).unwrap(), &Tensor::full(&[2, 2], 3.0));
    }

    #[test]
    fn matmul_shape_mismatch_is_rejected() {
        let mut g = Graph::new();
        let a = g.input(&[2, 3]);
        let b = g.input(&[2, 3]);
        assert!(matches!(g.matmul(a, b), Err(Error::ShapeMismatch { .. })));
        assert!(matches!(g.add(a, g.len() - 1), Ok(_)));
        let c = g.input(&[3]);
        assert!(g.add(a, c).is_err());
    }

    #[test]
    fn half_squared_residual_gradient() {
        let mut g = Graph::new();
        let y = g.input(&[]);
        let mu = g.parameter(&[]);
        let r = g.sub(y, mu).unwrap();
        let sq = g.square(r).unwrap();
        let loss = g.mul_scalar(sq, 0.5).unwrap();
        g.bind(y, Tensor::scalar(2.0)).unwrap();
        g.bind(mu, Tensor::scalar(5.0)).unwrap();
        g.forward().unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(mu).unwrap().item(), 3.0);
        assert!(grads.get(y).is_none());
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let mut g = Graph::new();
        let a = g.parameter(&[]);
        let b = g.parameter(&[]);
        let sa = g.stop_gradient(a).unwrap();
        let loss = g.mul(sa, b).unwrap();
        g.bind(a, Tensor::scalar(1.75)).unwrap();
        g.bind(b, Tensor::scalar(-3.0)).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(sa).unwrap().item().to_bits(), 1.75f64.to_bits());
        let grads = g.backward(loss).unwrap();
        assert!(grads.get(a).is_none());
        assert!(grads.get(sa).is_none());
        assert_eq!(grads.get(b).unwrap().item(), 1.75);
    }

    #[test]
    fn backward_requires_scalar_fresh_loss() {
        let mut g = Graph::new();
        let a = g.parameter(&[2]);
        let s = g.square(a).unwrap();
        g.bind(a, Tensor::new(vec![2], vec![1.0, 2.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(s), Err(Error::NonScalarLoss { .. })));
        let l = g.reduce_sum(s).unwrap();
        assert!(matches!(g.backward(l), Err(Error::StaleForward)));
        g.forward().unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[2.0, 4.0]);
        g.bind(a, Tensor::new(vec![2], vec![0.0, 0.0]).unwrap()).unwrap();
        assert!(matches!(g.backward(l), Err(Error::StaleForward)));
    }

    #[test]
    fn non_finite_reports_node() {
        let mut g = Graph::new();
        let a = g.input(&[]);
        let l = g.log(a).unwrap();
        g.bind(a, Tensor::scalar(0.0)).unwrap();
        match g.forward() {
            Err(Error::NonFinite { node, op }) => {
                assert_eq!(node, l);
                assert_eq!(op, "log");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_input_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(&[1]);
        let _ = g.exp(a).unwrap();
        assert!(matches!(g.forward(), Err(Error::UnboundInput(0))));
    }

    #[test]
    fn broadcast_row_and_reduce() {
        let mut g = Graph::new();
        let b = g.parameter(&[1, 3]);
        let wide = g.broadcast(b, &[2, 3]).unwrap();
        let loss = g.reduce_sum(wide).unwrap();
        g.bind(b, Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(wide).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        assert_eq!(g.value(loss).unwrap().item(), 12.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get(b).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn broadcast_column() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::new(vec![2, 1], vec![1.0, 2.0]).unwrap());
        let w = g.broadcast(c, &[2, 3]).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(w).unwrap().data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn abs_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let a = g.parameter(&[3]);
        let ab = g.abs(a).unwrap();
        let l = g.reduce_sum(ab).unwrap();
        g.bind(a, Tensor::new(vec![3], vec![-2.0, 0.0, 4.0]).unwrap()).unwrap();
        g.forward().unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[-1.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_mask_does_not_differentiate_mask() {
        let mut g = Graph::new();
        let a = g.parameter(&[2]);
        let m = g.input(&[2]);
        let d = g.dropout_mask(a, m).unwrap();
        let l = g.reduce_sum(d).unwrap();
        g.bind(a, Tensor::new(vec![2], vec![3.0, 4.0]).unwrap()).unwrap();
        g.bind(m, Tensor::new(vec![2], vec![0.0, 2.0]).unwrap()).unwrap();
        g.forward().unwrap();
        assert_eq!(g.value(l).unwrap().item(), 8.0);
        let grads = g.backward(l).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[0.0, 2.0]);
        assert!(grads.get(m).is_none());
    }

    #[test]
    fn live_paths_respect_barriers() {
        let mut g = Graph::new();
        let a = g.parameter(&[]);
        let s = g.stop_gradient(a).unwrap();
        let e = g.exp(s).unwrap();
        let f = g.exp(a).unwrap();
        let l = g.add(e, f).unwrap();
        assert!(!g.has_live_path(a, e).unwrap());
        assert!(g.has_live_path(a, f).unwrap());
        assert!(g.has_live_path(a, l).unwrap());
        assert!(g.has_live_path(s, l).unwrap());
    }
}
