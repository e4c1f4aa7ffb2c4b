//! Reverse-mode differentiation over a fixed set of dense primitives.
//!
//! A [`Tape`] records every primitive with its inputs and the values it
//! produced. Values are stored by copy and never mutated, so a tape can be
//! replayed against new parameters and the backward pass is deterministic.
//! Under an emulated [`MixedPrecisionPolicy`] each primitive output (and,
//! optionally, each backward accumulation) is rounded into the compute format.

use crate::error::{invalid, Error, Result};
use crate::linalg;
use crate::model::{Model, DataBatch};
use crate::precision::{quantize, quantize_slice, MixedPrecisionPolicy, NumericMode};
use crate::tensor::{FlatVector, ParamSet, Tensor};

/// Index of a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Op {
    /// Entry `i` of the bound parameter set.
    Param(usize),
    Const,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// `(n x k) + (1 x k)` broadcast over rows.
    AddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// `(n x k) * (1 x k)` broadcast over rows.
    MulRow(NodeId, NodeId),
    Relu(NodeId),
    Mean(NodeId),
    /// Per-row `(x - mean) / (std + eps)`.
    Normalize { input: NodeId, eps: f64 },
    SoftmaxCrossEntropy { logits: NodeId, labels: Vec<usize> },
    LogisticCrossEntropy { logits: NodeId, labels: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Param(_) => "param",
            Op::Const => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::MulRow(..) => "mul_row",
            Op::Relu(_) => "relu",
            Op::Mean(_) => "mean",
            Op::Normalize { .. } => "normalize",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::LogisticCrossEntropy { .. } => "logistic_cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Param(_) | Op::Const => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddRow(a, b) | Op::Mul(a, b) | Op::MulRow(a, b) => {
                vec![*a, *b]
            }
            Op::Relu(a) | Op::Mean(a) => vec![*a],
            Op::Normalize { input, .. } => vec![*input],
            Op::SoftmaxCrossEntropy { logits, .. } | Op::LogisticCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

/// Forward quantities kept for the backward pass.
#[derive(Clone, Debug, PartialEq)]
enum Saved {
    None,
    Normalize { centered: Vec<f64>, std: Vec<f64> },
    Probs(Vec<f64>),
}

#[derive(Clone, Debug, PartialEq)]
struct Node {
    op: Op,
    value: Tensor,
    saved: Saved,
    requires_grad: bool,
}

/// Topologically ordered record of one forward computation.
#[derive(Clone, Debug, PartialEq)]
pub struct Tape {
    nodes: Vec<Node>,
    output: Option<NodeId>,
    policy: MixedPrecisionPolicy,
    bound: Option<Bound>,
}

#[derive(Clone, Debug, PartialEq)]
struct Bound {
    fingerprint: u64,
    nodes: Vec<NodeId>,
}

impl Tape {
    pub fn new(policy: MixedPrecisionPolicy) -> Self {
        Tape { nodes: Vec::new(), output: None, policy, bound: None }
    }

    pub fn policy(&self) -> &MixedPrecisionPolicy {
        &self.policy
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    /// Scalar value of the designated output.
    pub fn loss(&self) -> Option<f64> {
        self.output.map(|id| self.nodes[id.0].value.data()[0])
    }

    /// Any recorded value is NaN or infinite.
    pub fn has_non_finite(&self) -> bool {
        self.nodes.iter().any(|n| !n.value.all_finite())
    }

    /// Register every parameter as a leaf. May only be called once per tape.
    pub fn bind_params(&mut self, params: &ParamSet) -> Result<Vec<NodeId>> {
        if self.bound.is_some() {
            return Err(invalid("parameters already bound to this tape"));
        }
        let mode = self.policy.forward_mode();
        let ids: Vec<NodeId> = params
            .entries()
            .iter()
            .enumerate()
            .map(|(i, e)| self.push_leaf(Op::Param(i), e.tensor.clone().quantized(mode), true))
            .collect();
        self.bound = Some(Bound { fingerprint: params.fingerprint(), nodes: ids.clone() });
        Ok(ids)
    }

    /// Leaf that receives no gradient (inputs, targets, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        let mode = self.policy.forward_mode();
        self.push_leaf(Op::Const, value.quantized(mode), false)
    }

    fn push_leaf(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, saved: Saved::None, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op) -> Result<NodeId> {
        for input in op.inputs() {
            if input.0 >= self.nodes.len() {
                return Err(invalid(format!("`{}` refers to an unknown node", op.name())));
            }
        }
        let (value, saved) = eval(&op, &self.nodes, self.policy.forward_mode())?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, saved, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push_op(Op::AddRow(a, row))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mul(a, b))
    }

    pub fn mul_row(&mut self, a: NodeId, row: NodeId) -> Result<NodeId> {
        self.push_op(Op::MulRow(a, row))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Relu(a))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.push_op(Op::Mean(a))
    }

    pub fn normalize(&mut self, a: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps >= 0.0) {
            return Err(invalid("normalization eps must be non-negative"));
        }
        self.push_op(Op::Normalize { input: a, eps })
    }

    /// Mean softmax cross-entropy of `(n x c)` logits against class indices.
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        self.push_op(Op::SoftmaxCrossEntropy { logits, labels: labels.to_vec() })
    }

    /// Mean binary cross-entropy of `(n x 1)` logits against labels in `{0, 1}`.
    pub fn logistic_cross_entropy(&mut self, logits: NodeId, labels: &[f64]) -> Result<NodeId> {
        self.push_op(Op::LogisticCrossEntropy { logits, labels: labels.to_vec() })
    }

    /// Designate the scalar node the backward pass starts from.
    pub fn set_output(&mut self, id: NodeId) -> Result<()> {
        if self.nodes[id.0].value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "set_output",
                detail: format!("output must be scalar, got shape {:?}", self.nodes[id.0].value.shape()),
            });
        }
        self.output = Some(id);
        Ok(())
    }

    /// Re-execute the recorded ops with new parameter values.
    pub fn replay(&self, params: &ParamSet) -> Result<Tape> {
        let bound = self.bound.as_ref().ok_or_else(|| invalid("tape has no bound parameters"))?;
        if params.len() != bound.nodes.len() {
            return Err(Error::DimMismatch { expected: bound.nodes.len(), got: params.len() });
        }
        let mode = self.policy.forward_mode();
        let mut out = Tape::new(self.policy);
        for node in &self.nodes {
            match &node.op {
                Op::Param(i) => {
                    let t = &params.entries()[*i].tensor;
                    if t.shape() != node.value.shape() {
                        return Err(Error::ShapeMismatch {
                            op: "replay",
                            detail: format!("parameter `{}` changed shape", params.entries()[*i].name),
                        });
                    }
                    out.push_leaf(Op::Param(*i), t.clone().quantized(mode), true);
                }
                Op::Const => {
                    out.push_leaf(Op::Const, node.value.clone(), false);
                }
                op => {
                    out.push_op(op.clone())?;
                }
            }
        }
        out.output = self.output;
        out.bound = Some(Bound { fingerprint: params.fingerprint(), nodes: bound.nodes.clone() });
        Ok(out)
    }

    /// Backward pass from the designated scalar output.
    pub fn backward(&self) -> Result<Vec<Option<Vec<f64>>>> {
        let out = self.output.ok_or_else(|| invalid("tape has no designated output"))?;
        self.backward_from(out, &[1.0])
    }

    /// Backward pass from any node, seeded with `seed` (same layout as its value).
    pub fn backward_from(&self, start: NodeId, seed: &[f64]) -> Result<Vec<Option<Vec<f64>>>> {
        let start_len = self.nodes[start.0].value.len();
        if seed.len() != start_len {
            return Err(Error::DimMismatch { expected: start_len, got: seed.len() });
        }
        let mode = self.policy.backward_mode();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut seed = seed.to_vec();
        quantize_slice(&mut seed, mode);
        grads[start.0] = Some(seed);

        for idx in (0..=start.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            for (input, contribution) in self.local_grads(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contribution) {
                            *a = quantize(*a + c, mode);
                        }
                    }
                    slot @ None => {
                        let mut c = contribution;
                        quantize_slice(&mut c, mode);
                        *slot = Some(c);
                    }
                }
            }
            grads[idx] = Some(g);
        }
        Ok(grads)
    }

    /// Gradient with respect to each bound parameter, flattened in parameter order.
    pub fn param_gradient(&self, grads: &[Option<Vec<f64>>], params: &ParamSet) -> Result<FlatVector> {
        let bound = self.bound.as_ref().ok_or_else(|| invalid("tape has no bound parameters"))?;
        let mut flat = Vec::with_capacity(params.total_dim());
        for (entry, id) in params.entries().iter().zip(&bound.nodes) {
            match &grads[id.0] {
                Some(g) => flat.extend_from_slice(g),
                None => flat.extend(std::iter::repeat_n(0.0, entry.tensor.len())),
            }
        }
        Ok(flat)
    }

    fn check_fresh(&self, params: &ParamSet) -> Result<()> {
        match &self.bound {
            Some(b) if b.fingerprint == params.fingerprint() && b.nodes.len() == params.len() => Ok(()),
            Some(_) => Err(Error::StaleTape),
            None => Err(invalid("tape has no bound parameters")),
        }
    }

    /// Contributions of `node`'s upstream gradient `g` to each of its inputs.
    fn local_grads(&self, node: &Node, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        match &node.op {
            Op::Param(_) | Op::Const => vec![],
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (n, k, m) = (ta.rows(), ta.cols(), tb.cols());
                let mut ga = vec![0.0; n * k];
                let mut gb = vec![0.0; k * m];
                for i in 0..n {
                    for j in 0..m {
                        let gij = g[i * m + j];
                        if gij == 0.0 {
                            continue;
                        }
                        for l in 0..k {
                            ga[i * k + l] += gij * tb.data()[l * m + j];
                            gb[l * m + j] += ta.data()[i * k + l] * gij;
                        }
                    }
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::AddRow(a, b) => {
                let k = val(*b).len();
                let mut gb = vec![0.0; k];
                for row in g.chunks(k) {
                    linalg::axpy(1.0, row, &mut gb);
                }
                vec![(*a, g.to_vec()), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let ga = g.iter().zip(tb).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(ta).map(|(x, y)| x * y).collect();
                vec![(*a, ga), (*b, gb)]
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a).data(), val(*b).data());
                let k = tb.len();
                let mut ga = vec![0.0; g.len()];
                let mut gb = vec![0.0; k];
                for (i, gi) in g.iter().enumerate() {
                    ga[i] = gi * tb[i % k];
                    gb[i % k] += gi * ta[i];
                }
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let ga = g.iter().zip(x).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect();
                vec![(*a, ga)]
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Normalize { input, eps } => {
                let Saved::Normalize { centered, std } = &node.saved else { unreachable!() };
                let k = val(*input).cols();
                let mut ga = vec![0.0; g.len()];
                for (r, s) in std.iter().enumerate() {
                    let gy = &g[r * k..(r + 1) * k];
                    let d = &centered[r * k..(r + 1) * k];
                    let denom = s + eps;
                    let gmean = gy.iter().sum::<f64>() / k as f64;
                    let gd = linalg::dot(gy, d);
                    for j in 0..k {
                        let mut v = (gy[j] - gmean) / denom;
                        if *s > 0.0 {
                            v -= d[j] * gd / (k as f64 * s * denom * denom);
                        }
                        ga[r * k + j] = v;
                    }
                }
                vec![(*input, ga)]
            }
            Op::SoftmaxCrossEntropy { logits, labels } => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let n = labels.len();
                let c = p.len() / n;
                let scale = g[0] / n as f64;
                let mut gl: Vec<f64> = p.iter().map(|v| v * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gl[i * c + y] -= scale;
                }
                vec![(*logits, gl)]
            }
            Op::LogisticCrossEntropy { logits, labels } => {
                let Saved::Probs(p) = &node.saved else { unreachable!() };
                let n = labels.len() as f64;
                let gl = p.iter().zip(labels).map(|(s, y)| g[0] * (s - y) / n).collect();
                vec![(*logits, gl)]
            }
        }
    }
}

fn shape_err(op: &'static str, detail: String) -> Error {
    Error::ShapeMismatch { op, detail }
}

fn rank2(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
    }
    Ok((t.rows(), t.cols()))
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Stable `log(1 + exp(z))`.
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Evaluate one primitive in full precision and round its output into `mode`.
fn eval(op: &Op, nodes: &[Node], mode: NumericMode) -> Result<(Tensor, Saved)> {
    let val = |id: &NodeId| &nodes[id.0].value;
    let name = op.name();
    let (mut out, saved) = match op {
        Op::Param(_) | Op::Const => unreachable!("leaves are not evaluated"),
        Op::MatMul(a, b) => {
            let (n, k) = rank2(val(a), name)?;
            let (k2, m) = rank2(val(b), name)?;
            if k != k2 {
                return Err(shape_err(name, format!("({n} x {k}) @ ({k2} x {m})")));
            }
            let (da, db) = (val(a).data(), val(b).data());
            let mut data = vec![0.0; n * m];
            for i in 0..n {
                for l in 0..k {
                    let x = da[i * k + l];
                    if x == 0.0 {
                        continue;
                    }
                    for j in 0..m {
                        data[i * m + j] += x * db[l * m + j];
                    }
                }
            }
            (Tensor::matrix(n, m, data)?, Saved::None)
        }
        Op::Add(a, b) | Op::Mul(a, b) => {
            let (ta, tb) = (val(a), val(b));
            if ta.shape() != tb.shape() {
                return Err(shape_err(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
            }
            let data = match op {
                Op::Add(..) => linalg::add(ta.data(), tb.data()),
                _ => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
            };
            (Tensor::new(ta.shape().to_vec(), data)?, Saved::None)
        }
        Op::AddRow(a, b) | Op::MulRow(a, b) => {
            let (n, k) = rank2(val(a), name)?;
            let (r, k2) = rank2(val(b), name)?;
            if r != 1 || k != k2 {
                return Err(shape_err(name, format!("({n} x {k}) with row ({r} x {k2})")));
            }
            let row = val(b).data();
            let add = matches!(op, Op::AddRow(..));
            let data = val(a)
                .data()
                .iter()
                .enumerate()
                .map(|(i, x)| if add { x + row[i % k] } else { x * row[i % k] })
                .collect();
            (Tensor::matrix(n, k, data)?, Saved::None)
        }
        Op::Relu(a) => (val(a).map(|x| if x > 0.0 { x } else { 0.0 }), Saved::None),
        Op::Mean(a) => {
            let t = val(a);
            (Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64), Saved::None)
        }
        Op::Normalize { input, eps } => {
            let (n, k) = rank2(val(input), name)?;
            let x = val(input).data();
            let mut centered = vec![0.0; n * k];
            let mut std = vec![0.0; n];
            let mut data = vec![0.0; n * k];
            for r in 0..n {
                let row = &x[r * k..(r + 1) * k];
                let m = row.iter().sum::<f64>() / k as f64;
                let var = row.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / k as f64;
                let s = var.sqrt();
                std[r] = s;
                for j in 0..k {
                    let d = row[j] - m;
                    centered[r * k + j] = d;
                    data[r * k + j] = if s + eps > 0.0 { d / (s + eps) } else { 0.0 };
                }
            }
            (Tensor::matrix(n, k, data)?, Saved::Normalize { centered, std })
        }
        Op::SoftmaxCrossEntropy { logits, labels } => {
            let (n, c) = rank2(val(logits), name)?;
            if labels.len() != n {
                return Err(shape_err(name, format!("{n} rows of logits, {} labels", labels.len())));
            }
            let z = val(logits).data();
            let mut probs = vec![0.0; n * c];
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::LabelOutOfRange { label: y, classes: c });
                }
                let row = &z[i * c..(i + 1) * c];
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
                let lse = mx + sum.ln();
                total += lse - row[y];
                for j in 0..c {
                    probs[i * c + j] = (row[j] - lse).exp();
                }
            }
            (Tensor::scalar(total / n as f64), Saved::Probs(probs))
        }
        Op::LogisticCrossEntropy { logits, labels } => {
            let (n, c) = rank2(val(logits), name)?;
            if c != 1 || labels.len() != n {
                return Err(shape_err(name, format!("({n} x {c}) logits with {} labels", labels.len())));
            }
            if let Some(bad) = labels.iter().find(|y| **y != 0.0 && **y != 1.0) {
                return Err(invalid(format!("binary label must be 0 or 1, got {bad}")));
            }
            let z = val(logits).data();
            let total: f64 = z.iter().zip(labels).map(|(zi, y)| softplus(*zi) - y * zi).sum();
            let probs = z.iter().map(|zi| sigmoid(*zi)).collect();
            (Tensor::scalar(total / n as f64), Saved::Probs(probs))
        }
    };
    out = out.quantized(mode);
    Ok((out, saved))
}

/// Gradient of the tape's output with respect to `params`.
///
/// Fails with [`Error::StaleTape`] when `params` differ from the values the
/// tape was recorded with.
pub fn gradient(tape: &Tape, params: &ParamSet) -> Result<FlatVector> {
    tape.check_fresh(params)?;
    let grads = tape.backward()?;
    tape.param_gradient(&grads, params)
}

/// Loss and gradient of `model` at `params` on `batch`.
pub fn loss_and_gradient(
    model: &dyn Model,
    params: &ParamSet,
    batch: &DataBatch,
    policy: &MixedPrecisionPolicy,
) -> Result<(f64, FlatVector)> {
    let fwd = model.forward(params, batch, policy)?;
    let g = gradient(&fwd.tape, params)?;
    Ok((fwd.loss, g))
}

/// Finite-difference step used by [`hvp`].
pub fn hvp_step(w_norm: f64, v_norm: f64) -> f64 {
    f64::EPSILON.sqrt() * (1.0 + w_norm) / v_norm.max(1.0)
}

/// Hessian-vector product by central differences of the full-precision gradient.
pub fn hvp(model: &dyn Model, params: &ParamSet, batch: &DataBatch, v: &[f64]) -> Result<FlatVector> {
    let dim = params.total_dim();
    if v.len() != dim {
        return Err(Error::DimMismatch { expected: dim, got: v.len() });
    }
    let v_norm = linalg::norm(v);
    if v_norm == 0.0 {
        return Err(invalid("hvp direction must be non-zero"));
    }
    let w = params.flatten();
    let h = hvp_step(linalg::norm(&w), v_norm);
    let mut plus = w.clone();
    linalg::axpy(h, v, &mut plus);
    let mut minus = w;
    linalg::axpy(-h, v, &mut minus);
    let full = MixedPrecisionPolicy::FULL;
    let (_, gp) = loss_and_gradient(model, &params.with_flat(&plus)?, batch, &full)?;
    let (_, gm) = loss_and_gradient(model, &params.with_flat(&minus)?, batch, &full)?;
    Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
}
