use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{Tensor, TensorError};

/// Index of a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor inside a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered, named collection of trainable tensors.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter on `tape`, in id order.
    pub fn register(&self, tape: &mut Tape) -> Vec<Var> {
        self.iter()
            .map(|(id, _, value)| tape.param(id, value.clone()))
            .collect()
    }
}

/// Differentiable primitives.
///
/// Saved activations: every node keeps its output, and inputs are reachable
/// through the tape, so each rule reads whichever is cheaper. `Tanh`,
/// `Sigmoid`, `SoftmaxRows` and `LogSoftmaxRows` differentiate from their
/// output; `MatMul`, `Mul`, `Ln` and `Clamp` from their inputs; the linear
/// primitives need nothing.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    /// `[m,k] x [k,n] -> [m,n]`.
    MatMul,
    /// Element-wise; the right operand may be a `[1,n]` row broadcast over rows.
    Add,
    Sub,
    Mul,
    Scale(f64),
    /// Adds a constant to every element.
    Offset(f64),
    Tanh,
    /// Outputs are kept strictly inside (0,1).
    Sigmoid,
    /// Natural log; rejects non-positive inputs.
    Ln,
    SoftmaxRows,
    LogSoftmaxRows,
    /// Sum of all elements to a scalar.
    Sum,
    /// Column sums, `[m,n] -> [1,n]`.
    SumRows,
    /// Column-wise concatenation of rank-2 inputs with equal row counts.
    Concat,
    Transpose,
    /// Clamp to `[lo, hi]`; gradient passes only inside the interval.
    Clamp {
        lo: f64,
        hi: f64,
    },
}

impl Primitive {
    pub fn name(&self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale(_) => "scale",
            Primitive::Offset(_) => "offset",
            Primitive::Tanh => "tanh",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Ln => "ln",
            Primitive::SoftmaxRows => "softmax_rows",
            Primitive::LogSoftmaxRows => "log_softmax_rows",
            Primitive::Sum => "sum",
            Primitive::SumRows => "sum_rows",
            Primitive::Concat => "concat",
            Primitive::Transpose => "transpose",
            Primitive::Clamp { .. } => "clamp",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Param(ParamId),
    Constant,
    Op(Primitive, Vec<Var>),
}

#[derive(Clone, Debug)]
struct Node {
    kind: NodeKind,
    value: Tensor,
}

/// Wengert list. Nodes are appended in evaluation order, so creation order is
/// a topological order and the backward pass is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    #[cfg(test)]
    pub(crate) corrupt_tanh: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.push(NodeKind::Param(id), value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(NodeKind::Constant, value)
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push(&mut self, kind: NodeKind, value: Tensor) -> Var {
        self.nodes.push(Node { kind, value });
        Var(self.nodes.len() - 1)
    }

    /// Evaluates `op` on `inputs` and records the result.
    pub fn apply(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var, TensorError> {
        for v in inputs {
            if v.0 >= self.nodes.len() {
                return Err(TensorError::UnknownVar(v.0));
            }
        }
        let values: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = forward(op, &values)?;
        if !out.is_finite() {
            return Err(TensorError::NonFinite { primitive: op.name() });
        }
        Ok(self.push(NodeKind::Op(op, inputs.to_vec()), out))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::MatMul, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Scale(s), &[a])
    }

    pub fn offset(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Offset(s), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Tanh, &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sigmoid, &[a])
    }

    pub fn ln(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Ln, &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SoftmaxRows, &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::LogSoftmaxRows, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Sum, &[a])
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::SumRows, &[a])
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        self.apply(Primitive::Concat, parts)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        self.apply(Primitive::Transpose, &[a])
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var, TensorError> {
        self.apply(Primitive::Clamp { lo, hi }, &[a])
    }

    /// `x W + b` with `b` a `[1,n]` row.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
        let xw = self.matmul(x, w)?;
        self.add(xw, b)
    }
}

/// Per-parameter gradients produced by [`backward`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Accumulates `other` into `self`, in parameter-id order.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => add_into(acc.data_mut(), g.data()),
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for g in self.grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Reverse sweep from a scalar `output`. Every parameter registered on the
/// tape receives an entry, zero if it does not influence `output`.
/// Contributions are summed in reverse tape order.
pub fn backward(tape: &Tape, output: Var) -> Result<Gradients, TensorError> {
    if output.0 >= tape.nodes.len() {
        return Err(TensorError::UnknownVar(output.0));
    }
    let out_value = &tape.nodes[output.0].value;
    if !out_value.is_scalar() {
        return Err(TensorError::NonScalarOutput(out_value.shape().to_vec()));
    }
    let mut adj: Vec<Option<Tensor>> = vec![None; output.0 + 1];
    adj[output.0] = Some(Tensor::filled(out_value.shape(), 1.0));

    let mut result = Gradients::default();
    for idx in (0..=output.0).rev() {
        let node = &tape.nodes[idx];
        if let NodeKind::Param(id) = node.kind {
            let g = adj[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape()));
            match result.grads.get_mut(&id) {
                Some(acc) => add_into(acc.data_mut(), g.data()),
                None => {
                    result.grads.insert(id, g);
                }
            }
            continue;
        }
        let Some(g) = adj[idx].take() else { continue };
        let NodeKind::Op(op, ref inputs) = node.kind else {
            continue;
        };
        let in_values: Vec<&Tensor> = inputs.iter().map(|v| &tape.nodes[v.0].value).collect();
        #[cfg(test)]
        let contribs = if tape.corrupt_tanh && op == Primitive::Tanh {
            // Deliberately wrong rule, used by the gradient-check mutation test.
            vec![zip(&g, &node.value, |g, y| g * (1.0 - y))]
        } else {
            vjp(op, &in_values, &node.value, &g)
        };
        #[cfg(not(test))]
        let contribs = vjp(op, &in_values, &node.value, &g);
        for (input, c) in inputs.iter().zip(contribs) {
            match &mut adj[input.0] {
                Some(acc) => add_into(acc.data_mut(), c.data()),
                slot @ None => *slot = Some(c),
            }
        }
    }
    Ok(result)
}

fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn expect_arity(op: Primitive, inputs: &[&Tensor], n: usize) -> Result<(), TensorError> {
    if inputs.len() != n {
        return Err(TensorError::Arity {
            primitive: op.name(),
            expected: n,
            got: inputs.len(),
        });
    }
    Ok(())
}

fn mismatch(op: Primitive, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        primitive: op.name(),
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn require_2d(op: Primitive, a: &Tensor) -> Result<(usize, usize), TensorError> {
    a.dims2().ok_or_else(|| TensorError::ShapeMismatch {
        primitive: op.name(),
        lhs: a.shape().to_vec(),
        rhs: vec![],
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Broadcast {
    Same,
    Row,
}

fn broadcast_kind(op: Primitive, a: &Tensor, b: &Tensor) -> Result<Broadcast, TensorError> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    match (a.dims2(), b.dims2()) {
        (Some((_, n)), Some((1, m))) if n == m => Ok(Broadcast::Row),
        _ => Err(mismatch(op, a, b)),
    }
}

fn binary(a: &Tensor, b: &Tensor, kind: Broadcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = match kind {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Row => {
            let n = b.len();
            a.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, b.data()[i % n]))
                .collect()
        }
    };
    Tensor {
        shape: a.shape().to_vec(),
        data,
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    binary(a, b, Broadcast::Same, f)
}

/// Column sums of `t` as a `[1,n]` row.
fn reduce_rows(t: &Tensor) -> Tensor {
    let (m, n) = t.dims2().expect("rank-2");
    let mut out = vec![0.0; n];
    for r in 0..m {
        add_into(&mut out, &t.data()[r * n..(r + 1) * n]);
    }
    Tensor {
        shape: vec![1, n],
        data: out,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    // Saturation would otherwise round to exactly 0 or 1.
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

fn softmax_row(row: &[f64], out: &mut [f64], log: bool) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
    if log {
        let lz = z.ln();
        for (o, v) in out.iter_mut().zip(row) {
            *o = v - max - lz;
        }
    } else {
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - max).exp() / z;
        }
    }
}

fn forward(op: Primitive, inputs: &[&Tensor]) -> Result<Tensor, TensorError> {
    match op {
        Primitive::MatMul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = require_2d(op, a)?;
            let (k2, n) = b.dims2().ok_or_else(|| mismatch(op, a, b))?;
            if k != k2 {
                return Err(mismatch(op, a, b));
            }
            Ok(Tensor {
                shape: vec![m, n],
                data: matmul_raw(a.data(), b.data(), m, k, n),
            })
        }
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            expect_arity(op, inputs, 2)?;
            let (a, b) = (inputs[0], inputs[1]);
            let kind = broadcast_kind(op, a, b)?;
            Ok(match op {
                Primitive::Add => binary(a, b, kind, |x, y| x + y),
                Primitive::Sub => binary(a, b, kind, |x, y| x - y),
                _ => binary(a, b, kind, |x, y| x * y),
            })
        }
        Primitive::Scale(s) => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|v| v * s))
        }
        Primitive::Offset(s) => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|v| v + s))
        }
        Primitive::Tanh => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(f64::tanh))
        }
        Primitive::Sigmoid => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(sigmoid))
        }
        Primitive::Ln => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            if let Some((index, &value)) = a.data().iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
                return Err(TensorError::LogDomain { index, value });
            }
            Ok(a.map(f64::ln))
        }
        Primitive::SoftmaxRows | Primitive::LogSoftmaxRows => {
            expect_arity(op, inputs, 1)?;
            let a = inputs[0];
            let (m, n) = require_2d(op, a)?;
            let mut data = vec![0.0; m * n];
            for r in 0..m {
                softmax_row(
                    &a.data()[r * n..(r + 1) * n],
                    &mut data[r * n..(r + 1) * n],
                    op == Primitive::LogSoftmaxRows,
                );
            }
            Ok(Tensor {
                shape: vec![m, n],
                data,
            })
        }
        Primitive::Sum => {
            expect_arity(op, inputs, 1)?;
            Ok(Tensor::scalar(inputs[0].data().iter().sum()))
        }
        Primitive::SumRows => {
            expect_arity(op, inputs, 1)?;
            require_2d(op, inputs[0])?;
            Ok(reduce_rows(inputs[0]))
        }
        Primitive::Concat => {
            if inputs.is_empty() {
                return Err(TensorError::Arity {
                    primitive: op.name(),
                    expected: 1,
                    got: 0,
                });
            }
            let (m, _) = require_2d(op, inputs[0])?;
            let mut widths = Vec::with_capacity(inputs.len());
            for t in inputs {
                match t.dims2() {
                    Some((r, c)) if r == m => widths.push(c),
                    _ => return Err(mismatch(op, inputs[0], t)),
                }
            }
            let total: usize = widths.iter().sum();
            let mut data = Vec::with_capacity(m * total);
            for r in 0..m {
                for (t, &w) in inputs.iter().zip(&widths) {
                    data.extend_from_slice(&t.data()[r * w..(r + 1) * w]);
                }
            }
            Ok(Tensor {
                shape: vec![m, total],
                data,
            })
        }
        Primitive::Transpose => {
            expect_arity(op, inputs, 1)?;
            let (m, n) = require_2d(op, inputs[0])?;
            Ok(Tensor {
                shape: vec![n, m],
                data: transpose_raw(inputs[0].data(), m, n),
            })
        }
        Primitive::Clamp { lo, hi } => {
            expect_arity(op, inputs, 1)?;
            Ok(inputs[0].map(|v| v.clamp(lo, hi)))
        }
    }
}

/// Vector-Jacobian products: one contribution per input.
fn vjp(op: Primitive, inputs: &[&Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    match op {
        Primitive::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k) = a.dims2().expect("rank-2");
            let n = b.shape()[1];
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(a.data(), m, k);
            vec![
                Tensor {
                    shape: vec![m, k],
                    data: matmul_raw(g.data(), &bt, m, n, k),
                },
                Tensor {
                    shape: vec![k, n],
                    data: matmul_raw(&at, g.data(), k, m, n),
                },
            ]
        }
        Primitive::Add | Primitive::Sub => {
            let kind = if inputs[0].shape() == inputs[1].shape() {
                Broadcast::Same
            } else {
                Broadcast::Row
            };
            let sign = if op == Primitive::Sub { -1.0 } else { 1.0 };
            let gb = match kind {
                Broadcast::Same => g.map(|v| sign * v),
                Broadcast::Row => reduce_rows(g).map(|v| sign * v),
            };
            vec![g.clone(), gb]
        }
        Primitive::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape() == b.shape() {
                vec![zip(g, b, |x, y| x * y), zip(g, a, |x, y| x * y)]
            } else {
                let ga = binary(g, b, Broadcast::Row, |x, y| x * y);
                let gb = reduce_rows(&zip(g, a, |x, y| x * y));
                vec![ga, gb]
            }
        }
        Primitive::Scale(s) => vec![g.map(|v| v * s)],
        Primitive::Offset(_) => vec![g.clone()],
        Primitive::Tanh => vec![zip(g, out, |g, y| g * (1.0 - y * y))],
        Primitive::Sigmoid => vec![zip(g, out, |g, y| g * y * (1.0 - y))],
        Primitive::Ln => vec![zip(g, inputs[0], |g, x| g / x)],
        Primitive::SoftmaxRows => {
            let (m, n) = out.dims2().expect("rank-2");
            let mut data = vec![0.0; m * n];
            for r in 0..m {
                let y = &out.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    data[r * n + j] = y[j] * (gr[j] - dot);
                }
            }
            vec![Tensor {
                shape: vec![m, n],
                data,
            }]
        }
        Primitive::LogSoftmaxRows => {
            let (m, n) = out.dims2().expect("rank-2");
            let mut data = vec![0.0; m * n];
            for r in 0..m {
                let y = &out.data()[r * n..(r + 1) * n];
                let gr = &g.data()[r * n..(r + 1) * n];
                let total: f64 = gr.iter().sum();
                for j in 0..n {
                    data[r * n + j] = gr[j] - y[j].exp() * total;
                }
            }
            vec![Tensor {
                shape: vec![m, n],
                data,
            }]
        }
        Primitive::Sum => vec![Tensor::filled(inputs[0].shape(), g.item())],
        Primitive::SumRows => {
            let (m, n) = inputs[0].dims2().expect("rank-2");
            let mut data = Vec::with_capacity(m * n);
            for _ in 0..m {
                data.extend_from_slice(g.data());
            }
            vec![Tensor {
                shape: vec![m, n],
                data,
            }]
        }
        Primitive::Concat => {
            let (m, total) = g.dims2().expect("rank-2");
            let mut offset = 0;
            inputs
                .iter()
                .map(|t| {
                    let w = t.shape()[1];
                    let mut data = Vec::with_capacity(m * w);
                    for r in 0..m {
                        data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                    }
                    offset += w;
                    Tensor {
                        shape: vec![m, w],
                        data,
                    }
                })
                .collect()
        }
        Primitive::Transpose => {
            let (m, n) = g.dims2().expect("rank-2");
            vec![Tensor {
                shape: vec![n, m],
                data: transpose_raw(g.data(), m, n),
            }]
        }
        Primitive::Clamp { lo, hi } => {
            vec![zip(g, inputs[0], |g, x| if x >= lo && x <= hi { g } else { 0.0 })]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn sigmoid_stays_inside_unit_interval() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![-1e4, -800.0, -40.0, 40.0, 800.0, 1e4]));
        let y = tape.sigmoid(x).unwrap();
        for &v in tape.value(y).data() {
            assert!(v > 0.0 && v < 1.0, "{v}");
        }
    }

    #[test]
    fn softmax_of_equal_row_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::row(vec![3.0; 4]));
        let y = tape.softmax_rows(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::filled(&[2, 3], 1.0));
        let b = tape.constant(Tensor::filled(&[3, 1], 1.0));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 3.0]);
    }

    #[test]
    fn shape_mismatch_names_primitive_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                primitive: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn ln_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::row(vec![1.0, 0.0]));
        assert_eq!(tape.ln(a).unwrap_err(), TensorError::LogDomain { index: 1, value: 0.0 });
    }

    #[test]
    fn gradient_of_sum_is_ones() {
        let mut params = ParamSet::new();
        let id = params.push("p", Tensor::row(vec![1.0, -2.0, 5.0]));
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let s = tape.sum(vars[0]).unwrap();
        let g = backward(&tape, s).unwrap();
        assert_eq!(g.get(id).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn gradient_of_sigmoid_at_zero() {
        let mut params = ParamSet::new();
        let id = params.push("x", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let y = tape.sigmoid(vars[0]).unwrap();
        let g = backward(&tape, y).unwrap();
        assert_eq!(g.get(id).unwrap().item(), 0.25);
    }

    #[test]
    fn untouched_parameter_gets_zero_gradient() {
        let mut params = ParamSet::new();
        let used = params.push("a", Tensor::row(vec![1.0, 2.0]));
        let unused = params.push("b", Tensor::filled(&[2, 2], 3.0));
        let mut tape = Tape::new();
        let vars = params.register(&mut tape);
        let s = tape.sum(vars[0]).unwrap();
        let g = backward(&tape, s).unwrap();
        assert_eq!(g.get(used).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get(unused).unwrap(), &Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.tanh(a).unwrap();
        assert!(matches!(backward(&tape, b), Err(TensorError::NonScalarOutput(_))));
    }

    #[test]
    fn row_broadcast_add_and_mul() {
        let mut params = ParamSet::new();
        let a = params.push("a", t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = params.push("b", t(&[1, 2], &[10.0, 20.0]));
        let mut tape = Tape::new();
        let v = params.register(&mut tape);
        let s = tape.add(v[0], v[1]).unwrap();
        assert_eq!(tape.value(s).data(), &[11.0, 22.0, 13.0, 24.0]);
        let p = tape.mul(v[0], v[1]).unwrap();
        assert_eq!(tape.value(p).data(), &[10.0, 40.0, 30.0, 80.0]);
        let out = tape.sum(p).unwrap();
        let g = backward(&tape, out).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[10.0, 20.0, 10.0, 20.0]);
        assert_eq!(g.get(b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn concat_splits_gradient() {
        let mut params = ParamSet::new();
        let a = params.push("a", t(&[2, 1], &[1.0, 2.0]));
        let b = params.push("b", t(&[2, 2], &[3.0, 4.0, 5.0, 6.0]));
        let mut tape = Tape::new();
        let v = params.register(&mut tape);
        let c = tape.concat(&[v[0], v[1]]).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum(p).unwrap();
        let g = backward(&tape, s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 4.0]);
        assert_eq!(g.get(b).unwrap().data(), &[2.0, 3.0, 5.0, 6.0]);
    }
}
