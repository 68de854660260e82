//! Reverse-mode differentiation over a tape of tensor-valued nodes.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! node is created and the tape is replayed backwards by
//! [`Graph::backward`]. Nodes that do not depend on any trainable leaf are
//! never visited on the way back.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::params::has_prefix;
use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc};
use super::{ParamVector, Tensor};
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Smooth elementwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Sigmoid,
    Softplus,
    Tanh,
    Silu,
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Sigmoid => sigmoid(x),
            Activation::Softplus => softplus(x),
            Activation::Tanh => x.tanh(),
            Activation::Silu => x * sigmoid(x),
        }
    }

    /// Derivative given the input `x` and output `y`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Softplus => sigmoid(x),
            Activation::Tanh => 1.0 - y * y,
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// A differentiable operation defined outside the graph core.
///
/// The forward value is computed by the caller; the op only supplies the
/// vector-Jacobian product.
pub trait CustomOp {
    fn name(&self) -> &'static str;

    /// Gradients for each input given the upstream gradient `grad`.
    /// Entries for inputs with `needs[i] == false` may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
        needs: &[bool],
    ) -> Result<Vec<Option<Tensor>>>;
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Act(Var, Activation),
    Concat(Vec<Var>),
    Slice(Var, usize, usize),
    Gather(Var, Vec<usize>),
    Reshape(Var),
    Transpose(Var),
    Sum(Var),
    SumSquares(Var),
    Custom(Box<dyn CustomOp>, Vec<Var>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Act(..) => "activation",
            Op::Concat(..) => "concat",
            Op::Slice(..) => "slice",
            Op::Gather(..) => "gather",
            Op::Reshape(..) => "reshape",
            Op::Transpose(..) => "transpose",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::Custom(op, _) => op.name(),
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) | Op::MatMul(a, b) => {
                vec![*a, *b]
            }
            Op::Scale(a, _)
            | Op::Act(a, _)
            | Op::Slice(a, ..)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Transpose(a)
            | Op::Sum(a)
            | Op::SumSquares(a) => vec![*a],
            Op::Concat(v) | Op::Custom(_, v) => v.clone(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Leaves created from a [`ParamVector`], one per group.
pub struct ParamBinding {
    vars: HashMap<String, Var>,
}

impl ParamBinding {
    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("parameter group `{name}` not bound")))
    }

    /// Gather per-group gradients into a vector laid out like `params`;
    /// groups without a gradient are zero.
    pub fn collect(&self, grads: &Gradients, params: &ParamVector) -> ParamVector {
        let mut out = params.zeros_like();
        for g in params.groups() {
            if let Some(t) = self.vars.get(&g.name).and_then(|&v| grads.get(v)) {
                out.values_mut()[g.range()].copy_from_slice(t.data());
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name().to_string(),
            });
        }
        let needs_grad = op.inputs().iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf".into() });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Bind every group of `params` as a leaf; groups for which
    /// `trainable(name)` is false are constants.
    pub fn bind(
        &mut self,
        params: &ParamVector,
        trainable: impl Fn(&str) -> bool,
    ) -> Result<ParamBinding> {
        let mut vars = HashMap::new();
        for g in params.groups() {
            let t = Tensor::new(g.shape.clone(), params.values()[g.range()].to_vec())?;
            let v = self.leaf(t, trainable(&g.name))?;
            vars.insert(g.name.clone(), v);
        }
        Ok(ParamBinding { vars })
    }

    /// Bind only the groups under `prefix`; names keep their full form.
    pub fn bind_prefix(
        &mut self,
        params: &ParamVector,
        prefix: &str,
        trainable: bool,
    ) -> Result<ParamBinding> {
        let mut vars = HashMap::new();
        for g in params.groups().iter().filter(|g| has_prefix(&g.name, prefix)) {
            let t = Tensor::new(g.shape.clone(), params.values()[g.range()].to_vec())?;
            let v = self.leaf(t, trainable)?;
            vars.insert(g.name.clone(), v);
        }
        Ok(ParamBinding { vars })
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same length")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::Scale(a, k))
    }

    /// `x[n,m] + b[m]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let m = tx.cols();
        if tb.len() != m {
            return Err(Error::shape(
                "add_bias",
                format!("input {:?} vs bias {:?}", tx.shape(), tb.shape()),
            ));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(m) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b))
    }

    /// `a[n,k] * w[k,m]`; `w` may be stored flat as long as its length is `k*m`
    /// and its last axis (if 2-D) is `m`.
    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let (ta, tw) = (self.value(a), self.value(w));
        let (n, k) = (ta.rows(), ta.cols());
        if tw.shape().len() != 2 || tw.shape()[0] != k {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tw.shape()),
            ));
        }
        let m = tw.shape()[1];
        let mut out = vec![0.0; n * m];
        matmul_acc(ta.data(), tw.data(), &mut out, n, k, m);
        self.push(Tensor::new(vec![n, m], out)?, Op::MatMul(a, w))
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        if act == Activation::Identity {
            return Ok(x);
        }
        let v = self.value(x).map(|z| act.apply(z));
        self.push(v, Op::Act(x, act))
    }

    /// Concatenate along the last axis; all inputs must share the row count.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.value(parts[0]).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rows() != n {
                return Err(Error::shape(
                    "concat",
                    format!("row counts {} vs {}", n, t.rows()),
                ));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for r in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::new(vec![n, total], out)?, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start+len` of the matrix view.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, m) = (t.rows(), t.cols());
        if start + len > m {
            return Err(Error::shape("slice", format!("{start}+{len} > {m}")));
        }
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&t.data()[r * m + start..r * m + start + len]);
        }
        self.push(Tensor::new(vec![n, len], out)?, Op::Slice(x, start, len))
    }

    /// Rows `idx` of `table[r, d]`.
    pub fn gather(&mut self, table: Var, idx: Vec<usize>) -> Result<Var> {
        let t = self.value(table);
        let (r, d) = (t.rows(), t.cols());
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in &idx {
            if i >= r {
                return Err(Error::shape("gather", format!("row {i} of {r}")));
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let n = idx.len();
        self.push(Tensor::new(vec![n, d], out)?, Op::Gather(table, idx))
    }

    /// Same values under a new shape of equal length.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        self.push(v, Op::Reshape(x))
    }

    /// Matrix transpose of the `[rows, cols]` view.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let v = Tensor::new(vec![t.cols(), t.rows()], transpose_data(t.data(), t.rows(), t.cols()))?;
        self.push(v, Op::Transpose(x))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn sum_squares(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let n = self.value(d).len().max(1) as f64;
        let s = self.sum_squares(d)?;
        self.scale(s, 1.0 / n)
    }

    /// `sum(x * c)` for a constant tensor `c`.
    pub fn dot_const(&mut self, x: Var, c: Tensor) -> Result<Var> {
        let cv = self.constant(c)?;
        let p = self.mul(x, cv)?;
        self.sum(p)
    }

    pub fn custom(&mut self, op: Box<dyn CustomOp>, inputs: &[Var], value: Tensor) -> Result<Var> {
        self.push(value, Op::Custom(op, inputs.to_vec()))
    }

    /// Backpropagate from a single-element node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.nodes[loss.0].value.shape()),
            ));
        }
        grads[loss.0] = Some(Tensor::full(self.nodes[loss.0].value.shape().to_vec(), 1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    op: format!("backward of {}", node.op.name()),
                });
            }
            self.backprop_node(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(grads, *a, reshaped(g, val(*a)));
                }
                if needs(*b) {
                    acc(grads, *b, reshaped(g, val(*b)));
                }
            }
            Op::Sub(a, b) => {
                if needs(*a) {
                    acc(grads, *a, reshaped(g, val(*a)));
                }
                if needs(*b) {
                    acc(grads, *b, reshaped(&g.map(|x| -x), val(*b)));
                }
            }
            Op::Mul(a, b) => {
                if needs(*a) {
                    let d = g.data().iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *a, Tensor::new(val(*a).shape().to_vec(), d)?);
                }
                if needs(*b) {
                    let d = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    acc(grads, *b, Tensor::new(val(*b).shape().to_vec(), d)?);
                }
            }
            Op::Scale(a, k) => {
                if needs(*a) {
                    acc(grads, *a, reshaped(&g.map(|x| x * k), val(*a)));
                }
            }
            Op::AddBias(x, b) => {
                if needs(*x) {
                    acc(grads, *x, g.clone());
                }
                if needs(*b) {
                    let m = g.cols();
                    let mut gb = vec![0.0; m];
                    for row in g.data().chunks(m) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    acc(grads, *b, Tensor::new(val(*b).shape().to_vec(), gb)?);
                }
            }
            Op::MatMul(a, w) => {
                let (ta, tw) = (val(*a), val(*w));
                let (n, k, m) = (ta.rows(), ta.cols(), tw.shape()[1]);
                if needs(*a) {
                    let mut ga = vec![0.0; n * k];
                    matmul_bt_acc(g.data(), tw.data(), &mut ga, n, k, m);
                    acc(grads, *a, Tensor::new(ta.shape().to_vec(), ga)?);
                }
                if needs(*w) {
                    let mut gw = vec![0.0; k * m];
                    matmul_at_acc(ta.data(), g.data(), &mut gw, n, k, m);
                    acc(grads, *w, Tensor::new(tw.shape().to_vec(), gw)?);
                }
            }
            Op::Act(x, act) => {
                if needs(*x) {
                    let (tx, ty) = (val(*x), &node.value);
                    let d = g
                        .data()
                        .iter()
                        .zip(tx.data().iter().zip(ty.data()))
                        .map(|(gv, (&xv, &yv))| gv * act.derivative(xv, yv))
                        .collect();
                    acc(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
            }
            Op::Concat(parts) => {
                let n = g.rows();
                let total = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if needs(p) {
                        let mut d = Vec::with_capacity(n * w);
                        for r in 0..n {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + w]);
                        }
                        acc(grads, p, Tensor::new(val(p).shape().to_vec(), d)?);
                    }
                    offset += w;
                }
            }
            Op::Slice(x, start, len) => {
                if needs(*x) {
                    let tx = val(*x);
                    let (n, m) = (tx.rows(), tx.cols());
                    let mut d = vec![0.0; n * m];
                    for r in 0..n {
                        d[r * m + start..r * m + start + len]
                            .copy_from_slice(&g.data()[r * len..(r + 1) * len]);
                    }
                    acc(grads, *x, Tensor::new(tx.shape().to_vec(), d)?);
                }
            }
            Op::Gather(table, idx) => {
                if needs(*table) {
                    let tt = val(*table);
                    let d = tt.cols();
                    let mut out = vec![0.0; tt.len()];
                    for (r, &i) in idx.iter().enumerate() {
                        for (o, v) in out[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                            *o += v;
                        }
                    }
                    acc(grads, *table, Tensor::new(tt.shape().to_vec(), out)?);
                }
            }
            Op::Reshape(x) => {
                if needs(*x) {
                    acc(grads, *x, reshaped(g, val(*x)));
                }
            }
            Op::Transpose(x) => {
                if needs(*x) {
                    let d = transpose_data(g.data(), g.rows(), g.cols());
                    acc(grads, *x, Tensor::new(val(*x).shape().to_vec(), d)?);
                }
            }
            Op::Sum(x) => {
                if needs(*x) {
                    acc(grads, *x, Tensor::full(val(*x).shape().to_vec(), g.data()[0]));
                }
            }
            Op::SumSquares(x) => {
                if needs(*x) {
                    let s = 2.0 * g.data()[0];
                    acc(grads, *x, val(*x).map(|v| s * v));
                }
            }
            Op::Custom(op, inputs) => {
                let ins: Vec<&Tensor> = inputs.iter().map(|&v| val(v)).collect();
                let nd: Vec<bool> = inputs.iter().map(|&v| needs(v)).collect();
                let gs = op.backward(&ins, &node.value, g, &nd)?;
                for ((&v, gi), need) in inputs.iter().zip(gs).zip(nd) {
                    if let (Some(gi), true) = (gi, need) {
                        if gi.len() != val(v).len() {
                            return Err(Error::shape(
                                "custom backward",
                                format!("{} produced {} grads for {} values", op.name(), gi.len(), val(v).len()),
                            ));
                        }
                        acc(grads, v, gi);
                    }
                }
            }
        }
        Ok(())
    }
}

fn transpose_data(d: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; d.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = d[r * cols + c];
        }
    }
    out
}

fn reshaped(g: &Tensor, like: &Tensor) -> Tensor {
    Tensor::new(like.shape().to_vec(), g.data().to_vec()).expect("same length")
}

/// `∂loss/∂params` for a scalar loss built on a graph from `params`.
///
/// Every group is trainable. Returns `(loss value, gradient)`.
pub fn gradient<F>(params: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph, &ParamBinding) -> Result<Var>,
{
    gradient_filtered(params, |_| true, loss_fn)
}

/// Like [`gradient`], restricted to groups for which `trainable` holds;
/// other groups get a zero gradient.
pub fn gradient_filtered<F>(
    params: &ParamVector,
    trainable: impl Fn(&str) -> bool,
    loss_fn: F,
) -> Result<(f64, ParamVector)>
where
    F: FnOnce(&mut Graph, &ParamBinding) -> Result<Var>,
{
    let mut g = Graph::new();
    let binding = g.bind(params, trainable)?;
    let loss = loss_fn(&mut g, &binding)?;
    let value = g.value(loss).data()[0];
    let grads = g.backward(loss)?;
    Ok((value, binding.collect(&grads, params)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::gradcheck::grad_check;

    fn params(values: &[f64]) -> ParamVector {
        let mut p = ParamVector::new();
        p.add_group("x", &[values.len()], values.to_vec()).unwrap();
        p
    }

    #[test]
    fn square_has_derivative_six_at_three() {
        let (v, g) = gradient(&params(&[3.0]), |g, b| {
            let x = b.var("x")?;
            g.sum_squares(x)
        })
        .unwrap();
        assert_eq!(v, 9.0);
        assert_eq!(g.values(), &[6.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let (_, g) = gradient(&params(&[1.0, 2.0]), |g, _| g.constant(Tensor::scalar(4.0))).unwrap();
        assert_eq!(g.values(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_names_the_operation() {
        let err = gradient(&params(&[1e200]), |g, b| {
            let x = b.var("x")?;
            let y = g.mul(x, x)?;
            let z = g.mul(y, y)?;
            g.sum(z)
        })
        .unwrap_err();
        match err {
            Error::NonFinite { op } => assert_eq!(op, "mul"),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        // One composite exercising add/sub/mul/scale/bias/matmul/acts/concat/slice/gather.
        let f = |x: &[f64]| {
            let mut p = ParamVector::new();
            p.add_group("a", &[2, 3], x[..6].to_vec()).unwrap();
            p.add_group("w", &[3, 2], x[6..12].to_vec()).unwrap();
            p.add_group("b", &[2], x[12..14].to_vec()).unwrap();
            gradient(&p, |g, bd| {
                let a = bd.var("a")?;
                let w = bd.var("w")?;
                let b = bd.var("b")?;
                let h = g.matmul(a, w)?;
                let h = g.add_bias(h, b)?;
                let s = g.activation(h, Activation::Silu)?;
                let t = g.activation(h, Activation::Tanh)?;
                let sp = g.activation(h, Activation::Softplus)?;
                let sg = g.activation(h, Activation::Sigmoid)?;
                let m = g.mul(s, t)?;
                let d = g.sub(sp, sg)?;
                let c = g.concat(&[m, d])?;
                let sl = g.slice(c, 1, 2)?;
                let ga = g.gather(sl, vec![1, 0, 1])?;
                let ga = g.transpose(ga)?;
                let ga = g.reshape(ga, &[3, 2])?;
                let ga = g.mul(ga, ga)?;
                let q = g.sum_squares(ga)?;
                let r = g.sum(c)?;
                let r = g.scale(r, 0.3)?;
                g.add(q, r)
            })
            .map(|(v, gr)| (v, gr.values().to_vec()))
            .unwrap()
        };
        let x: Vec<f64> = (0..14).map(|i| ((i * 7 % 11) as f64 - 5.0) / 7.0).collect();
        let err = grad_check(f, &x, 1e-4);
        assert!(err < 1e-6, "max rel err {err}");
    }
}
