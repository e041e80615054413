//! Append-only computation graph with reverse-mode differentiation.
//!
//! Nodes are appended in topological order and shape-checked on
//! construction. Leaves are either named inputs, named parameters (gradient
//! targets) or constants. [`Graph::forward`] evaluates every node from a set
//! of [`Bindings`]; [`Graph::backward`] then propagates from a scalar node.

use std::collections::{BTreeMap, HashMap};

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Relu,
    /// Heaviside step `x > 0`; the derivative of ReLU. Carries no gradient.
    Step,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Square,
    Abs,
    Cos,
    Acos,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Input(String),
    Param(String),
    Const(Tensor<T>),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Binary(BinaryOp, NodeId, NodeId),
    Unary(UnaryOp, NodeId),
    Scale(T, NodeId),
    Offset(T, NodeId),
    Clamp(T, T, NodeId),
    SumAll(NodeId),
    MeanAll(NodeId),
    /// Sum across columns, one value per row: `[r, c] -> [r, 1]`.
    SumRows(NodeId),
    /// Sum across rows, one value per column: `[r, c] -> [1, c]`.
    SumCols(NodeId),
    ConcatCols(NodeId, NodeId),
    ConcatRows(NodeId, NodeId),
    SliceRows(NodeId, usize, usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Input(_) => "input",
            Op::Param(_) => "param",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Binary(..) => "binary",
            Op::Unary(..) => "unary",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Clamp(..) => "clamp",
            Op::SumAll(_) => "sum",
            Op::MeanAll(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::SumCols(_) => "sum_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::SliceRows(..) => "slice_rows",
        }
    }
}

#[derive(Debug, Clone)]
struct Node<T> {
    op: Op<T>,
    shape: (usize, usize),
}

/// Named tensors bound to graph leaves for one evaluation.
#[derive(Debug, Default)]
pub struct Bindings<'a, T> {
    map: HashMap<&'a str, &'a Tensor<T>>,
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Self { map: HashMap::new() }
    }

    pub fn bind(&mut self, name: &'a str, value: &'a Tensor<T>) -> &mut Self {
        self.map.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.map.get(name).copied()
    }
}

/// Gradients keyed by parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.map.insert(name.into(), grad);
    }

    /// Adds `grad` to the entry for `name`, creating it if absent.
    pub fn add(&mut self, name: &str, grad: Tensor<T>) {
        match self.map.get_mut(name) {
            Some(acc) => acc.add_assign(&grad),
            None => {
                self.map.insert(name.to_string(), grad);
            }
        }
    }

    /// Adds `other` into `self`, inserting names not yet present.
    pub fn accumulate(&mut self, other: &Gradients<T>) {
        for (k, v) in &other.map {
            match self.map.get_mut(k) {
                Some(acc) => acc.add_assign(v),
                None => {
                    self.map.insert(k.clone(), v.clone());
                }
            }
        }
    }

    /// Largest absolute entry across all gradients.
    pub fn max_abs(&self) -> T {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .fold(T::zero(), |acc, v| acc.max(v.abs()))
    }
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    values: Vec<Tensor<T>>,
}

fn broadcast_dim(a: usize, b: usize) -> Option<usize> {
    if a == b || b == 1 {
        Some(a)
    } else if a == 1 {
        Some(b)
    } else {
        None
    }
}

/// Reads element `(i, j)` of a tensor broadcast to a larger shape.
#[inline]
fn bget<T: Scalar>(t: &Tensor<T>, i: usize, j: usize) -> T {
    let (r, c) = t.dims();
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    t.data()[ii * c + jj]
}

fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, shape: (usize, usize), f: impl Fn(T, T) -> T) -> Tensor<T> {
    if a.dims() == shape && b.dims() == shape {
        return a.zip_map(b, f);
    }
    let (r, c) = shape;
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(bget(a, i, j), bget(b, i, j)));
        }
    }
    Tensor::from_vec(r, c, out)
}

/// Sums a full-shape gradient down to a broadcast operand's shape.
fn reduce_to<T: Scalar>(g: Tensor<T>, shape: (usize, usize)) -> Tensor<T> {
    if g.dims() == shape {
        return g;
    }
    let (r, c) = g.dims();
    let mut out = Tensor::zeros(shape.0, shape.1);
    for i in 0..r {
        for j in 0..c {
            let ii = if shape.0 == 1 { 0 } else { i };
            let jj = if shape.1 == 1 { 0 } else { j };
            let cur = out.get(ii, jj);
            out.set(ii, jj, cur + g.get(i, j));
        }
    }
    out
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn unary_forward<T: Scalar>(op: UnaryOp, x: T) -> T {
    match op {
        UnaryOp::Neg => -x,
        UnaryOp::Relu => x.max(T::zero()),
        UnaryOp::Step => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        UnaryOp::Tanh => x.tanh(),
        UnaryOp::Sigmoid => sigmoid(x),
        UnaryOp::Exp => x.exp(),
        UnaryOp::Log => x.ln(),
        UnaryOp::Softplus => softplus(x),
        UnaryOp::Sqrt => x.sqrt(),
        UnaryOp::Square => x * x,
        UnaryOp::Abs => x.abs(),
        UnaryOp::Cos => x.cos(),
        UnaryOp::Acos => x.acos(),
    }
}

/// Local derivative `dy/dx` given input `x` and output `y`.
fn unary_derivative<T: Scalar>(op: UnaryOp, x: T, y: T) -> T {
    let one = T::one();
    let zero = T::zero();
    match op {
        UnaryOp::Neg => -one,
        UnaryOp::Relu => {
            if x > zero {
                one
            } else {
                zero
            }
        }
        UnaryOp::Step => zero,
        UnaryOp::Tanh => one - y * y,
        UnaryOp::Sigmoid => y * (one - y),
        UnaryOp::Exp => y,
        UnaryOp::Log => one / x,
        UnaryOp::Softplus => sigmoid(x),
        UnaryOp::Sqrt => {
            if y > zero {
                T::lit(0.5) / y
            } else {
                zero
            }
        }
        UnaryOp::Square => T::lit(2.0) * x,
        UnaryOp::Abs => {
            if x > zero {
                one
            } else if x < zero {
                -one
            } else {
                zero
            }
        }
        UnaryOp::Cos => -x.sin(),
        UnaryOp::Acos => -one / (one - x * x).max(T::lit(1e-12)).sqrt(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            values: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, id: NodeId) -> (usize, usize) {
        self.nodes[id.0].shape
    }

    fn push(&mut self, op: Op<T>, shape: (usize, usize)) -> NodeId {
        // Any previous evaluation is stale once the graph grows.
        self.values.clear();
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn err(&self, op: &str, message: String) -> Error {
        shape_err(format!("node {} ({op})", self.nodes.len()), message)
    }

    fn check(&self, id: NodeId) -> Result<()> {
        if id.0 >= self.nodes.len() {
            return Err(self.err("ref", format!("dangling node reference {}", id.0)));
        }
        Ok(())
    }

    pub fn input(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Input(name.into()), (rows, cols))
    }

    pub fn param(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> NodeId {
        self.push(Op::Param(name.into()), (rows, cols))
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        let shape = value.dims();
        self.push(Op::Const(value), shape)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(self.err("matmul", format!("[{m},{k}] x [{k2},{n}]")));
        }
        Ok(self.push(Op::MatMul(a, b), (m, n)))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        Ok(self.push(Op::Transpose(a), (c, r)))
    }

    pub fn binary(&mut self, op: BinaryOp, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        match (broadcast_dim(ra, rb), broadcast_dim(ca, cb)) {
            (Some(r), Some(c)) => Ok(self.push(Op::Binary(op, a, b), (r, c))),
            _ => Err(self.err(
                "binary",
                format!("{op:?} cannot broadcast [{ra},{ca}] with [{rb},{cb}]"),
            )),
        }
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        Ok(self.push(Op::Unary(op, a), s))
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Relu, a)
    }

    pub fn tanh(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Tanh, a)
    }

    pub fn softplus(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Softplus, a)
    }

    pub fn sqrt(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Sqrt, a)
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn neg(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Neg, a)
    }

    pub fn abs(&mut self, a: NodeId) -> Result<NodeId> {
        self.unary(UnaryOp::Abs, a)
    }

    pub fn scale(&mut self, k: T, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        Ok(self.push(Op::Scale(k, a), s))
    }

    pub fn offset(&mut self, k: T, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let s = self.shape(a);
        Ok(self.push(Op::Offset(k, a), s))
    }

    pub fn clamp(&mut self, lo: T, hi: T, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        if lo > hi {
            return Err(self.err("clamp", format!("empty range [{lo}, {hi}]")));
        }
        let s = self.shape(a);
        Ok(self.push(Op::Clamp(lo, hi, a), s))
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::SumAll(a), (1, 1)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        Ok(self.push(Op::MeanAll(a), (1, 1)))
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (r, _) = self.shape(a);
        Ok(self.push(Op::SumRows(a), (r, 1)))
    }

    pub fn sum_cols(&mut self, a: NodeId) -> Result<NodeId> {
        self.check(a)?;
        let (_, c) = self.shape(a);
        Ok(self.push(Op::SumCols(a), (1, c)))
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ra != rb {
            return Err(self.err("concat_cols", format!("{ra} vs {rb} rows")));
        }
        Ok(self.push(Op::ConcatCols(a, b), (ra, ca + cb)))
    }

    pub fn concat_rows(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check(a)?;
        self.check(b)?;
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if ca != cb {
            return Err(self.err("concat_rows", format!("{ca} vs {cb} columns")));
        }
        Ok(self.push(Op::ConcatRows(a, b), (ra + rb, ca)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        self.check(a)?;
        let (r, c) = self.shape(a);
        if start >= end || end > r {
            return Err(self.err("slice_rows", format!("range {start}..{end} of {r} rows")));
        }
        Ok(self.push(Op::SliceRows(a, start, end), (end - start, c)))
    }

    /// Per-row L2 norm `[r, c] -> [r, 1]`, `sqrt(Σ x² )`.
    pub fn row_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sum_rows(sq)?;
        self.sqrt(s)
    }

    /// Per-column L2 norm `[r, c] -> [1, c]`.
    pub fn col_l2_norm(&mut self, a: NodeId) -> Result<NodeId> {
        let sq = self.square(a)?;
        let s = self.sum_cols(sq)?;
        self.sqrt(s)
    }

    /// Evaluates every node. Leaves take their values from `bindings`.
    pub fn forward(&mut self, bindings: &Bindings<'_, T>) -> Result<()> {
        let mut values: Vec<Tensor<T>> = Vec::with_capacity(self.nodes.len());
        for (idx, node) in self.nodes.iter().enumerate() {
            let v = match &node.op {
                Op::Input(name) | Op::Param(name) => {
                    let t = bindings.get(name).ok_or_else(|| Error::Unbound(name.clone()))?;
                    if t.dims() != node.shape || t.shape().len() != 2 {
                        return Err(shape_err(
                            format!("node {idx} ({} `{name}`)", node.op.name()),
                            format!("bound {:?}, declared {:?}", t.shape(), node.shape),
                        ));
                    }
                    (*t).clone()
                }
                Op::Const(t) => t.clone(),
                Op::MatMul(a, b) => values[a.0].matmul(&values[b.0])?,
                Op::Transpose(a) => values[a.0].transpose(),
                Op::Binary(op, a, b) => {
                    let (x, y) = (&values[a.0], &values[b.0]);
                    match op {
                        BinaryOp::Add => broadcast_zip(x, y, node.shape, |p, q| p + q),
                        BinaryOp::Sub => broadcast_zip(x, y, node.shape, |p, q| p - q),
                        BinaryOp::Mul => broadcast_zip(x, y, node.shape, |p, q| p * q),
                        BinaryOp::Div => broadcast_zip(x, y, node.shape, |p, q| p / q),
                    }
                }
                Op::Unary(op, a) => values[a.0].map(|x| unary_forward(*op, x)),
                Op::Scale(k, a) => values[a.0].scale(*k),
                Op::Offset(k, a) => values[a.0].map(|x| x + *k),
                Op::Clamp(lo, hi, a) => values[a.0].map(|x| x.max(*lo).min(*hi)),
                Op::SumAll(a) => Tensor::scalar(values[a.0].sum()),
                Op::MeanAll(a) => Tensor::scalar(values[a.0].mean()),
                Op::SumRows(a) => {
                    let x = &values[a.0];
                    let data = (0..x.rows())
                        .map(|i| x.row(i).iter().fold(T::zero(), |s, &v| s + v))
                        .collect();
                    Tensor::from_vec(x.rows(), 1, data)
                }
                Op::SumCols(a) => {
                    let x = &values[a.0];
                    let (r, c) = x.dims();
                    let mut out = vec![T::zero(); c];
                    for i in 0..r {
                        for (o, &v) in out.iter_mut().zip(x.row(i)) {
                            *o = *o + v;
                        }
                    }
                    Tensor::from_vec(1, c, out)
                }
                Op::ConcatCols(a, b) => Tensor::concat_cols(&values[a.0], &values[b.0])?,
                Op::ConcatRows(a, b) => Tensor::concat_rows(&[&values[a.0], &values[b.0]])?,
                Op::SliceRows(a, s, e) => values[a.0].slice_rows(*s, *e),
            };
            values.push(v);
        }
        self.values = values;
        Ok(())
    }

    /// Convenience: bind, evaluate, and return copies of `outputs`.
    pub fn evaluate(&mut self, bindings: &Bindings<'_, T>, outputs: &[NodeId]) -> Result<Vec<Tensor<T>>> {
        self.forward(bindings)?;
        outputs.iter().map(|&id| self.value(id).cloned()).collect()
    }

    /// Value of `id` from the most recent [`Graph::forward`].
    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>> {
        self.values
            .get(id.0)
            .ok_or_else(|| Error::InvalidArgument(format!("node {} has not been evaluated", id.0)))
    }

    pub fn scalar_value(&self, id: NodeId) -> Result<T> {
        Ok(self.value(id)?.item())
    }

    /// Gradients of scalar node `output` with respect to every parameter leaf.
    pub fn backward(&self, output: NodeId) -> Result<Gradients<T>> {
        self.backward_filtered(output, |_| true)
    }

    /// Gradients with respect to the parameter leaves whose names pass
    /// `include`. Parameters not reachable from `output` get zero gradients.
    pub fn backward_filtered(&self, output: NodeId, include: impl Fn(&str) -> bool) -> Result<Gradients<T>> {
        let out = output.0;
        if self.values.len() != self.nodes.len() {
            return Err(Error::InvalidArgument("backward before forward".into()));
        }
        let shape = self.nodes[out].shape;
        if shape != (1, 1) {
            return Err(Error::NonScalarSeed {
                node: out,
                shape: vec![shape.0, shape.1],
            });
        }

        // Which nodes lie on a path from an included parameter.
        let mut live = vec![false; out + 1];
        for i in 0..=out {
            live[i] = match &self.nodes[i].op {
                Op::Param(name) => include(name),
                Op::Input(_) | Op::Const(_) => false,
                Op::MatMul(a, b) | Op::Binary(_, a, b) | Op::ConcatCols(a, b) | Op::ConcatRows(a, b) => {
                    live[a.0] || live[b.0]
                }
                Op::Unary(UnaryOp::Step, _) => false,
                Op::Transpose(a)
                | Op::Unary(_, a)
                | Op::Scale(_, a)
                | Op::Offset(_, a)
                | Op::Clamp(_, _, a)
                | Op::SumAll(a)
                | Op::MeanAll(a)
                | Op::SumRows(a)
                | Op::SumCols(a)
                | Op::SliceRows(a, _, _) => live[a.0],
            };
        }

        let mut grads: Vec<Option<Tensor<T>>> = vec![None; out + 1];
        grads[out] = Some(Tensor::scalar(T::one()));
        let mut result = Gradients::default();

        for i in (0..=out).rev() {
            if !live[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            let send = |grads: &mut Vec<Option<Tensor<T>>>, to: NodeId, contrib: Tensor<T>| {
                if !live[to.0] {
                    return;
                }
                match &mut grads[to.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Param(name) => result.add(name, g),
                Op::Input(_) | Op::Const(_) => {}
                Op::MatMul(a, b) => {
                    if live[a.0] {
                        send(&mut grads, *a, g.matmul_nt(&self.values[b.0])?);
                    }
                    if live[b.0] {
                        send(&mut grads, *b, self.values[a.0].matmul_tn(&g)?);
                    }
                }
                Op::Transpose(a) => send(&mut grads, *a, g.transpose()),
                Op::Binary(op, a, b) => {
                    let (x, y) = (&self.values[a.0], &self.values[b.0]);
                    let full = node.shape;
                    if live[a.0] {
                        let ga = match op {
                            BinaryOp::Add | BinaryOp::Sub => g.clone(),
                            BinaryOp::Mul => broadcast_zip(&g, y, full, |gv, yv| gv * yv),
                            BinaryOp::Div => broadcast_zip(&g, y, full, |gv, yv| gv / yv),
                        };
                        send(&mut grads, *a, reduce_to(ga, x.dims()));
                    }
                    if live[b.0] {
                        let gb = match op {
                            BinaryOp::Add => g.clone(),
                            BinaryOp::Sub => g.map(|v| -v),
                            BinaryOp::Mul => broadcast_zip(&g, x, full, |gv, xv| gv * xv),
                            BinaryOp::Div => {
                                let gx = broadcast_zip(&g, x, full, |gv, xv| gv * xv);
                                broadcast_zip(&gx, y, full, |v, yv| -v / (yv * yv))
                            }
                        };
                        send(&mut grads, *b, reduce_to(gb, y.dims()));
                    }
                }
                Op::Unary(op, a) => {
                    let x = &self.values[a.0];
                    let y = &self.values[i];
                    let data = g
                        .data()
                        .iter()
                        .zip(x.data().iter().zip(y.data()))
                        .map(|(&gv, (&xv, &yv))| gv * unary_derivative(*op, xv, yv))
                        .collect();
                    send(&mut grads, *a, Tensor::from_vec(x.rows(), x.cols(), data));
                }
                Op::Scale(k, a) => send(&mut grads, *a, g.scale(*k)),
                Op::Offset(_, a) => send(&mut grads, *a, g),
                Op::Clamp(lo, hi, a) => {
                    let x = &self.values[a.0];
                    let ga = g.zip_map(x, |gv, xv| if xv >= *lo && xv <= *hi { gv } else { T::zero() });
                    send(&mut grads, *a, ga);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.nodes[a.0].shape;
                    send(&mut grads, *a, Tensor::full(r, c, g.item()));
                }
                Op::MeanAll(a) => {
                    let (r, c) = self.nodes[a.0].shape;
                    let n = T::from_usize(r * c).unwrap();
                    send(&mut grads, *a, Tensor::full(r, c, g.item() / n));
                }
                Op::SumRows(a) => {
                    let (r, c) = self.nodes[a.0].shape;
                    let mut ga = Vec::with_capacity(r * c);
                    for row in 0..r {
                        ga.extend(std::iter::repeat_n(g.data()[row], c));
                    }
                    send(&mut grads, *a, Tensor::from_vec(r, c, ga));
                }
                Op::SumCols(a) => {
                    let (r, c) = self.nodes[a.0].shape;
                    let mut ga = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        ga.extend_from_slice(g.data());
                    }
                    send(&mut grads, *a, Tensor::from_vec(r, c, ga));
                }
                Op::ConcatCols(a, b) => {
                    let ca = self.nodes[a.0].shape.1;
                    let (r, c) = g.dims();
                    let mut ga = Vec::with_capacity(r * ca);
                    let mut gb = Vec::with_capacity(r * (c - ca));
                    for row in 0..r {
                        let gr = g.row(row);
                        ga.extend_from_slice(&gr[..ca]);
                        gb.extend_from_slice(&gr[ca..]);
                    }
                    send(&mut grads, *a, Tensor::from_vec(r, ca, ga));
                    send(&mut grads, *b, Tensor::from_vec(r, c - ca, gb));
                }
                Op::ConcatRows(a, b) => {
                    let ra = self.nodes[a.0].shape.0;
                    let r = g.rows();
                    send(&mut grads, *a, g.slice_rows(0, ra));
                    send(&mut grads, *b, g.slice_rows(ra, r));
                }
                Op::SliceRows(a, s, e) => {
                    let (r, c) = self.nodes[a.0].shape;
                    let mut ga = Tensor::zeros(r, c);
                    ga.data_mut()[s * c..e * c].copy_from_slice(g.data());
                    debug_assert_eq!(g.rows(), e - s);
                    send(&mut grads, *a, ga);
                }
            }
        }

        // Included parameters that the output does not depend on.
        for node in &self.nodes {
            if let Op::Param(name) = &node.op {
                if include(name) && result.get(name).is_none() {
                    result.insert(name.clone(), Tensor::zeros(node.shape.0, node.shape.1));
                }
            }
        }
        Ok(result)
    }

    /// Names of all parameter leaves, in append order.
    pub fn param_names(&self) -> Vec<&str> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.op {
                Op::Param(name) => Some(name.as_str()),
                _ => None,
            })
            .collect()
    }
}
