//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value. Nodes are stored
//! in creation order, which is a valid topological order, so the backward
//! sweep simply walks the tape in reverse.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Tanh(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MeanAxis(Var, usize),
    VarianceAxis(Var, usize),
    L1(Var),
    Broadcast(Var),
    SelectRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation trace plus forward values.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that requires one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros shaped like `like` if nothing flowed there.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn check_axis(op: &'static str, t: &Tensor, axis: usize) -> Result<(usize, usize)> {
    let (r, c) = t.require_matrix(op)?;
    if axis > 1 {
        return Err(Error::invalid(format!("{op}: axis {axis} out of range")));
    }
    Ok((r, c))
}

fn reduce_axis(t: &Tensor, axis: usize, f: impl Fn(&[f64]) -> f64) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    if axis == 1 {
        Tensor::from_fn(r, 1, |i, _| f(t.row_slice(i)))
    } else {
        let mut col = vec![0.0; r];
        Tensor::from_fn(1, c, |_, j| {
            for (i, x) in col.iter_mut().enumerate() {
                *x = t.get(i, j);
            }
            f(&col)
        })
    }
}

fn population_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Numerically stable softmax of one row.
pub(crate) fn softmax_row(xs: &[f64], out: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &x) in out.iter_mut().zip(xs) {
        *o = (x - max).exp();
        z += *o;
    }
    for o in out.iter_mut() {
        *o /= z;
    }
}

/// Sums `g` over the axes along which `from` was broadcast.
fn unbroadcast(g: &Tensor, from: &[usize]) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let (fr, fc) = (from[0], from[1]);
    let mut out = Tensor::zeros(from);
    let od = out.data_mut();
    for i in 0..r {
        for j in 0..c {
            let ti = if fr == 1 { 0 } else { i };
            let tj = if fc == 1 { 0 } else { j };
            od[ti * fc + tj] += g.get(i, j);
        }
    }
    out
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let t = self.value(v);
        t.item().ok_or_else(|| Error::ShapeMismatch {
            op: "scalar",
            left: t.shape().to_vec(),
            right: vec![1, 1],
        })
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn parents(op: &Op) -> (Option<Var>, Option<Var>) {
        use Op::*;
        match *op {
            Leaf => (None, None),
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => (Some(a), Some(b)),
            Transpose(a) | Scale(a, _) | AddScalar(a, _) | Exp(a) | Log(a) | Sqrt(a)
            | Sigmoid(a) | Tanh(a) | ClampMin(a, _) | Softmax(a) | Sum(a) | Mean(a)
            | SumAxis(a, _) | MeanAxis(a, _) | VarianceAxis(a, _) | L1(a) | Broadcast(a) => {
                (Some(a), None)
            }
            SelectRows(a, _) => (Some(a), None),
        }
    }

    /// Computes the forward value of `op` from the values already on the tape.
    fn forward(&self, op: &Op, out_shape: Option<&[usize]>) -> Result<Tensor> {
        use Op::*;
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match op {
            Leaf => unreachable!("leaves carry their own value"),
            Add(a, b) => {
                same_shape("add", val(*a), val(*b))?;
                val(*a).zip_map(val(*b), |x, y| x + y)
            }
            Sub(a, b) => {
                same_shape("sub", val(*a), val(*b))?;
                val(*a).zip_map(val(*b), |x, y| x - y)
            }
            Mul(a, b) => {
                same_shape("mul", val(*a), val(*b))?;
                val(*a).zip_map(val(*b), |x, y| x * y)
            }
            Div(a, b) => {
                same_shape("div", val(*a), val(*b))?;
                if val(*b).data().contains(&0.0) {
                    return Err(Error::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    });
                }
                val(*a).zip_map(val(*b), |x, y| x / y)
            }
            MatMul(a, b) => val(*a).matmul(val(*b))?,
            Transpose(a) => {
                val(*a).require_matrix("transpose")?;
                val(*a).transpose()
            }
            Scale(a, c) => val(*a).map(|x| x * c),
            AddScalar(a, c) => val(*a).map(|x| x + c),
            Exp(a) => val(*a).map(f64::exp),
            Log(a) => {
                if let Some(&bad) = val(*a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("argument {bad} is not positive"),
                    });
                }
                val(*a).map(f64::ln)
            }
            Sqrt(a) => {
                if let Some(&bad) = val(*a).data().iter().find(|&&x| x <= 0.0 || x.is_nan()) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("argument {bad} is not positive"),
                    });
                }
                val(*a).map(f64::sqrt)
            }
            Sigmoid(a) => val(*a).map(sigmoid),
            Tanh(a) => val(*a).map(f64::tanh),
            ClampMin(a, c) => val(*a).map(|x| x.max(*c)),
            Softmax(a) => {
                let x = val(*a);
                let (r, c) = x.require_matrix("softmax")?;
                let mut out = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    softmax_row(x.row_slice(i), &mut out.data_mut()[i * c..(i + 1) * c]);
                }
                out
            }
            Sum(a) => Tensor::scalar(val(*a).sum()),
            Mean(a) => Tensor::scalar(val(*a).sum() / val(*a).len() as f64),
            SumAxis(a, axis) => {
                check_axis("sum_axis", val(*a), *axis)?;
                reduce_axis(val(*a), *axis, |xs| xs.iter().sum())
            }
            MeanAxis(a, axis) => {
                check_axis("mean_axis", val(*a), *axis)?;
                reduce_axis(val(*a), *axis, |xs| xs.iter().sum::<f64>() / xs.len() as f64)
            }
            VarianceAxis(a, axis) => {
                check_axis("variance_axis", val(*a), *axis)?;
                reduce_axis(val(*a), *axis, population_variance)
            }
            L1(a) => Tensor::scalar(val(*a).data().iter().map(|x| x.abs()).sum()),
            Broadcast(a) => {
                let x = val(*a);
                let (r, c) = x.require_matrix("broadcast")?;
                let target = out_shape.expect("broadcast target shape");
                let ok = target.len() == 2
                    && (r == target[0] || r == 1)
                    && (c == target[1] || c == 1);
                if !ok {
                    return Err(Error::ShapeMismatch {
                        op: "broadcast",
                        left: x.shape().to_vec(),
                        right: target.to_vec(),
                    });
                }
                Tensor::from_fn(target[0], target[1], |i, j| {
                    x.get(if r == 1 { 0 } else { i }, if c == 1 { 0 } else { j })
                })
            }
            SelectRows(a, idx) => {
                let x = val(*a);
                let (r, c) = x.require_matrix("select_rows")?;
                if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                    return Err(Error::invalid(format!(
                        "select_rows: row {bad} out of range for {r} rows"
                    )));
                }
                if idx.is_empty() {
                    return Err(Error::invalid("select_rows: empty index list"));
                }
                let mut data = Vec::with_capacity(idx.len() * c);
                for &i in idx {
                    data.extend_from_slice(x.row_slice(i));
                }
                Tensor::matrix(idx.len(), c, data)?
            }
        })
    }

    fn push(&mut self, op: Op, out_shape: Option<&[usize]>) -> Result<Var> {
        let value = self.forward(&op, out_shape)?;
        let (a, b) = Self::parents(&op);
        let requires_grad = a.is_some_and(|v| self.nodes[v.0].requires_grad)
            || b.is_some_and(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Add(a, b), None)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Sub(a, b), None)
    }
    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Mul(a, b), None)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::Div(a, b), None)
    }
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.push(Op::MatMul(a, b), None)
    }
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Transpose(a), None)
    }
    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::Scale(a, c), None)
    }
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::AddScalar(a, c), None)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Exp(a), None)
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Log(a), None)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sqrt(a), None)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sigmoid(a), None)
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Tanh(a), None)
    }
    /// Elementwise `max(a, c)`.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Result<Var> {
        self.push(Op::ClampMin(a, c), None)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.clamp_min(a, 0.0)
    }
    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Softmax(a), None)
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Sum(a), None)
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.push(Op::Mean(a), None)
    }
    /// Sum over `axis` (0 collapses rows to `[1, c]`, 1 collapses columns to `[r, 1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::SumAxis(a, axis), None)
    }
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::MeanAxis(a, axis), None)
    }
    /// Population variance over `axis`.
    pub fn variance_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.push(Op::VarianceAxis(a, axis), None)
    }
    pub fn l1_norm(&mut self, a: Var) -> Result<Var> {
        self.push(Op::L1(a), None)
    }
    /// Broadcasts a `[1, c]`, `[r, 1]` or `[1, 1]` tensor to `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.push(Op::Broadcast(a), Some(shape))
    }
    /// Gathers rows by index; repeated indices are allowed.
    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Result<Var> {
        self.push(Op::SelectRows(a, rows), None)
    }

    /// `x + b` with `b` broadcast to the shape of `x`.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.value(x).shape().to_vec();
        if self.value(b).shape() == shape.as_slice() {
            return self.add(x, b);
        }
        let bb = self.broadcast_to(b, &shape)?;
        self.add(x, bb)
    }

    /// Recomputes every non-leaf node after replacing the given leaf values.
    pub fn replay(&mut self, leaves: &[(Var, Tensor)]) -> Result<()> {
        for (v, t) in leaves {
            let node = &mut self.nodes[v.0];
            if !matches!(node.op, Op::Leaf) {
                return Err(Error::invalid(format!("node {} is not a leaf", v.0)));
            }
            if node.value.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "replay",
                    left: node.value.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            node.value = t.clone();
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = self.nodes[i].op.clone();
            let shape = self.nodes[i].value.shape().to_vec();
            let value = self.forward(&op, Some(&shape))?;
            self.nodes[i].value = value;
        }
        Ok(())
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let root = &self.nodes[out.0];
        if root.value.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "backward",
                left: root.value.shape().to_vec(),
                right: vec![1, 1],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Tensor::full(root.value.shape(), 1.0));

        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        // Only keep gradients for nodes that actually require them.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        use Op::*;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut accum = |v: Var, d: Tensor| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&d),
                slot @ None => *slot = Some(d),
            }
        };
        let y = &node.value;
        match &node.op {
            Leaf => {}
            Add(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.clone());
            }
            Sub(a, b) => {
                accum(*a, g.clone());
                accum(*b, g.map(|x| -x));
            }
            Mul(a, b) => {
                accum(*a, g.zip_map(val(*b), |g, y| g * y));
                accum(*b, g.zip_map(val(*a), |g, x| g * x));
            }
            Div(a, b) => {
                let (x, d) = (val(*a), val(*b));
                accum(*a, g.zip_map(d, |g, d| g / d));
                let t = x.zip_map(d, |x, d| -x / (d * d));
                accum(*b, g.zip_map(&t, |g, t| g * t));
            }
            MatMul(a, b) => {
                accum(*a, g.matmul_raw(&val(*b).transpose()));
                accum(*b, val(*a).transpose().matmul_raw(g));
            }
            Transpose(a) => accum(*a, g.transpose()),
            Scale(a, c) => accum(*a, g.map(|x| x * c)),
            AddScalar(a, _) => accum(*a, g.clone()),
            Exp(a) => accum(*a, g.zip_map(y, |g, y| g * y)),
            Log(a) => accum(*a, g.zip_map(val(*a), |g, x| g / x)),
            Sqrt(a) => accum(*a, g.zip_map(y, |g, y| g / (2.0 * y))),
            Sigmoid(a) => accum(*a, g.zip_map(y, |g, y| g * y * (1.0 - y))),
            Tanh(a) => accum(*a, g.zip_map(y, |g, y| g * (1.0 - y * y))),
            ClampMin(a, c) => {
                let c = *c;
                accum(*a, g.zip_map(val(*a), |g, x| if x > c { g } else { 0.0 }))
            }
            Softmax(a) => {
                let (r, c) = (y.rows(), y.cols());
                let mut d = Tensor::zeros(&[r, c]);
                for i in 0..r {
                    let yr = y.row_slice(i);
                    let gr = g.row_slice(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        d.data_mut()[i * c + j] = yr[j] * (gr[j] - dot);
                    }
                }
                accum(*a, d)
            }
            Sum(a) => {
                let s = g.data()[0];
                accum(*a, Tensor::full(val(*a).shape(), s))
            }
            Mean(a) => {
                let x = val(*a);
                let s = g.data()[0] / x.len() as f64;
                accum(*a, Tensor::full(x.shape(), s))
            }
            SumAxis(a, axis) | MeanAxis(a, axis) => {
                let x = val(*a);
                let n = if *axis == 0 { x.rows() } else { x.cols() } as f64;
                let scale = if matches!(node.op, MeanAxis(..)) { 1.0 / n } else { 1.0 };
                let d = Tensor::from_fn(x.rows(), x.cols(), |i, j| {
                    let gi = if *axis == 0 { g.get(0, j) } else { g.get(i, 0) };
                    gi * scale
                });
                accum(*a, d)
            }
            VarianceAxis(a, axis) => {
                let x = val(*a);
                let (r, c) = (x.rows(), x.cols());
                let means = if *axis == 1 {
                    reduce_axis(x, 1, |xs| xs.iter().sum::<f64>() / xs.len() as f64)
                } else {
                    reduce_axis(x, 0, |xs| xs.iter().sum::<f64>() / xs.len() as f64)
                };
                let n = if *axis == 0 { r } else { c } as f64;
                let d = Tensor::from_fn(r, c, |i, j| {
                    let (m, gi) = if *axis == 0 {
                        (means.get(0, j), g.get(0, j))
                    } else {
                        (means.get(i, 0), g.get(i, 0))
                    };
                    gi * 2.0 * (x.get(i, j) - m) / n
                });
                accum(*a, d)
            }
            L1(a) => {
                let s = g.data()[0];
                accum(
                    *a,
                    val(*a).map(|x| {
                        if x > 0.0 {
                            s
                        } else if x < 0.0 {
                            -s
                        } else {
                            0.0
                        }
                    }),
                )
            }
            Broadcast(a) => accum(*a, unbroadcast(g, val(*a).shape())),
            SelectRows(a, idx) => {
                let x = val(*a);
                let c = x.cols();
                let mut d = Tensor::zeros(x.shape());
                for (k, &i) in idx.iter().enumerate() {
                    let src = g.row_slice(k);
                    for (o, s) in d.data_mut()[i * c..(i + 1) * c].iter_mut().zip(src) {
                        *o += s;
                    }
                }
                accum(*a, d)
            }
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
