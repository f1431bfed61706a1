//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is rebuilt for every training step. Each operation appends a
//! node holding its forward value, so nodes are in topological order by
//! construction and [`Tape::gradients`] is a single reverse sweep.

use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnaryOp {
    Exp,
    Log,
    Square,
    Negate,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Softplus,
    Sigmoid,
    Tanh,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Softplus => "softplus",
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "softplus" => Some(Activation::Softplus),
            "sigmoid" => Some(Activation::Sigmoid),
            "tanh" => Some(Activation::Tanh),
            _ => None,
        }
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Binary(BinaryOp, Var, Var),
    AddRow(Var, Var),
    MulScalar(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    Unary(UnaryOp, Var),
    Activation(Activation, Var),
    Reduce(Reduce, Var),
    ReduceAxis(Reduce, Var, usize),
    GatherRows(Var, Vec<usize>),
    PickCols(Var, Vec<usize>),
    LogSoftmax(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Forward record of one differentiable computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    /// A tape that rejects NaN/Inf after every forward op.
    pub fn new() -> Self {
        Tape::with_checks(true)
    }

    pub fn with_checks(check_finite: bool) -> Self {
        Tape {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite,
        }
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

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input; gradients are still computed for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// Trainable parameter from `store`; repeated requests share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.value(name)?.clone();
        self.nodes.push(Node { value, op: Op::Param });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push("matmul", value, Op::MatMul(a, b))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let value = match op {
            BinaryOp::Add => x.add(y)?,
            BinaryOp::Sub => x.sub(y)?,
            BinaryOp::Mul => x.mul(y)?,
        };
        self.push("binary", value, Op::Binary(op, a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    /// `a[i, :] + bias` for every row `i`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let value = self.value(a).add_row(self.value(bias))?;
        self.push("add_row", value, Op::AddRow(a, bias))
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let c = self.value(s).item()?;
        let value = self.value(a).scale(c);
        self.push("mul_scalar", value, Op::MulScalar(a, s))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).scale(c);
        self.push("scale", value, Op::Scale(a, c))
    }

    pub fn add_const(&mut self, a: Var, c: f64) -> Result<Var> {
        let value = self.value(a).map(|v| v + c);
        self.push("add_const", value, Op::AddConst(a))
    }

    pub fn unary(&mut self, op: UnaryOp, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match op {
            UnaryOp::Exp => x.map(f64::exp),
            UnaryOp::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
                    return Err(Error::Domain {
                        op: "log",
                        reason: format!("non-positive input {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            UnaryOp::Square => x.map(|v| v * v),
            UnaryOp::Negate => x.map(|v| -v),
        };
        self.push("unary", value, Op::Unary(op, a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Log, a)
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Square, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryOp::Negate, a)
    }

    pub fn activation(&mut self, kind: Activation, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Activation::Softplus => x.map(softplus),
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(f64::tanh),
        };
        self.push(kind.name(), value, Op::Activation(kind, a))
    }

    pub fn reduce(&mut self, kind: Reduce, a: Var) -> Result<Var> {
        let x = self.value(a);
        let value = match kind {
            Reduce::Sum => Tensor::scalar(x.sum()),
            Reduce::Mean => Tensor::scalar(x.mean()),
        };
        self.push("reduce", value, Op::Reduce(kind, a))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Sum, a)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(Reduce::Mean, a)
    }

    /// Reduction of a rank-2 tensor along `axis` (0 = over rows, 1 = over columns).
    pub fn reduce_axis(&mut self, kind: Reduce, a: Var, axis: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(Error::InvalidAxis { axis, rank: x.rank() });
        }
        let value = match kind {
            Reduce::Sum => x.sum_axis(axis)?,
            Reduce::Mean => x.mean_axis(axis)?,
        };
        self.push("reduce_axis", value, Op::ReduceAxis(kind, a, axis))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        self.reduce_axis(Reduce::Sum, a, 1)
    }

    /// Output row `i` is row `idx[i]` of `a`; a vector counts as one row.
    pub fn gather_rows(&mut self, a: Var, idx: Vec<usize>) -> Result<Var> {
        let value = self.value(a).gather_rows(&idx)?;
        self.push("gather_rows", value, Op::GatherRows(a, idx))
    }

    /// `out[i] = a[i, cols[i]]`.
    pub fn pick_cols(&mut self, a: Var, cols: Vec<usize>) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = match x.shape() {
            [r, c] => (*r, *c),
            s => return Err(Error::shape("pick_cols", s, &[cols.len()])),
        };
        if cols.len() != r {
            return Err(Error::shape("pick_cols", x.shape(), &[cols.len()]));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::LabelOutOfRange { label: bad, classes: c });
        }
        let value = Tensor::vector(cols.iter().enumerate().map(|(i, &j)| x.at(i, j)).collect())?;
        self.push("pick_cols", value, Op::PickCols(a, cols))
    }

    /// Row-wise `x - logsumexp(x)` with max subtraction.
    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = x.dims2()?;
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            out.extend(log_softmax_row(x.row(i)));
        }
        let value = Tensor::new(x.shape(), out)?;
        self.push("log_softmax", value, Op::LogSoftmax(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        self.push("reshape", value, Op::Reshape(a))
    }

    /// Adjoints of every node with respect to the scalar `loss`.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::InvalidShape {
                shape: self.shape(loss).to_vec(),
                reason: "backward needs a scalar loss".into(),
            });
        }
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj)?;
            adj[i] = Some(g);
        }
        Ok(Gradients { adj })
    }

    /// Accumulates `d loss / d param` into each parameter's gradient buffer.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (name, &v) in &self.params {
            if let Some(g) = grads.get(v) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                let ga = slot(adj, *a, av.shape());
                gemm(m, n, k, g.data(), false, bv.data(), true, ga.data_mut(), true);
                let gb = slot(adj, *b, bv.shape());
                gemm(k, m, n, av.data(), true, g.data(), false, gb.data_mut(), true);
            }
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    slot(adj, *a, g.shape()).axpy(1.0, g)?;
                    slot(adj, *b, g.shape()).axpy(1.0, g)?;
                }
                BinaryOp::Sub => {
                    slot(adj, *a, g.shape()).axpy(1.0, g)?;
                    slot(adj, *b, g.shape()).axpy(-1.0, g)?;
                }
                BinaryOp::Mul => {
                    let ga = g.mul(self.value(*b))?;
                    let gb = g.mul(self.value(*a))?;
                    slot(adj, *a, g.shape()).axpy(1.0, &ga)?;
                    slot(adj, *b, g.shape()).axpy(1.0, &gb)?;
                }
            },
            Op::AddRow(a, bias) => {
                slot(adj, *a, g.shape()).axpy(1.0, g)?;
                let col_sums = g.reshape(&[g.numel() / self.value(*bias).numel(), self.value(*bias).numel()])?.sum_axis(0)?;
                let bshape = self.shape(*bias).to_vec();
                slot(adj, *bias, &bshape).axpy(1.0, &col_sums.reshape(&bshape)?)?;
            }
            Op::MulScalar(a, s) => {
                let c = self.value(*s).item()?;
                slot(adj, *a, g.shape()).axpy(c, g)?;
                let dot: f64 = g.data().iter().zip(self.value(*a).data()).map(|(x, y)| x * y).sum();
                let sshape = self.shape(*s).to_vec();
                slot(adj, *s, &sshape).data_mut()[0] += dot;
            }
            Op::Scale(a, c) => slot(adj, *a, g.shape()).axpy(*c, g)?,
            Op::AddConst(a) => slot(adj, *a, g.shape()).axpy(1.0, g)?,
            Op::Unary(op, a) => {
                let x = self.value(*a);
                let local = match op {
                    UnaryOp::Exp => g.mul(y)?,
                    UnaryOp::Log => g.zip_map(x, "log", |g, x| g / x)?,
                    UnaryOp::Square => g.zip_map(x, "square", |g, x| 2.0 * g * x)?,
                    UnaryOp::Negate => g.scale(-1.0),
                };
                slot(adj, *a, g.shape()).axpy(1.0, &local)?;
            }
            Op::Activation(kind, a) => {
                let x = self.value(*a);
                let local = match kind {
                    Activation::Softplus => g.zip_map(x, "softplus", |g, x| g * sigmoid(x))?,
                    Activation::Sigmoid => g.zip_map(y, "sigmoid", |g, y| g * y * (1.0 - y))?,
                    Activation::Tanh => g.zip_map(y, "tanh", |g, y| g * (1.0 - y * y))?,
                };
                slot(adj, *a, g.shape()).axpy(1.0, &local)?;
            }
            Op::Reduce(kind, a) => {
                let shape = self.shape(*a).to_vec();
                let n = self.value(*a).numel() as f64;
                let c = match kind {
                    Reduce::Sum => g.data()[0],
                    Reduce::Mean => g.data()[0] / n,
                };
                for v in slot(adj, *a, &shape).data_mut() {
                    *v += c;
                }
            }
            Op::ReduceAxis(kind, a, axis) => {
                let shape = self.shape(*a).to_vec();
                let (r, c) = (shape[0], shape[1]);
                let w = match (kind, axis) {
                    (Reduce::Sum, _) => 1.0,
                    (Reduce::Mean, 0) => 1.0 / r as f64,
                    (Reduce::Mean, _) => 1.0 / c as f64,
                };
                let ga = slot(adj, *a, &shape).data_mut();
                for i in 0..r {
                    for j in 0..c {
                        let gi = if *axis == 0 { g.data()[j] } else { g.data()[i] };
                        ga[i * c + j] += w * gi;
                    }
                }
            }
            Op::GatherRows(a, idx) => {
                let shape = self.shape(*a).to_vec();
                let cols = *shape.last().unwrap_or(&1);
                let ga = slot(adj, *a, &shape).data_mut();
                for (out_row, &src) in idx.iter().enumerate() {
                    let gr = &g.data()[out_row * cols..(out_row + 1) * cols];
                    for (d, &v) in ga[src * cols..(src + 1) * cols].iter_mut().zip(gr) {
                        *d += v;
                    }
                }
            }
            Op::PickCols(a, cols) => {
                let shape = self.shape(*a).to_vec();
                let c = shape[1];
                let ga = slot(adj, *a, &shape).data_mut();
                for (i, &j) in cols.iter().enumerate() {
                    ga[i * c + j] += g.data()[i];
                }
            }
            Op::LogSoftmax(a) => {
                let shape = self.shape(*a).to_vec();
                let (r, c) = y.dims2()?;
                let ga = slot(adj, *a, &shape).data_mut();
                for i in 0..r {
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let yr = y.row(i);
                    let total: f64 = gr.iter().sum();
                    for j in 0..c {
                        ga[i * c + j] += gr[j] - yr[j].exp() * total;
                    }
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                slot(adj, *a, &shape).axpy(1.0, &g.reshape(&shape)?)?;
            }
        }
        Ok(())
    }
}

fn slot<'a>(adj: &'a mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'a mut Tensor {
    adj[v.0].get_or_insert_with(|| Tensor::zeros(shape))
}

pub(crate) fn log_softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(move |&v| v - lse)
}

/// Result of a reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

/// Named trainable parameters with their gradient accumulators.
///
/// Iteration order is the lexicographic order of names, which keeps
/// checkpoints and optimizer updates deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Tensor) -> Result<()> {
        self.insert_with(name, value, true)
    }

    pub fn insert_with(&mut self, name: &str, value: Tensor, trainable: bool) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let grad = Tensor::zeros_like(&value);
        self.entries.insert(
            name.to_string(),
            Param {
                value,
                grad,
                trainable,
            },
        );
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Param> {
        self.entries.get(name).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.get(name)?.grad)
    }

    /// Replaces a value, keeping the shape.
    pub fn set_value(&mut self, name: &str, value: Tensor) -> Result<()> {
        let p = self.get_mut(name)?;
        if p.value.shape() != value.shape() {
            return Err(Error::shape("set_value", p.value.shape(), value.shape()));
        }
        p.value = value;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Tensor) -> Result<()> {
        self.get_mut(name)?.grad.axpy(1.0, g)
    }

    pub fn zero_grads(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between reverse-mode and central-difference gradients
/// of a scalar function of one tensor input.
pub fn grad_check<F>(f: F, at: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let x = tape.leaf(at.clone());
    let loss = f(&mut tape, x)?;
    let grads = tape.gradients(loss)?;
    let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros_like(at));

    let eval = |point: Tensor| -> Result<f64> {
        let mut t = Tape::new();
        let x = t.leaf(point);
        let l = f(&mut t, x)?;
        t.scalar(l)
    };
    let mut worst: f64 = 0.0;
    for i in 0..at.numel() {
        let mut plus = at.clone();
        plus.data_mut()[i] += step;
        let mut minus = at.clone();
        minus.data_mut()[i] -= step;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * step);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}

/// Per-parameter outcome of [`grad_check_params`].
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn max_error(&self) -> f64 {
        self.per_param.values().copied().fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<(&str, f64)> {
        self.per_param
            .iter()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k.as_str(), *v))
    }
}

/// Central-difference check of every trainable scalar in `store` for a loss
/// built by `f` (which must be deterministic given the store).
pub fn grad_check_params<F>(store: &ParamStore, f: F, step: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    let mut work = store.clone();
    work.zero_grads();
    let mut tape = Tape::new();
    let loss = f(&mut tape, &work)?;
    tape.backward(loss, &mut work)?;
    let analytic: BTreeMap<String, Tensor> =
        work.iter().map(|(k, p)| (k.to_string(), p.grad.clone())).collect();

    let eval = |s: &ParamStore| -> Result<f64> {
        let mut t = Tape::new();
        let l = f(&mut t, s)?;
        t.scalar(l)
    };
    let names: Vec<String> = work
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(k, _)| k.to_string())
        .collect();
    let mut per_param = BTreeMap::new();
    for name in names {
        let n = work.value(&name)?.numel();
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let orig = work.value(&name)?.data()[i];
            work.get_mut(&name)?.value.data_mut()[i] = orig + step;
            let up = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig - step;
            let down = eval(&work)?;
            work.get_mut(&name)?.value.data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * step);
            worst = worst.max(relative_error(analytic[&name].data()[i], numeric));
        }
        per_param.insert(name, worst);
    }
    Ok(GradCheckReport { per_param })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn square_at_three_has_gradient_six() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::scalar(3.0)).unwrap();
        let mut tape = Tape::new();
        let x = tape.param(&store, "x").unwrap();
        let y = tape.square(x).unwrap();
        let loss = tape.sum(y).unwrap();
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[6.0]);

        // second call without zeroing accumulates
        tape.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("x").unwrap().data(), &[12.0]);
        store.zero_grads();
        assert_eq!(store.grad("x").unwrap().data(), &[0.0]);
    }

    #[test]
    fn fan_out_sums_adjoints() {
        let err = grad_check(
            |t, x| {
                let y = t.mul(x, x)?;
                t.sum(y)
            },
            &Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "{err}");

        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, -2.0]).unwrap());
        let y = tape.mul(x, x).unwrap();
        let l = tape.sum(y).unwrap();
        let g = tape.gradients(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, -4.0]);
    }

    #[test]
    fn constant_function_has_zero_error() {
        let err = grad_check(
            |t, x| {
                let z = t.scale(x, 0.0)?;
                let s = t.sum(z)?;
                t.add_const(s, 4.0)
            },
            &Tensor::vector(vec![0.3, 0.7]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn elementwise_examples() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let b = t.leaf(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let s = t.add(a, b).unwrap();
        assert_eq!(t.value(s).data(), &[4.0, 6.0]);
        let h = t.leaf(Tensor::vector(vec![0.5]).unwrap());
        let e = t.exp(h).unwrap();
        let l = t.log(e).unwrap();
        assert!((t.value(l).data()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(t.log(a), Err(Error::Domain { .. })));
    }

    #[test]
    fn non_finite_values_are_rejected_when_checking() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1000.0]).unwrap());
        assert!(matches!(t.exp(a), Err(Error::NonFinite { .. })));
        let mut quiet = Tape::with_checks(false);
        let a = quiet.leaf(Tensor::vector(vec![1000.0]).unwrap());
        let e = quiet.exp(a).unwrap();
        assert!(quiet.value(e).data()[0].is_infinite());
    }

    #[test]
    fn broadcast_bias_gradient() {
        let mut store = ParamStore::new();
        store.insert("b", Tensor::vector(vec![1.0, 1.0]).unwrap()).unwrap();
        let mut t = Tape::new();
        let zeros = t.leaf(Tensor::zeros(&[2, 2]));
        let b = t.param(&store, "b").unwrap();
        let y = t.add_row(zeros, b).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 1.0, 1.0, 1.0]);
        let l = t.sum(y).unwrap();
        t.backward(l, &mut store).unwrap();
        assert_eq!(store.grad("b").unwrap().data(), &[2.0, 2.0]);

        // finite-difference oracle on the bias with a non-trivial loss
        let base = Tensor::matrix(2, 2, vec![0.1, -0.2, 0.3, 0.4]).unwrap();
        let err = grad_check(
            |t, bias| {
                let x = t.leaf(base.clone());
                let y = t.add_row(x, bias)?;
                let s = t.activation(Activation::Sigmoid, y)?;
                t.sum(s)
            },
            &Tensor::vector(vec![0.5, -1.5]).unwrap(),
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn matmul_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let w = random(&[3, 2], &mut rng);
        let bb = b.clone();
        let ww = w.clone();
        let err_a = grad_check(
            move |t, a| {
                let b = t.leaf(bb.clone());
                let w = t.leaf(ww.clone());
                let p = t.matmul(a, b)?;
                let q = t.mul(p, w)?;
                t.sum(q)
            },
            &a,
            1e-5,
        )
        .unwrap();
        let aa = a.clone();
        let err_b = grad_check(
            move |t, b| {
                let a = t.leaf(aa.clone());
                let w = t.leaf(w.clone());
                let p = t.matmul(a, b)?;
                let q = t.mul(p, w)?;
                t.sum(q)
            },
            &b,
            1e-5,
        )
        .unwrap();
        assert!(err_a < 1e-6 && err_b < 1e-6, "{err_a} {err_b}");
    }

    #[test]
    fn sum_of_sigmoid_of_linear_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&[4, 1], &mut rng);
        let w = random(&[3, 4], &mut rng);
        let err = grad_check(
            move |t, w| {
                let x = t.leaf(x.clone());
                let h = t.matmul(w, x)?;
                let s = t.activation(Activation::Sigmoid, h)?;
                t.sum(s)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn every_primitive_passes_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let weights = random(&[3, 4], &mut rng);
        let positive = random(&[3, 4], &mut rng).map(|v| v.abs() + 0.5);
        type Build = Box<dyn Fn(&mut Tape, Var) -> Result<Var>>;
        let w = weights.clone();
        let weighted = move |t: &mut Tape, y: Var| -> Result<Var> {
            let w = t.leaf(w.clone());
            let p = t.mul(y, w)?;
            t.sum(p)
        };
        let cases: Vec<(&str, Build, Tensor)> = vec![
            ("exp", Box::new(move |t, x| { let y = t.exp(x)?; weighted(t, y) }), random(&[3, 4], &mut rng)),
            ("log", Box::new(|t, x| { let y = t.log(x)?; t.sum(y) }), positive.clone()),
            ("square", Box::new(|t, x| { let y = t.square(x)?; t.mean(y) }), random(&[3, 4], &mut rng)),
            ("neg", Box::new(|t, x| { let y = t.neg(x)?; let y = t.exp(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("softplus", Box::new(|t, x| { let y = t.activation(Activation::Softplus, x)?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("tanh", Box::new(|t, x| { let y = t.activation(Activation::Tanh, x)?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("sum_rows", Box::new(|t, x| { let y = t.sum_rows(x)?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("mean_axis0", Box::new(|t, x| { let y = t.reduce_axis(Reduce::Mean, x, 0)?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("log_softmax", Box::new(|t, x| { let y = t.log_softmax(x)?; let y = t.pick_cols(y, vec![0, 3, 1])?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("gather_rows", Box::new(|t, x| { let y = t.gather_rows(x, vec![2, 0, 2, 1])?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("reshape", Box::new(|t, x| { let y = t.reshape(x, &[4, 3])?; let y = t.sum_rows(y)?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
            ("mul_scalar", Box::new(|t, x| { let s = t.gather_rows(x, vec![0])?; let s = t.sum(s)?; let y = t.mul_scalar(x, s)?; let y = t.square(y)?; t.sum(y) }), random(&[3, 4], &mut rng)),
        ];
        for (name, f, at) in cases {
            let err = grad_check(f, &at, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: {err}");
        }
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(softplus(1000.0), 1000.0);
        assert_eq!(softplus(-1000.0), 0.0);
        // log1p(e^-30) vs its series value, computed independently
        let tail = (-30.0f64).exp();
        assert!((softplus(-30.0) - (tail - tail * tail / 2.0)).abs() < 1e-28);
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-40.0) > 0.0 && sigmoid(40.0) <= 1.0);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut t = Tape::new();
        let a = t.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(t.gradients(a).is_err());
    }

    #[test]
    fn duplicate_param_names_rejected() {
        let mut s = ParamStore::new();
        s.insert("w", Tensor::scalar(1.0)).unwrap();
        assert!(matches!(s.insert("w", Tensor::scalar(2.0)), Err(Error::DuplicateParam(_))));
    }
}
