//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its forward value and the indices of its inputs, so the node
//! list is already in topological order and [`Graph::backward`] simply walks
//! it in reverse.

use std::collections::HashMap;

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named trainable tensors. Insertion order is the canonical parameter order
/// used by the optimizer and by checkpoints.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
    index: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::usage(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        Ok(id)
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

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
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

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }
}

/// Per-parameter gradients produced by [`Graph::backward`], aligned with the
/// [`ParamStore`] the graph read from.
#[derive(Clone, Debug)]
pub struct Gradients {
    values: Vec<Tensor>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Gradients {
            values: store.values.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Tensor> {
        self.values.iter()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Maximum(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ClampMin(Var, f64),
    Powf(Var, f64),
    Exp(Var),
    Log(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Tanh(Var),
    Gelu(Var),
    SumAll(Var),
    SumCols(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    OuterRows(Var, Var),
    MatVecRows(Var, Var),
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Tensor },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Maximum(..) => "maximum",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::ClampMin(..) => "clamp_min",
            Op::Powf(..) => "powf",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::SumAll(_) => "sum_all",
            Op::SumCols(_) => "sum_cols",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::OuterRows(..) => "outer_rows",
            Op::MatVecRows(..) => "matvec_rows",
            Op::SoftmaxXent { .. } => "softmax_cross_entropy",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    n_params: usize,
    fault: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
            n_params: 0,
            fault: None,
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

    /// Fails if any forward value so far contained NaN or infinity.
    pub fn check_finite(&self) -> Result<()> {
        match self.fault {
            Some(op) => Err(Error::NonFinite { op, context: None }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        if self.fault.is_none() && !value.is_finite() {
            self.fault = Some(op.name());
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf bound to a trainable parameter. Repeated calls with the same id
    /// return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        self.n_params = self.n_params.max(store.len());
        let v = self.push(store.get(id).clone(), Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let out = Tensor::from_parts(m, n, matmul_raw(ta.data(), tb.data(), m, k, n));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (r, c) = broadcast_shape(op.name(), ta, tb)?;
        let out = Tensor::from_parts(r, c, zip_broadcast(ta, tb, r, c, f));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, op, rg))
    }

    /// Elementwise sum; a `[1 x n]`, `[m x 1]` or `[1 x 1]` operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Maximum(a, b), f64::max)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        self.unary(a, Op::Scale(a, factor), |x| x * factor)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    /// `max(x, floor)` elementwise; the gradient passes only where `x > floor`.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn powf(&mut self, a: Var, p: f64) -> Var {
        self.unary(a, Op::Powf(a, p), |x| x.powf(p))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), log_sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    /// Exact GELU, `x * Phi(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu)
    }

    /// Sum of all elements as a `[1 x 1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::SumAll(a), rg)
    }

    /// Row sums: `[m x n] -> [m x 1]`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        let data = t.data().chunks(c.max(1)).map(|row| row.iter().sum()).collect();
        let out = Tensor::from_parts(r, 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    /// Row means: `[m x n] -> [m x 1]`.
    pub fn mean_cols(&mut self, a: Var) -> Var {
        let n = self.value(a).cols() as f64;
        let s = self.sum_cols(a);
        self.scale(s, 1.0 / n)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.rows(), t.cols());
        if start + len > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of {c}", start + len),
            ));
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.data()[i * c + start..i * c + start + len]);
        }
        let out = Tensor::from_parts(r, len, data);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::dim("concat_cols", "no operands"));
        };
        let r = self.value(first).rows();
        let mut total = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rows() != r {
                return Err(Error::dim(
                    "concat_cols",
                    format!("row mismatch {} vs {}", t.rows(), r),
                ));
            }
            total += t.cols();
        }
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(i));
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        let out = Tensor::from_parts(r, total, data);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Per-row outer product, flattened row-major:
    /// `[b x p], [b x q] -> [b x p*q]` with `out[r, i*q + j] = a[r,i] * b[r,j]`.
    pub fn outer_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rows() != tb.rows() {
            return Err(Error::dim(
                "outer_rows",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (r, p, q) = (ta.rows(), ta.cols(), tb.cols());
        let mut data = vec![0.0; r * p * q];
        for row in 0..r {
            let (ar, br) = (ta.row_slice(row), tb.row_slice(row));
            let out = &mut data[row * p * q..(row + 1) * p * q];
            for i in 0..p {
                for j in 0..q {
                    out[i * q + j] = ar[i] * br[j];
                }
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(r, p * q, data), Op::OuterRows(a, b), rg))
    }

    /// Per-row matrix-vector product: each row of `m: [b x p*q]` is read as a
    /// row-major `p x q` matrix and applied to the matching row of `x: [b x q]`.
    pub fn matvec_rows(&mut self, m: Var, x: Var) -> Result<Var> {
        let (tm, tx) = (self.value(m), self.value(x));
        let q = tx.cols();
        if tm.rows() != tx.rows() || q == 0 || tm.cols() % q != 0 {
            return Err(Error::dim(
                "matvec_rows",
                format!("{:?} vs {:?}", tm.shape(), tx.shape()),
            ));
        }
        let (r, p) = (tm.rows(), tm.cols() / q);
        let mut data = vec![0.0; r * p];
        for row in 0..r {
            let (mr, xr) = (tm.row_slice(row), tx.row_slice(row));
            for i in 0..p {
                data[row * p + i] = mr[i * q..(i + 1) * q]
                    .iter()
                    .zip(xr)
                    .map(|(a, b)| a * b)
                    .sum();
            }
        }
        let rg = self.rg(m) || self.rg(x);
        Ok(self.push(Tensor::from_parts(r, p, data), Op::MatVecRows(m, x), rg))
    }

    /// Mean over rows of `-log softmax(logits)[label]`, max-subtracted.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (r, c) = (t.rows(), t.cols());
        if labels.len() != r {
            return Err(Error::dim(
                "softmax_cross_entropy",
                format!("{} labels for {} rows", labels.len(), r),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::usage(format!("label {bad} out of range 0..{c}")));
        }
        let probs = softmax_rows(t);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| {
                let row = t.row_slice(i);
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / r as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. Parameters the loss does not reach
    /// get zero gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));
        let mut out: Vec<Option<Tensor>> = vec![None; self.n_params];

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            let mut send = |v: Var, t: Tensor| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut grads[v.0], t);
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    accumulate(&mut out[id.0], g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        send(*a, Tensor::from_parts(m, k, matmul_nt(g.data(), tb.data(), m, n, k)));
                    }
                    if self.rg(*b) {
                        send(*b, Tensor::from_parts(k, n, matmul_tn(ta.data(), g.data(), m, k, n)));
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        send(*a, reduce_to(&g, self.value(*a)));
                    }
                    if self.rg(*b) {
                        send(*b, reduce_to(&g, self.value(*b)));
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        send(*a, reduce_to(&g, self.value(*a)));
                    }
                    if self.rg(*b) {
                        send(*b, reduce_to(&g, self.value(*b)).map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, c) = (g.rows(), g.cols());
                    if self.rg(*a) {
                        let full = zip_broadcast(&g, tb, r, c, |gv, bv| gv * bv);
                        send(*a, reduce_to(&Tensor::from_parts(r, c, full), ta));
                    }
                    if self.rg(*b) {
                        let full = zip_broadcast(&g, ta, r, c, |gv, av| gv * av);
                        send(*b, reduce_to(&Tensor::from_parts(r, c, full), tb));
                    }
                }
                Op::Div(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, c) = (g.rows(), g.cols());
                    if self.rg(*a) {
                        let full = zip_broadcast(&g, tb, r, c, |gv, bv| gv / bv);
                        send(*a, reduce_to(&Tensor::from_parts(r, c, full), ta));
                    }
                    if self.rg(*b) {
                        // d(a/b)/db = -out / b
                        let quotient = &node.value;
                        let gq: Vec<f64> =
                            g.data().iter().zip(quotient.data()).map(|(x, y)| x * y).collect();
                        let full = zip_broadcast(&Tensor::from_parts(r, c, gq), tb, r, c, |v, bv| {
                            -v / bv
                        });
                        send(*b, reduce_to(&Tensor::from_parts(r, c, full), tb));
                    }
                }
                Op::Maximum(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, c) = (g.rows(), g.cols());
                    let mut ga = vec![0.0; r * c];
                    let mut gb = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            let av = bget(ta, i, j);
                            let bv = bget(tb, i, j);
                            let gv = g.data()[i * c + j];
                            if av >= bv {
                                ga[i * c + j] = gv;
                            } else {
                                gb[i * c + j] = gv;
                            }
                        }
                    }
                    if self.rg(*a) {
                        send(*a, reduce_to(&Tensor::from_parts(r, c, ga), ta));
                    }
                    if self.rg(*b) {
                        send(*b, reduce_to(&Tensor::from_parts(r, c, gb), tb));
                    }
                }
                Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
                Op::AddScalar(a) => send(*a, g),
                Op::ClampMin(a, floor) => {
                    let x = self.value(*a);
                    send(*a, zip_same(&g, x, |gv, xv| if xv > *floor { gv } else { 0.0 }));
                }
                Op::Powf(a, p) => {
                    let x = self.value(*a);
                    send(*a, zip_same(&g, x, |gv, xv| gv * p * xv.powf(p - 1.0)));
                }
                Op::Exp(a) => send(*a, zip_same(&g, &node.value, |gv, y| gv * y)),
                Op::Log(a) => send(*a, zip_same(&g, self.value(*a), |gv, x| gv / x)),
                Op::Sigmoid(a) => {
                    send(*a, zip_same(&g, &node.value, |gv, y| gv * y * (1.0 - y)))
                }
                Op::LogSigmoid(a) => send(
                    *a,
                    zip_same(&g, self.value(*a), |gv, x| gv * sigmoid(-x)),
                ),
                Op::Tanh(a) => send(*a, zip_same(&g, &node.value, |gv, y| gv * (1.0 - y * y))),
                Op::Gelu(a) => send(*a, zip_same(&g, self.value(*a), |gv, x| gv * gelu_grad(x))),
                Op::SumAll(a) => {
                    let gv = g.item();
                    send(*a, Tensor::full(self.value(*a).shape(), gv));
                }
                Op::SumCols(a) => {
                    let x = self.value(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let mut data = Vec::with_capacity(r * c);
                    for i in 0..r {
                        data.extend(std::iter::repeat_n(g.data()[i], c));
                    }
                    send(*a, Tensor::from_parts(r, c, data));
                }
                Op::SliceCols(a, start) => {
                    let x = self.value(*a);
                    let (r, c) = (x.rows(), x.cols());
                    let len = g.cols();
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        data[i * c + start..i * c + start + len].copy_from_slice(g.row_slice(i));
                    }
                    send(*a, Tensor::from_parts(r, c, data));
                }
                Op::ConcatCols(parts) => {
                    let r = g.rows();
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            let mut data = Vec::with_capacity(r * w);
                            for i in 0..r {
                                data.extend_from_slice(&g.row_slice(i)[offset..offset + w]);
                            }
                            send(p, Tensor::from_parts(r, w, data));
                        }
                        offset += w;
                    }
                }
                Op::OuterRows(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (r, p, q) = (ta.rows(), ta.cols(), tb.cols());
                    if self.rg(*a) {
                        let mut ga = vec![0.0; r * p];
                        for row in 0..r {
                            let gr = g.row_slice(row);
                            let br = tb.row_slice(row);
                            for i in 0..p {
                                ga[row * p + i] =
                                    gr[i * q..(i + 1) * q].iter().zip(br).map(|(x, y)| x * y).sum();
                            }
                        }
                        send(*a, Tensor::from_parts(r, p, ga));
                    }
                    if self.rg(*b) {
                        let mut gb = vec![0.0; r * q];
                        for row in 0..r {
                            let gr = g.row_slice(row);
                            let ar = ta.row_slice(row);
                            let out = &mut gb[row * q..(row + 1) * q];
                            for i in 0..p {
                                for j in 0..q {
                                    out[j] += gr[i * q + j] * ar[i];
                                }
                            }
                        }
                        send(*b, Tensor::from_parts(r, q, gb));
                    }
                }
                Op::MatVecRows(m, x) => {
                    let (tm, tx) = (self.value(*m), self.value(*x));
                    let q = tx.cols();
                    let (r, p) = (tm.rows(), tm.cols() / q);
                    if self.rg(*m) {
                        let mut gm = vec![0.0; r * p * q];
                        for row in 0..r {
                            let gr = g.row_slice(row);
                            let xr = tx.row_slice(row);
                            let out = &mut gm[row * p * q..(row + 1) * p * q];
                            for i in 0..p {
                                for j in 0..q {
                                    out[i * q + j] = gr[i] * xr[j];
                                }
                            }
                        }
                        send(*m, Tensor::from_parts(r, p * q, gm));
                    }
                    if self.rg(*x) {
                        let mut gx = vec![0.0; r * q];
                        for row in 0..r {
                            let gr = g.row_slice(row);
                            let mr = tm.row_slice(row);
                            let out = &mut gx[row * q..(row + 1) * q];
                            for i in 0..p {
                                for j in 0..q {
                                    out[j] += gr[i] * mr[i * q + j];
                                }
                            }
                        }
                        send(*x, Tensor::from_parts(r, q, gx));
                    }
                }
                Op::SoftmaxXent {
                    logits,
                    labels,
                    probs,
                } => {
                    let scale = g.item() / labels.len() as f64;
                    let c = probs.cols();
                    let mut data = probs.data().to_vec();
                    for (i, &l) in labels.iter().enumerate() {
                        data[i * c + l] -= 1.0;
                    }
                    for v in &mut data {
                        *v *= scale;
                    }
                    send(*logits, Tensor::from_parts(probs.rows(), c, data));
                }
            }
        }

        let values = out
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.unwrap_or_else(|| {
                    // shape comes from the param leaf if the graph saw it
                    let shape = self
                        .params
                        .get(&ParamId(i))
                        .map(|v| self.value(*v).shape().to_vec())
                        .unwrap_or_else(|| vec![0]);
                    Tensor::zeros(&shape)
                })
            })
            .collect();
        Ok(Gradients { values })
    }

    /// Like [`Graph::backward`] but sized against `store`, so parameters the
    /// graph never touched still get correctly shaped zero gradients.
    pub fn backward_for(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        let mut grads = self.backward(loss)?;
        grads.values.resize_with(store.len(), || Tensor::zeros(&[0]));
        for (i, g) in grads.values.iter_mut().enumerate() {
            let want = store.get(ParamId(i)).shape();
            if g.shape() != want {
                *g = Tensor::zeros(want);
            }
        }
        Ok(grads)
    }
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&t),
        None => *slot = Some(t),
    }
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(usize, usize)> {
    let dim = |x: usize, y: usize| -> Option<usize> {
        if x == y {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else if y == 1 {
            Some(x)
        } else {
            None
        }
    };
    match (dim(a.rows(), b.rows()), dim(a.cols(), b.cols())) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape()))),
    }
}

#[inline]
fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
    let (r, c) = (t.rows(), t.cols());
    let ii = if r == 1 { 0 } else { i };
    let jj = if c == 1 { 0 } else { j };
    t.data()[ii * c + jj]
}

fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    r: usize,
    c: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a.rows() == r && a.cols() == c && b.rows() == r && b.cols() == c {
        return a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            out.push(f(bget(a, i, j), bget(b, i, j)));
        }
    }
    out
}

fn zip_same(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(g.rows(), g.cols(), data)
}

/// Sums a broadcast gradient back down to `like`'s shape.
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    let (r, c) = (g.rows(), g.cols());
    let (tr, tc) = (like.rows(), like.cols());
    if r == tr && c == tc {
        let mut out = g.clone();
        if out.shape() != like.shape() {
            out = Tensor::new(like.shape().to_vec(), out.into_data()).expect("same size");
        }
        return out;
    }
    let mut data = vec![0.0; tr * tc];
    for i in 0..r {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..c {
            let tj = if tc == 1 { 0 } else { j };
            data[ti * tc + tj] += g.data()[i * c + j];
        }
    }
    Tensor::new(like.shape().to_vec(), data).expect("reduced size matches")
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn gelu(x: f64) -> f64 {
    x * normal_cdf(x)
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    normal_cdf(x) + x * pdf
}

fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(t: &Tensor) -> Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let row = t.row_slice(i);
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        data.extend(exps.into_iter().map(|e| e / z));
    }
    Tensor::from_parts(r, c, data)
}
