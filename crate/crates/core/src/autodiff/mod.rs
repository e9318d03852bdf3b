//! Define-by-run reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough bookkeeping to apply its
//! backward rule; [`Tape::backward`] walks the nodes once in reverse.
//!
//! ```
//! use monoalign::autodiff::Tape;
//! use monoalign::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let p = tape.param("p", Tensor::vector(vec![1.0, 2.0]));
//! let sq = tape.mul(p, p).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(p).unwrap().data(), &[2.0, 4.0]);
//! ```

mod checkpoint;
mod params;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint};
pub use params::{AdamConfig, Parameter, ParameterStore};

use std::collections::{BTreeMap, HashMap};

use crate::align::posteriors_backward;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    SoftmaxRows(Var),
    LayerNorm {
        input: Var,
        eps: f64,
    },
    Conv1d {
        input: Var,
        weight: Var,
        dilation: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows {
        input: Var,
        index: Vec<usize>,
    },
    GatherCols {
        input: Var,
        index: Vec<usize>,
    },
    Sum(Var),
    MonotonicAlign {
        logits: Var,
        max_duration: usize,
        alpha: Tensor,
    },
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::MulCol(..) => "mul_col",
            Op::Scale(..) => "scale",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Relu(..) => "relu",
            Op::SoftmaxRows(..) => "softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Conv1d { .. } => "conv1d",
            Op::Embedding { .. } => "embedding",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(..) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::GatherCols { .. } => "gather_cols",
            Op::Sum(..) => "sum",
            Op::MonotonicAlign { .. } => "monotonic_align",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::MulScalar(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::SoftmaxRows(a)
            | Op::Sum(a) => vec![*a],
            Op::LayerNorm { input, .. }
            | Op::SliceCols { input, .. }
            | Op::GatherRows { input, .. }
            | Op::GatherCols { input, .. } => vec![*input],
            Op::Conv1d { input, weight, .. } => vec![*input, *weight],
            Op::Embedding { table, .. } => vec![*table],
            Op::ConcatCols(parts) => parts.clone(),
            Op::MonotonicAlign { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: BTreeMap<String, Var>,
    visited: usize,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    /// Number of nodes whose backward rule ran.
    pub fn visited(&self) -> usize {
        self.visited
    }

    /// Gradients keyed by parameter name; unreachable parameters get zeros.
    pub fn parameter_grads(&self, tape: &Tape) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .map(|(name, &var)| {
                let grad = self
                    .get(var)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.value(var).shape()));
                (name.clone(), grad)
            })
            .collect()
    }
}

#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    check_finite: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            check_finite: true,
        }
    }

    /// Turns the per-op NaN/Inf check on or off (on by default).
    pub fn set_finite_checks(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(Error::NonFinite {
                context: format!("{} output", op.kind()),
            });
        }
        let requires_grad = op.inputs().iter().any(|v| self.requires_grad(*v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    /// An unnamed differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A named parameter. Binding the same name twice returns the first node.
    pub fn param(&mut self, name: &str, value: Tensor) -> Var {
        if let Some(&var) = self.params.get(name) {
            return var;
        }
        let var = self.push_leaf(value, true);
        self.params.insert(name.to_string(), var);
        var
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    fn shape_err(&self, op: &'static str, vars: &[Var]) -> Error {
        let shapes: Vec<_> = vars.iter().map(|v| self.value(*v).shape().to_vec()).collect();
        Error::shape(op, format!("operand shapes {shapes:?}"))
    }

    fn require_matrix(&self, op: &'static str, vars: &[Var]) -> Result<()> {
        if vars.iter().all(|v| self.value(*v).is_matrix()) {
            Ok(())
        } else {
            Err(self.shape_err(op, vars))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.require_matrix("matmul", &[a, b])?;
        if self.value(a).cols() != self.value(b).rows() {
            return Err(self.shape_err("matmul", &[a, b]));
        }
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.require_matrix("transpose", &[a])?;
        let out = self.value(a).transpose();
        self.push(out, Op::Transpose(a))
    }

    fn zip_same(&mut self, kind: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.shape_err(kind, &[a, b]));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("div", a, b, |x, y| x / y)?;
        self.push(out, Op::Div(a, b))
    }

    /// `a[r][c] + b[c]` for a matrix `a` and a vector `b` (bias add).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || tb.shape() != [ta.cols()] {
            return Err(self.shape_err("add_row", &[a, b]));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o += x;
            }
        }
        self.push(out, Op::AddRow(a, b))
    }

    /// `a[r][c] * b[c]` (per-column gain).
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || tb.shape() != [ta.cols()] {
            return Err(self.shape_err("mul_row", &[a, b]));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            for (o, x) in out.row_mut(r).iter_mut().zip(tb.data()) {
                *o *= x;
            }
        }
        self.push(out, Op::MulRow(a, b))
    }

    /// `a[r][c] * b[r]` (per-row scale).
    pub fn mul_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.is_matrix() || tb.shape() != [ta.rows()] {
            return Err(self.shape_err("mul_col", &[a, b]));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let s = tb.data()[r];
            for o in out.row_mut(r) {
                *o *= s;
            }
        }
        self.push(out, Op::MulCol(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    /// Multiplies every element of `a` by the single value held in `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(self.shape_err("mul_scalar", &[a, s]));
        }
        let k = self.value(s).data()[0];
        let out = self.value(a).map(|v| v * k);
        self.push(out, Op::MulScalar(a, s))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::ln);
        self.push(out, Op::Log(a))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.require_matrix("softmax_rows", &[a])?;
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Normalizes each row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        self.require_matrix("layer_norm", &[a])?;
        let mut out = self.value(a).clone();
        let n = out.cols() as f64;
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            let inv = 1.0 / (var + eps).sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv;
            }
        }
        self.push(out, Op::LayerNorm { input: a, eps })
    }

    /// Dilated 1-D convolution over time with "same" zero padding.
    ///
    /// `input` is `T × C_in`, `weight` is `C_out × C_in × K` with odd `K`;
    /// the output is `T × C_out`.
    pub fn conv1d(&mut self, input: Var, weight: Var, dilation: usize) -> Result<Var> {
        let (x, w) = (self.value(input), self.value(weight));
        let ws = w.shape();
        if !x.is_matrix() || ws.len() != 3 || ws[1] != x.cols() || ws[2] % 2 == 0 || dilation == 0 {
            return Err(self.shape_err("conv1d", &[input, weight]));
        }
        let (steps, c_in) = (x.rows(), x.cols());
        let (c_out, kernel) = (ws[0], ws[2]);
        let pad = dilation * (kernel - 1) / 2;
        let wd = w.data();
        let mut out = Tensor::zeros(&[steps, c_out]);
        for t in 0..steps {
            for k in 0..kernel {
                let Some(src) = (t + k * dilation).checked_sub(pad).filter(|s| *s < steps) else {
                    continue;
                };
                let xrow = x.row(src);
                let orow = &mut out.data_mut()[t * c_out..(t + 1) * c_out];
                for (o, acc) in orow.iter_mut().enumerate() {
                    let base = o * c_in * kernel;
                    let mut s = 0.0;
                    for (c, xv) in xrow.iter().enumerate() {
                        s += wd[base + c * kernel + k] * xv;
                    }
                    *acc += s;
                }
            }
        }
        self.push(out, Op::Conv1d { input, weight, dilation })
    }

    /// Row lookup: output row `r` is `table[ids[r]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if !t.is_matrix() {
            return Err(self.shape_err("embedding", &[table]));
        }
        if let Some(bad) = ids.iter().find(|&&id| id >= t.rows()) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                t.rows()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * t.cols());
        for &id in ids {
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::matrix(ids.len(), t.cols(), data)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || start >= end || end > t.cols() {
            return Err(Error::shape(
                "slice_cols",
                format!("columns {start}..{end} of {:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(t.rows() * (end - start));
        for r in 0..t.rows() {
            data.extend_from_slice(&t.row(r)[start..end]);
        }
        let out = Tensor::matrix(t.rows(), end - start, data)?;
        self.push(out, Op::SliceCols { input: a, start })
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no operands"));
        }
        self.require_matrix("concat_cols", parts)?;
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|p| self.value(*p).rows() != rows) {
            return Err(self.shape_err("concat_cols", parts));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::matrix(rows, cols, data)?;
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || index.iter().any(|&i| i >= t.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("index out of range for {:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * t.cols());
        for &i in index {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(index.len(), t.cols(), data)?;
        self.push(
            out,
            Op::GatherRows {
                input: a,
                index: index.to_vec(),
            },
        )
    }

    pub fn gather_cols(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        if !t.is_matrix() || index.iter().any(|&i| i >= t.cols()) {
            return Err(Error::shape(
                "gather_cols",
                format!("index out of range for {:?}", t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(index.len() * t.rows());
        for r in 0..t.rows() {
            let row = t.row(r);
            data.extend(index.iter().map(|&i| row[i]));
        }
        let out = Tensor::matrix(t.rows(), index.len(), data)?;
        self.push(
            out,
            Op::GatherCols {
                input: a,
                index: index.to_vec(),
            },
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a))
            .expect("sum of finite values is finite")
    }

    /// Alignment posterior `beta` of the monotonic boundary DP over
    /// `logits` (tokens × frames). The boundary posterior computed on the
    /// way is kept and available through [`Tape::boundary_posterior`].
    pub fn monotonic_align(&mut self, logits: Var, max_duration: usize) -> Result<Var> {
        let e = crate::align::EnergyMatrix::from_logits(self.value(logits).clone())?;
        let (alpha, beta) = crate::align::posteriors(&e, max_duration)?;
        self.push(
            beta.0,
            Op::MonotonicAlign {
                logits,
                max_duration,
                alpha: alpha.0,
            },
        )
    }

    pub fn boundary_posterior(&self, var: Var) -> Option<&Tensor> {
        match &self.nodes[var.0].op {
            Op::MonotonicAlign { alpha, .. } => Some(alpha),
            _ => None,
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.value(loss).shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            visited += 1;
            self.backprop(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        Ok(Gradients {
            grads,
            params,
            visited,
        })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], var: Var, g: Tensor) {
        if !self.requires_grad(var) {
            return;
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: Var| self.value(v);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.requires_grad(*a) {
                    self.accumulate(grads, *a, g.matmul(&val(*b).transpose())?);
                }
                if self.requires_grad(*b) {
                    self.accumulate(grads, *b, val(*a).transpose().matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.transpose()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                self.accumulate(grads, *a, zip(g, val(*b), |x, y| x * y));
                self.accumulate(grads, *b, zip(g, val(*a), |x, y| x * y));
            }
            Op::Div(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                self.accumulate(grads, *a, zip(g, tb, |x, y| x / y));
                let gb = Tensor::new(
                    tb.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(ta.data())
                        .zip(tb.data())
                        .map(|((gv, x), y)| -gv * x / (y * y))
                        .collect(),
                )?;
                self.accumulate(grads, *b, gb);
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                let mut gb = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    for (acc, x) in gb.iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *b, Tensor::vector(gb));
            }
            Op::MulRow(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = vec![0.0; g.cols()];
                for r in 0..g.rows() {
                    let arow = ta.row(r);
                    for (c, gv) in ga.row_mut(r).iter_mut().enumerate() {
                        gb[c] += *gv * arow[c];
                        *gv *= tb.data()[c];
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, Tensor::vector(gb));
            }
            Op::MulCol(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut ga = g.clone();
                let mut gb = vec![0.0; g.rows()];
                for (r, gbr) in gb.iter_mut().enumerate() {
                    let s = tb.data()[r];
                    let arow = ta.row(r);
                    for (c, gv) in ga.row_mut(r).iter_mut().enumerate() {
                        *gbr += *gv * arow[c];
                        *gv *= s;
                    }
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, Tensor::vector(gb));
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::MulScalar(a, s) => {
                let k = val(*s).data()[0];
                self.accumulate(grads, *a, g.map(|v| v * k));
                let gs: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                self.accumulate(grads, *s, Tensor::new(val(*s).shape().to_vec(), vec![gs])?);
            }
            Op::Exp(a) => self.accumulate(grads, *a, zip(g, &node.value, |x, y| x * y)),
            Op::Log(a) => self.accumulate(grads, *a, zip(g, val(*a), |x, y| x / y)),
            Op::Relu(a) => self.accumulate(
                grads,
                *a,
                zip(g, val(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = g.clone();
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let dot: f64 = g.row(r).iter().zip(yr).map(|(x, y)| x * y).sum();
                    for (gv, yv) in ga.row_mut(r).iter_mut().zip(yr) {
                        *gv = yv * (*gv - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm { input, eps } => {
                let x = val(*input);
                let y = &node.value;
                let n = x.cols() as f64;
                let mut ga = g.clone();
                for r in 0..x.rows() {
                    let xr = x.row(r);
                    let mean = xr.iter().sum::<f64>() / n;
                    let var = xr.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                    let inv = 1.0 / (var + eps).sqrt();
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let g_mean = gr.iter().sum::<f64>() / n;
                    let gy_mean = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n;
                    for (c, out) in ga.row_mut(r).iter_mut().enumerate() {
                        *out = inv * (gr[c] - g_mean - yr[c] * gy_mean);
                    }
                }
                self.accumulate(grads, *input, ga);
            }
            Op::Conv1d {
                input,
                weight,
                dilation,
            } => {
                let (x, w) = (val(*input), val(*weight));
                let (steps, c_in) = (x.rows(), x.cols());
                let (c_out, kernel) = (w.shape()[0], w.shape()[2]);
                let pad = dilation * (kernel - 1) / 2;
                let mut gx = Tensor::zeros(x.shape());
                let mut gw = Tensor::zeros(w.shape());
                let wd = w.data();
                for t in 0..steps {
                    let grow = g.row(t);
                    for k in 0..kernel {
                        let Some(src) = (t + k * dilation).checked_sub(pad).filter(|s| *s < steps)
                        else {
                            continue;
                        };
                        let xrow = x.row(src);
                        for (o, &gv) in grow.iter().enumerate().take(c_out) {
                            if gv == 0.0 {
                                continue;
                            }
                            let base = o * c_in * kernel;
                            let gxrow = gx.row_mut(src);
                            for c in 0..c_in {
                                gxrow[c] += gv * wd[base + c * kernel + k];
                            }
                            let gwd = gw.data_mut();
                            for c in 0..c_in {
                                gwd[base + c * kernel + k] += gv * xrow[c];
                            }
                        }
                    }
                }
                self.accumulate(grads, *input, gx);
                self.accumulate(grads, *weight, gw);
            }
            Op::Embedding { table, ids } => {
                let mut gt = Tensor::zeros(val(*table).shape());
                for (r, &id) in ids.iter().enumerate() {
                    for (acc, x) in gt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SliceCols { input, start } => {
                let mut gi = Tensor::zeros(val(*input).shape());
                let w = g.cols();
                for r in 0..g.rows() {
                    gi.row_mut(r)[*start..*start + w].copy_from_slice(g.row(r));
                }
                self.accumulate(grads, *input, gi);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let w = val(*p).cols();
                    let mut gp = Tensor::zeros(val(*p).shape());
                    for r in 0..g.rows() {
                        gp.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + w]);
                    }
                    offset += w;
                    self.accumulate(grads, *p, gp);
                }
            }
            Op::GatherRows { input, index } => {
                let mut gi = Tensor::zeros(val(*input).shape());
                for (r, &src) in index.iter().enumerate() {
                    for (acc, x) in gi.row_mut(src).iter_mut().zip(g.row(r)) {
                        *acc += x;
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::GatherCols { input, index } => {
                let mut gi = Tensor::zeros(val(*input).shape());
                for r in 0..g.rows() {
                    let grow = g.row(r);
                    let irow = gi.row_mut(r);
                    for (c, &src) in index.iter().enumerate() {
                        irow[src] += grow[c];
                    }
                }
                self.accumulate(grads, *input, gi);
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::filled(val(*a).shape(), gv));
            }
            Op::MonotonicAlign {
                logits,
                max_duration,
                alpha,
            } => {
                let gl = posteriors_backward(val(*logits), alpha, *max_duration, None, Some(g))?;
                self.accumulate(grads, *logits, gl);
            }
        }
        Ok(())
    }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("operands share a shape")
}
