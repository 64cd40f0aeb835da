//! Reverse-mode differentiation on an eager tape.
//!
//! Graphs are built one op at a time against a [`Tape`]; each op computes its
//! value immediately and records enough to run the chain rule backwards. Ops
//! are matrix-granular (matmul, row reductions, activations) so a training
//! step is a few dozen nodes rather than one node per scalar.
//!
//! Non-finite values are tracked rather than panicking: the first op that
//! produces a NaN/inf poisons the tape, and [`Tape::value`] / [`Tape::backward`]
//! report the offending node so callers can skip the step and log it.

pub mod check;
mod params;

pub use check::{fd_gradient, max_grad_deviation};
pub use params::{AdamConfig, ParamStore, StepOutcome};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffError {
    #[error("non-finite value produced at node {node} ({op})")]
    NonFinite { node: usize, op: String },
    #[error("backward requires a 1x1 output, got {rows}x{cols}")]
    NonScalarOutput { rows: usize, cols: usize },
}

/// Dense row-major matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl Tensor {
    pub fn new(data: Vec<f64>, rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "tensor shape/data mismatch");
        Tensor { data, rows, cols }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { data: vec![0.0; rows * cols], rows, cols }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor { data: vec![v; rows * cols], rows, cols }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { data: vec![v], rows: 1, cols: 1 }
    }

    pub fn row(values: &[f64]) -> Self {
        Tensor::new(values.to_vec(), 1, values.len())
    }

    pub fn column(values: &[f64]) -> Self {
        Tensor::new(values.to_vec(), values.len(), 1)
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Frobenius norm; used for gradient-norm logging.
    pub fn norm(&self) -> f64 {
        num_traits::Float::sqrt(self.data.iter().map(|v| v * v).sum::<f64>())
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    /// Input that receives no gradient.
    Const,
    /// Named input whose gradient is collected after backward.
    Leaf(String),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    /// Broadcast-add a `1 x c` row vector to every row.
    AddRowVec(usize, usize),
    /// Multiply row `i` of the left operand by entry `i` of an `n x 1` column.
    ScaleRows(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Silu(usize),
    Sqrt(usize),
    Exp(usize),
    RowSum(usize),
    SumAll(usize),
    SoftmaxRows(usize),
    LogSoftmaxRows(usize),
    ConcatCols(Vec<usize>),
    SliceCols(usize, usize, usize),
    /// Select rows by index; duplicate indices accumulate on backward.
    Gather(usize, Vec<usize>),
    /// Route row `p` to output row `idx[p]`, summing collisions.
    ScatterAdd(usize, Vec<usize>),
    /// Subtract the column-mean of each consecutive group of `g` rows.
    MeanCenterGroups(usize, usize),
    /// Same data, new shape; row-major order is preserved.
    Reshape(usize),
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Const => "const",
        Op::Leaf(_) => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::AddRowVec(..) => "add_row_vec",
        Op::ScaleRows(..) => "scale_rows",
        Op::MatMul(..) => "matmul",
        Op::Transpose(..) => "transpose",
        Op::Silu(..) => "silu",
        Op::Sqrt(..) => "sqrt",
        Op::Exp(..) => "exp",
        Op::RowSum(..) => "row_sum",
        Op::SumAll(..) => "sum_all",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::LogSoftmaxRows(..) => "log_softmax_rows",
        Op::ConcatCols(..) => "concat_cols",
        Op::SliceCols(..) => "slice_cols",
        Op::Gather(..) => "gather",
        Op::ScatterAdd(..) => "scatter_add",
        Op::MeanCenterGroups(..) => "mean_center_groups",
        Op::Reshape(..) => "reshape",
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Eager computation tape. Build a graph, read values, run [`Tape::backward`]
/// from a scalar output, then collect leaf gradients.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    poisoned: Option<usize>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + num_traits::Float::exp(-x))
    } else {
        let e = num_traits::Float::exp(x);
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len();
        if self.poisoned.is_none() && !value.is_finite() {
            self.poisoned = Some(idx);
        }
        self.nodes.push(Node { value, op });
        Var(idx)
    }

    fn val(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Node index where the first non-finite value appeared, if any.
    pub fn poisoned_at(&self) -> Option<usize> {
        self.poisoned
    }

    fn poison_error(&self, node: usize) -> DiffError {
        DiffError::NonFinite { node, op: String::from(op_name(&self.nodes[node].op)) }
    }

    /// Value of a node; fails if anything on the tape went non-finite.
    pub fn value(&self, v: Var) -> Result<&Tensor, DiffError> {
        match self.poisoned {
            Some(n) => Err(self.poison_error(n)),
            None => Ok(self.val(v)),
        }
    }

    /// Shape of a node without the finiteness check.
    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.val(v);
        (t.rows, t.cols)
    }

    // ---- inputs ----

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Const)
    }

    /// Differentiable input; its gradient is retrievable by name after
    /// backward.
    pub fn leaf(&mut self, name: &str, t: Tensor) -> Var {
        self.push(t, Op::Leaf(String::from(name)))
    }

    // ---- elementwise / broadcast ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "add shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x + y).collect();
        let t = Tensor::new(data, ta.rows, ta.cols);
        self.push(t, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "sub shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x - y).collect();
        let t = Tensor::new(data, ta.rows, ta.cols);
        self.push(t, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!((ta.rows, ta.cols), (tb.rows, tb.cols), "mul shape mismatch");
        let data = ta.data.iter().zip(&tb.data).map(|(x, y)| x * y).collect();
        let t = Tensor::new(data, ta.rows, ta.cols);
        self.push(t, Op::Mul(a.0, b.0))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.data.iter().map(|x| x * c).collect(), ta.rows, ta.cols);
        self.push(t, Op::Scale(a.0, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let ta = self.val(a);
        let t = Tensor::new(ta.data.iter().map(|x| x + c).collect(), ta.rows, ta.cols);
        self.push(t, Op::AddScalar(a.0))
    }

    /// `a (n x c) + b (1 x c)` broadcast over rows; the bias pattern.
    pub fn add_row_vec(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(tb.rows, 1, "add_row_vec needs a 1 x c right operand");
        assert_eq!(ta.cols, tb.cols, "add_row_vec width mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                *t.at_mut(r, c) += tb.data[c];
            }
        }
        self.push(t, Op::AddRowVec(a.0, b.0))
    }

    /// `a (n x c)` with row `i` multiplied by `s[i]` from an `n x 1` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Var {
        let (ta, ts) = (self.val(a), self.val(s));
        assert_eq!(ts.cols, 1, "scale_rows needs an n x 1 scale");
        assert_eq!(ta.rows, ts.rows, "scale_rows height mismatch");
        let mut t = ta.clone();
        for r in 0..t.rows {
            for c in 0..t.cols {
                *t.at_mut(r, c) *= ts.data[r];
            }
        }
        self.push(t, Op::ScaleRows(a.0, s.0))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.val(a), self.val(b));
        assert_eq!(ta.cols, tb.rows, "matmul inner dimension mismatch");
        let t = matmul_raw(ta, tb, false, false);
        self.push(t, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = transpose_raw(ta);
        self.push(t, Op::Transpose(a.0))
    }

    // ---- activations / pointwise nonlinear ----

    /// SiLU: `x * sigmoid(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data.iter().map(|&x| x * sigmoid(x)).collect();
        let t = Tensor::new(data, ta.rows, ta.cols);
        self.push(t, Op::Silu(a.0))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data.iter().map(|&x| num_traits::Float::sqrt(x)).collect();
        let t = Tensor::new(data, ta.rows, ta.cols);
        self.push(t, Op::Sqrt(a.0))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = ta.data.iter().map(|&x| num_traits::Float::exp(x)).collect();
        let t = Tensor::new(data, ta.rows, ta.cols);
        self.push(t, Op::Exp(a.0))
    }

    // ---- reductions ----

    pub fn row_sum(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let data = (0..ta.rows)
            .map(|r| (0..ta.cols).map(|c| ta.at(r, c)).sum())
            .collect();
        let t = Tensor::new(data, ta.rows, 1);
        self.push(t, Op::RowSum(a.0))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let t = Tensor::scalar(ta.data.iter().sum());
        self.push(t, Op::SumAll(a.0))
    }

    // ---- row-wise softmax family ----

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let mut t = Tensor::zeros(ta.rows, ta.cols);
        for r in 0..ta.rows {
            let m = (0..ta.cols).map(|c| ta.at(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..ta.cols {
                let e = num_traits::Float::exp(ta.at(r, c) - m);
                *t.at_mut(r, c) = e;
                z += e;
            }
            for c in 0..ta.cols {
                *t.at_mut(r, c) /= z;
            }
        }
        self.push(t, Op::SoftmaxRows(a.0))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let ta = self.val(a);
        let mut t = Tensor::zeros(ta.rows, ta.cols);
        for r in 0..ta.rows {
            let m = (0..ta.cols).map(|c| ta.at(r, c)).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = (0..ta.cols)
                .map(|c| num_traits::Float::exp(ta.at(r, c) - m))
                .sum();
            let lz = num_traits::Float::ln(z);
            for c in 0..ta.cols {
                *t.at_mut(r, c) = ta.at(r, c) - m - lz;
            }
        }
        self.push(t, Op::LogSoftmaxRows(a.0))
    }

    // ---- structural ----

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.val(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.val(*p).cols).sum();
        let mut t = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in parts {
            let tp = self.val(*p);
            assert_eq!(tp.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                for c in 0..tp.cols {
                    *t.at_mut(r, off + c) = tp.at(r, c);
                }
            }
            off += tp.cols;
        }
        self.push(t, Op::ConcatCols(parts.iter().map(|p| p.0).collect()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let ta = self.val(a);
        assert!(start + len <= ta.cols, "slice_cols out of range");
        let mut t = Tensor::zeros(ta.rows, len);
        for r in 0..ta.rows {
            for c in 0..len {
                *t.at_mut(r, c) = ta.at(r, start + c);
            }
        }
        self.push(t, Op::SliceCols(a.0, start, len))
    }

    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let ta = self.val(a);
        let mut t = Tensor::zeros(idx.len(), ta.cols);
        for (p, &i) in idx.iter().enumerate() {
            assert!(i < ta.rows, "gather index out of range");
            for c in 0..ta.cols {
                *t.at_mut(p, c) = ta.at(i, c);
            }
        }
        self.push(t, Op::Gather(a.0, idx.to_vec()))
    }

    /// Sum row `p` of `a` into output row `idx[p]` of an `out_rows x c`
    /// result; the adjoint of [`Tape::gather`].
    pub fn scatter_add(&mut self, a: Var, idx: &[usize], out_rows: usize) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.rows, idx.len(), "scatter_add index length mismatch");
        let mut t = Tensor::zeros(out_rows, ta.cols);
        for (p, &i) in idx.iter().enumerate() {
            assert!(i < out_rows, "scatter_add index out of range");
            for c in 0..ta.cols {
                *t.at_mut(i, c) += ta.at(p, c);
            }
        }
        self.push(t, Op::ScatterAdd(a.0, idx.to_vec()))
    }

    /// Reinterpret an `n x c` value as `new_rows x (n*c/new_rows)`; row-major
    /// data order is unchanged, so this is free in both directions.
    pub fn reshape(&mut self, a: Var, new_rows: usize, new_cols: usize) -> Var {
        let ta = self.val(a);
        assert_eq!(ta.rows * ta.cols, new_rows * new_cols, "reshape size mismatch");
        let t = Tensor::new(ta.data.clone(), new_rows, new_cols);
        self.push(t, Op::Reshape(a.0))
    }

    /// Subtract the column-mean of each consecutive block of `group` rows.
    /// The projection is symmetric, so the backward pass applies the same
    /// centering to the gradient.
    pub fn mean_center_groups(&mut self, a: Var, group: usize) -> Var {
        let ta = self.val(a);
        assert!(group > 0 && ta.rows % group == 0, "rows must split into groups");
        let t = mean_center_raw(ta, group);
        self.push(t, Op::MeanCenterGroups(a.0, group))
    }

    // ---- backward ----

    /// Reverse sweep from a `1 x 1` output. Returns the gradient tensor for
    /// every node; read leaf gradients via [`Tape::leaf_grads`] or index the
    /// returned vector by `Var`.
    pub fn backward(&mut self, out: Var) -> Result<Vec<Tensor>, DiffError> {
        if let Some(n) = self.poisoned {
            return Err(self.poison_error(n));
        }
        let ot = self.val(out);
        if ot.rows != 1 || ot.cols != 1 {
            return Err(DiffError::NonScalarOutput { rows: ot.rows, cols: ot.cols });
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.rows, n.value.cols))
            .collect();
        grads[out.0].data[0] = 1.0;

        for i in (0..=out.0).rev() {
            if grads[i].data.iter().all(|&g| g == 0.0) {
                continue;
            }
            let g = grads[i].clone();
            match self.nodes[i].op.clone() {
                Op::Const | Op::Leaf(_) => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads[a], &g, 1.0);
                    accumulate(&mut grads[b], &g, 1.0);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads[a], &g, 1.0);
                    accumulate(&mut grads[b], &g, -1.0);
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                    for (k, gv) in g.data.iter().enumerate() {
                        grads[a].data[k] += gv * tb.data[k];
                        grads[b].data[k] += gv * ta.data[k];
                    }
                }
                Op::Scale(a, c) => accumulate(&mut grads[a], &g, c),
                Op::AddScalar(a) => accumulate(&mut grads[a], &g, 1.0),
                Op::AddRowVec(a, b) => {
                    accumulate(&mut grads[a], &g, 1.0);
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            grads[b].data[c] += g.at(r, c);
                        }
                    }
                }
                Op::ScaleRows(a, s) => {
                    let (ta, ts) = (self.nodes[a].value.clone(), self.nodes[s].value.clone());
                    for r in 0..g.rows {
                        for c in 0..g.cols {
                            *grads[a].at_mut(r, c) += g.at(r, c) * ts.data[r];
                            grads[s].data[r] += g.at(r, c) * ta.at(r, c);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.nodes[a].value.clone(), self.nodes[b].value.clone());
                    let da = matmul_raw(&g, &tb, false, true);
                    let db = matmul_raw(&ta, &g, true, false);
                    accumulate(&mut grads[a], &da, 1.0);
                    accumulate(&mut grads[b], &db, 1.0);
                }
                Op::Transpose(a) => {
                    let gt = transpose_raw(&g);
                    accumulate(&mut grads[a], &gt, 1.0);
                }
                Op::Silu(a) => {
                    let ta = self.nodes[a].value.clone();
                    for (k, gv) in g.data.iter().enumerate() {
                        let x = ta.data[k];
                        let s = sigmoid(x);
                        grads[a].data[k] += gv * (s * (1.0 + x * (1.0 - s)));
                    }
                }
                Op::Sqrt(a) => {
                    let y = self.nodes[i].value.clone();
                    for (k, gv) in g.data.iter().enumerate() {
                        grads[a].data[k] += gv * 0.5 / y.data[k];
                    }
                }
                Op::Exp(a) => {
                    let y = self.nodes[i].value.clone();
                    for (k, gv) in g.data.iter().enumerate() {
                        grads[a].data[k] += gv * y.data[k];
                    }
                }
                Op::RowSum(a) => {
                    let cols = self.nodes[a].value.cols;
                    for r in 0..g.rows {
                        for c in 0..cols {
                            *grads[a].at_mut(r, c) += g.data[r];
                        }
                    }
                }
                Op::SumAll(a) => {
                    let gv = g.data[0];
                    for v in grads[a].data.iter_mut() {
                        *v += gv;
                    }
                }
                Op::SoftmaxRows(a) => {
                    // dL/dx = y ⊙ (g - rowsum(g ⊙ y))
                    let y = self.nodes[i].value.clone();
                    for r in 0..g.rows {
                        let dot: f64 = (0..g.cols).map(|c| g.at(r, c) * y.at(r, c)).sum();
                        for c in 0..g.cols {
                            *grads[a].at_mut(r, c) += y.at(r, c) * (g.at(r, c) - dot);
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    // dL/dx = g - softmax(x) * rowsum(g)
                    let y = self.nodes[i].value.clone();
                    for r in 0..g.rows {
                        let gsum: f64 = (0..g.cols).map(|c| g.at(r, c)).sum();
                        for c in 0..g.cols {
                            let p = num_traits::Float::exp(y.at(r, c));
                            *grads[a].at_mut(r, c) += g.at(r, c) - p * gsum;
                        }
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p].value.cols;
                        for r in 0..g.rows {
                            for c in 0..w {
                                *grads[p].at_mut(r, c) += g.at(r, off + c);
                            }
                        }
                        off += w;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    for r in 0..g.rows {
                        for c in 0..len {
                            *grads[a].at_mut(r, start + c) += g.at(r, c);
                        }
                    }
                }
                Op::Gather(a, idx) => {
                    for (p, &src) in idx.iter().enumerate() {
                        for c in 0..g.cols {
                            *grads[a].at_mut(src, c) += g.at(p, c);
                        }
                    }
                }
                Op::ScatterAdd(a, idx) => {
                    for (p, &dst) in idx.iter().enumerate() {
                        for c in 0..g.cols {
                            *grads[a].at_mut(p, c) += g.at(dst, c);
                        }
                    }
                }
                Op::MeanCenterGroups(a, group) => {
                    let cg = mean_center_raw(&g, group);
                    accumulate(&mut grads[a], &cg, 1.0);
                }
                Op::Reshape(a) => {
                    for (k, gv) in g.data.iter().enumerate() {
                        grads[a].data[k] += gv;
                    }
                }
            }
        }
        Ok(grads)
    }

}

/// Collect `(name, gradient)` pairs for every leaf on the tape.
pub fn leaf_gradients<'a>(tape: &'a Tape, grads: &'a [Tensor]) -> Vec<(&'a str, &'a Tensor)> {
    tape.nodes
        .iter()
        .enumerate()
        .filter_map(|(i, n)| match &n.op {
            Op::Leaf(name) => Some((name.as_str(), &grads[i])),
            _ => None,
        })
        .collect()
}

fn accumulate(dst: &mut Tensor, src: &Tensor, scale: f64) {
    debug_assert_eq!((dst.rows, dst.cols), (src.rows, src.cols));
    for (d, s) in dst.data.iter_mut().zip(&src.data) {
        *d += s * scale;
    }
}

fn transpose_raw(a: &Tensor) -> Tensor {
    let mut t = Tensor::zeros(a.cols, a.rows);
    for r in 0..a.rows {
        for c in 0..a.cols {
            *t.at_mut(c, r) = a.at(r, c);
        }
    }
    t
}

fn matmul_raw(a: &Tensor, b: &Tensor, trans_a: bool, trans_b: bool) -> Tensor {
    let (ar, ac) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (br, bc) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(ac, br, "matmul inner dimension mismatch");
    let mut out = Tensor::zeros(ar, bc);
    for i in 0..ar {
        for k in 0..ac {
            let av = if trans_a { a.at(k, i) } else { a.at(i, k) };
            if av == 0.0 {
                continue;
            }
            for j in 0..bc {
                let bv = if trans_b { b.at(j, k) } else { b.at(k, j) };
                *out.at_mut(i, j) += av * bv;
            }
        }
    }
    out
}

fn mean_center_raw(a: &Tensor, group: usize) -> Tensor {
    let mut t = a.clone();
    let n_groups = a.rows / group;
    for gi in 0..n_groups {
        for c in 0..a.cols {
            let mean: f64 = (0..group).map(|r| a.at(gi * group + r, c)).sum::<f64>()
                / group as f64;
            for r in 0..group {
                *t.at_mut(gi * group + r, c) -= mean;
            }
        }
    }
    t
}
