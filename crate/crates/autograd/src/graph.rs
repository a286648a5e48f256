//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is pushed, and [`Graph::backward`] walks the tape in reverse. Graphs are
//! cheap to build and are meant to be thrown away after one step.

use crate::matrix::Matrix;
use crate::params::{ParamId, ParamStore};

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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `a[r×c] + b[1×c]`
    AddRow(Var, Var),
    /// `a[r×c] * b[r×1]`, column vector broadcast across columns.
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    /// `a * s` where `s` is a 1×1 node.
    ScaleBy(Var, Var),
    /// `a + s` where `s` is a 1×1 node.
    AddBy(Var, Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    SoftmaxRows(Var),
    /// Mean over rows of `-log softmax(row)[label]`.
    CrossEntropy(Var, Vec<usize>),
    SumAll(Var),
    MeanAll(Var),
    SumCols(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    PadRows(Var, usize),
    /// Rows are `x[i]` for each index, with `None` meaning a zero row.
    GatherRows(Var, Vec<Option<usize>>),
    Unfold(Var, UnfoldSpec),
    L2NormalizeRows(Var),
    Reshape(Var),
    DiagFromRow(Var),
}

#[derive(Clone, Copy, Debug)]
struct UnfoldSpec {
    kernel: usize,
    pad_left: usize,
    row_start: usize,
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Eager tape of matrix operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient of the loss wrt `v`, or `None` if `v` does not influence it.
    pub fn of(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    /// Accumulates leaf gradients per parameter, ordered like the store.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        for (grad, param) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(p)) = (grad, param) {
                out[p.index()].add_assign(g);
            }
        }
        out
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

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.shape(), (1, 1), "not a scalar node");
        m.data()[0]
    }

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        let needs_grad = self.op_inputs(&op).iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulCol(a, b)
            | Op::ScaleBy(a, b)
            | Op::AddBy(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Sigmoid(a)
            | Op::Tanh(a)
            | Op::Relu(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::SoftmaxRows(a)
            | Op::CrossEntropy(a, _)
            | Op::SumAll(a)
            | Op::MeanAll(a)
            | Op::SumCols(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _)
            | Op::PadRows(a, _)
            | Op::GatherRows(a, _)
            | Op::Unfold(a, _)
            | Op::L2NormalizeRows(a)
            | Op::Reshape(a)
            | Op::DiagFromRow(a) => vec![*a],
            Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
        }
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input leaf (for gradient checks on inputs).
    pub fn input(&mut self, value: Matrix) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf holding a copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            needs_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).transpose();
        self.push(v, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (r, c) = self.shape(a);
        assert_eq!(self.shape(row), (1, c), "add_row expects a 1x{c} row");
        let b = self.value(row).data().to_vec();
        let mut v = self.value(a).clone();
        for i in 0..r {
            for (x, y) in v.row_mut(i).iter_mut().zip(&b) {
                *x += y;
            }
        }
        self.push(v, Op::AddRow(a, row))
    }

    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (r, _) = self.shape(a);
        assert_eq!(self.shape(col), (r, 1), "mul_col expects a {r}x1 column");
        let s = self.value(col).data().to_vec();
        let mut v = self.value(a).clone();
        for (i, &si) in s.iter().enumerate() {
            for x in v.row_mut(i) {
                *x *= si;
            }
        }
        self.push(v, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x * s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn scale_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x * k);
        self.push(v, Op::ScaleBy(a, s))
    }

    pub fn add_by(&mut self, a: Var, s: Var) -> Var {
        let k = self.scalar(s);
        let v = self.value(a).map(|x| x + k);
        self.push(v, Op::AddBy(a, s))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = softmax_rows(self.value(a));
        self.push(v, Op::SoftmaxRows(a))
    }

    /// Mean cross-entropy of row-wise softmax against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let x = self.value(logits);
        assert_eq!(x.rows(), labels.len(), "one label per row");
        let mut total = 0.0;
        for (r, &label) in labels.iter().enumerate() {
            let row = x.row(r);
            assert!(label < row.len(), "label {label} out of range");
            total += log_sum_exp(row) - row[label];
        }
        let v = Matrix::scalar(total / labels.len() as f64);
        self.push(v, Op::CrossEntropy(logits, labels.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Matrix::scalar(self.value(a).mean());
        self.push(v, Op::MeanAll(a))
    }

    /// Row sums as an `r×1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let v = Matrix::column_vector((0..m.rows()).map(|r| m.row(r).iter().sum()).collect());
        self.push(v, Op::SumCols(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.shape(parts[0]).0;
        let cols: usize = parts
            .iter()
            .map(|&p| {
                assert_eq!(self.shape(p).0, rows, "concat_cols row mismatch");
                self.shape(p).1
            })
            .sum();
        let mut v = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                v.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.shape(parts[0]).1;
        let mut data = Vec::new();
        for &p in parts {
            assert_eq!(self.shape(p).1, cols, "concat_rows column mismatch");
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / cols.max(1);
        let v = Matrix::from_vec(rows, cols, data);
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice_rows(start, len);
        self.push(v, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols(), "column slice out of range");
        let v = Matrix::from_fn(m.rows(), len, |r, c| m.get(r, start + c));
        self.push(v, Op::SliceCols(a, start))
    }

    /// Inserts `before` zero rows above and `after` zero rows below.
    pub fn pad_rows(&mut self, a: Var, before: usize, after: usize) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(m.rows() + before + after, m.cols());
        for r in 0..m.rows() {
            v.row_mut(r + before).copy_from_slice(m.row(r));
        }
        self.push(v, Op::PadRows(a, before))
    }

    pub fn gather_rows(&mut self, a: Var, index: &[Option<usize>]) -> Var {
        let m = self.value(a);
        let mut v = Matrix::zeros(index.len(), m.cols());
        for (r, i) in index.iter().enumerate() {
            if let Some(i) = *i {
                v.row_mut(r).copy_from_slice(m.row(i));
            }
        }
        self.push(v, Op::GatherRows(a, index.to_vec()))
    }

    /// Time-axis im2col. Output row `j` (for `j` in `0..rows`) concatenates input
    /// rows `row_start + j - pad_left + 0..kernel`, with out-of-range rows read as
    /// zeros. A 1-D convolution is then `unfold(x) · W`.
    pub fn unfold(
        &mut self,
        a: Var,
        kernel: usize,
        pad_left: usize,
        row_start: usize,
        rows: usize,
    ) -> Var {
        let m = self.value(a);
        let c = m.cols();
        let mut v = Matrix::zeros(rows, kernel * c);
        for j in 0..rows {
            for k in 0..kernel {
                let src = (row_start + j + k) as isize - pad_left as isize;
                if src >= 0 && (src as usize) < m.rows() {
                    v.row_mut(j)[k * c..(k + 1) * c].copy_from_slice(m.row(src as usize));
                }
            }
        }
        let spec = UnfoldSpec {
            kernel,
            pad_left,
            row_start,
        };
        self.push(v, Op::Unfold(a, spec))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut v = m.clone();
        for r in 0..m.rows() {
            let n = norm(m.row(r));
            for x in v.row_mut(r) {
                *x /= n;
            }
        }
        self.push(v, Op::L2NormalizeRows(a))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let v = self.value(a).clone().reshape(rows, cols);
        self.push(v, Op::Reshape(a))
    }

    /// `1×n` row to an `n×n` diagonal matrix.
    pub fn diag(&mut self, a: Var) -> Var {
        let m = self.value(a);
        assert_eq!(m.rows(), 1, "diag expects a row vector");
        let n = m.cols();
        let mut v = Matrix::zeros(n, n);
        for i in 0..n {
            v.set(i, i, m.data()[i]);
        }
        self.push(v, Op::DiagFromRow(a))
    }

    // Composite helpers.

    /// `x · w + b` with `b` a bias row.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let s = self.square(d);
        self.mean(s)
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Matrix>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        }
    }

    fn backprop_node(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let wants = |v: Var| self.nodes[v.0].needs_grad;
        let mut acc = |v: Var, delta: Matrix| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if wants(*a) {
                    acc(*a, g.matmul_t(val(*b)));
                }
                if wants(*b) {
                    acc(*b, val(*a).t_matmul(g));
                }
            }
            Op::Transpose(a) => acc(*a, g.transpose()),
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y));
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y));
                }
            }
            Op::AddRow(a, b) => {
                acc(*a, g.clone());
                if wants(*b) {
                    let mut row = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, x) in row.data_mut().iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    acc(*b, row);
                }
            }
            Op::MulCol(a, col) => {
                let s = val(*col);
                if wants(*a) {
                    let mut ga = g.clone();
                    for r in 0..g.rows() {
                        let k = s.data()[r];
                        for x in ga.row_mut(r) {
                            *x *= k;
                        }
                    }
                    acc(*a, ga);
                }
                if wants(*col) {
                    let av = val(*a);
                    let gc = (0..g.rows())
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(x, y)| x * y).sum())
                        .collect();
                    acc(*col, Matrix::column_vector(gc));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::ScaleBy(a, s) => {
                let k = val(*s).data()[0];
                if wants(*a) {
                    acc(*a, g.map(|x| x * k));
                }
                if wants(*s) {
                    let d: f64 = g.data().iter().zip(val(*a).data()).map(|(x, y)| x * y).sum();
                    acc(*s, Matrix::scalar(d));
                }
            }
            Op::AddBy(a, s) => {
                acc(*a, g.clone());
                acc(*s, Matrix::scalar(g.sum()));
            }
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y * (1.0 - y))),
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |x, y| x * (1.0 - y * y))),
            Op::Relu(a) => acc(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })),
            Op::Exp(a) => acc(*a, g.zip_map(&node.value, |x, y| x * y)),
            Op::Log(a) => acc(*a, g.zip_map(val(*a), |x, y| x / y)),
            Op::Square(a) => acc(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)),
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = yi * (gi - dot);
                    }
                }
                acc(*a, ga);
            }
            Op::CrossEntropy(a, labels) => {
                let scale = g.data()[0] / labels.len() as f64;
                let mut ga = softmax_rows(val(*a));
                for (r, &label) in labels.iter().enumerate() {
                    let row = ga.row_mut(r);
                    row[label] -= 1.0;
                    for x in row {
                        *x *= scale;
                    }
                }
                acc(*a, ga);
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.data()[0]));
            }
            Op::MeanAll(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::filled(r, c, g.data()[0] / (r * c) as f64));
            }
            Op::SumCols(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, Matrix::from_fn(r, c, |i, _| g.data()[i]));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let (r, c) = val(p).shape();
                    if wants(p) {
                        acc(p, Matrix::from_fn(r, c, |i, j| g.get(i, off + j)));
                    }
                    off += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let r = val(p).rows();
                    if wants(p) {
                        acc(p, g.slice_rows(off, r));
                    }
                    off += r;
                }
            }
            Op::SliceRows(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..g.rows() {
                    ga.row_mut(start + i).copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::SliceCols(a, start) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for i in 0..r {
                    ga.row_mut(i)[*start..start + g.cols()].copy_from_slice(g.row(i));
                }
                acc(*a, ga);
            }
            Op::PadRows(a, before) => {
                let r = val(*a).rows();
                acc(*a, g.slice_rows(*before, r));
            }
            Op::GatherRows(a, index) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for (j, i) in index.iter().enumerate() {
                    if let Some(i) = *i {
                        for (o, x) in ga.row_mut(i).iter_mut().zip(g.row(j)) {
                            *o += x;
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Unfold(a, spec) => {
                let (r, c) = val(*a).shape();
                let mut ga = Matrix::zeros(r, c);
                for j in 0..g.rows() {
                    for k in 0..spec.kernel {
                        let src = (spec.row_start + j + k) as isize - spec.pad_left as isize;
                        if src >= 0 && (src as usize) < r {
                            let gs = &g.row(j)[k * c..(k + 1) * c];
                            for (o, x) in ga.row_mut(src as usize).iter_mut().zip(gs) {
                                *o += x;
                            }
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let y = &node.value;
                let mut ga = Matrix::zeros(x.rows(), x.cols());
                for r in 0..x.rows() {
                    let n = norm(x.row(r));
                    let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(p, q)| p * q).sum();
                    for ((o, gi), yi) in ga.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                        *o = (gi - yi * dot) / n;
                    }
                }
                acc(*a, ga);
            }
            Op::Reshape(a) => {
                let (r, c) = val(*a).shape();
                acc(*a, g.clone().reshape(r, c));
            }
            Op::DiagFromRow(a) => {
                let n = g.rows();
                acc(*a, Matrix::row_vector((0..n).map(|i| g.get(i, i)).collect()));
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    for r in 0..m.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            total += *x;
        }
        for x in row.iter_mut() {
            *x /= total;
        }
    }
    out
}

fn norm(row: &[f64]) -> f64 {
    row.iter().map(|x| x * x).sum::<f64>().sqrt()
}
