//! Dense `f64` tensors and a reverse-mode automatic differentiation tape.
//!
//! The tape records tensor-valued operations during a forward pass; a single
//! backward sweep from a scalar loss accumulates gradients for every node.
//! Graphs are built and consumed single-threaded, one tape per forward pass,
//! and the tape is dropped (freeing all intermediates) once gradients have
//! been extracted.
//!
//! Only the operations the models in this crate need are provided: matrix
//! multiply, broadcast add, elementwise arithmetic, the activations, a few
//! column manipulations for mixing and categorical heads, and scalar
//! reductions.

mod check;
mod nn;
mod optim;

pub use check::{max_rel_error, numeric_gradient};
pub use nn::{
    collect_grads, forward_on_tape, mlp_forward, recurrent_step, Activation, Architecture, Layer,
    ModelParams,
};
pub use optim::{rmsprop_step, OptimizerState};

use std::cell::RefCell;

// ── tensor ───────────────────────────────────────────────────────────────

/// A dense row-major matrix of `f64`. Vectors are `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "tensor dims must be positive");
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length mismatch");
        assert!(rows > 0 && cols > 0, "tensor dims must be positive");
        Tensor { rows, cols, data }
    }

    /// A `1 x n` row vector.
    pub fn vector(values: &[f64]) -> Self {
        Tensor::from_vec(1, values.len(), values.to_vec())
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![v; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean norm of all entries.
    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

// ── tape ─────────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; only valid for
/// the tape that produced it.
#[derive(Clone, Copy, Debug)]
pub struct Var {
    idx: usize,
    rows: usize,
    cols: usize,
}

impl Var {
    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }
}

enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    /// `[m,n] + [1,n]`, the row broadcast used for biases.
    AddRow(usize, usize),
    Sub(usize, usize),
    MulElem(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddScalar(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Relu(usize),
    Elu(usize),
    Exp(usize),
    Abs(usize),
    Clamp(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    /// Per-row column pick: `out[r, 0] = in[r, idx[r]]`.
    GatherCols(usize, Vec<usize>),
    ConcatCols(Vec<(usize, usize)>),
    SliceCols(usize, usize, usize),
    Reshape(usize),
    /// `[m,n] -> [m, n*times]`, the whole row tiled.
    RepeatCols(usize, usize),
    /// `[m,n] -> [m, n/block]`, consecutive blocks summed.
    SumBlockCols(usize, usize),
    LogSoftmaxRows(usize),
}

struct Node {
    op: Op,
    rows: usize,
    cols: usize,
    value: Vec<f64>,
}

/// Reverse-mode tape. All operations append a node holding the forward value;
/// `backward` replays them in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    fn push(&self, op: Op, rows: usize, cols: usize, value: Vec<f64>) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            op,
            rows,
            cols,
            value,
        });
        Var {
            idx: nodes.len() - 1,
            rows,
            cols,
        }
    }

    fn with_value<R>(&self, v: Var, f: impl FnOnce(&[f64]) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[v.idx].value)
    }

    /// Copy a recorded value out as a [`Tensor`].
    pub fn value(&self, v: Var) -> Tensor {
        self.with_value(v, |d| Tensor::from_vec(v.rows, v.cols, d.to_vec()))
    }

    /// Scalar convenience accessor for `1 x 1` nodes.
    pub fn scalar(&self, v: Var) -> f64 {
        assert_eq!((v.rows, v.cols), (1, 1), "scalar() on non-scalar node");
        self.with_value(v, |d| d[0])
    }

    pub fn leaf(&self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.rows, t.cols, t.data.clone())
    }

    pub fn leaf_owned(&self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.rows, t.cols, t.data)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Var {
        assert_eq!(a.cols, b.rows, "matmul inner dims: {} vs {}", a.cols, b.rows);
        let (m, k, n) = (a.rows, a.cols, b.cols);
        let mut out = vec![0.0; m * n];
        {
            let nodes = self.nodes.borrow();
            let av = &nodes[a.idx].value;
            let bv = &nodes[b.idx].value;
            for i in 0..m {
                for p in 0..k {
                    let x = av[i * k + p];
                    if x == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for (o, bb) in orow.iter_mut().zip(brow) {
                        *o += x * bb;
                    }
                }
            }
        }
        self.push(Op::MatMul(a.idx, b.idx), m, n, out)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "add shape mismatch");
        let out = self.zip(a, b, |x, y| x + y);
        self.push(Op::Add(a.idx, b.idx), a.rows, a.cols, out)
    }

    /// `a + row`, where `row` is `1 x cols` broadcast over the rows of `a`.
    pub fn add_row(&self, a: Var, row: Var) -> Var {
        assert_eq!(row.rows, 1, "add_row rhs must be a row vector");
        assert_eq!(a.cols, row.cols, "add_row width mismatch");
        let nodes = self.nodes.borrow();
        let av = &nodes[a.idx].value;
        let rv = &nodes[row.idx].value;
        let mut out = Vec::with_capacity(av.len());
        for r in 0..a.rows {
            for c in 0..a.cols {
                out.push(av[r * a.cols + c] + rv[c]);
            }
        }
        drop(nodes);
        self.push(Op::AddRow(a.idx, row.idx), a.rows, a.cols, out)
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "sub shape mismatch");
        let out = self.zip(a, b, |x, y| x - y);
        self.push(Op::Sub(a.idx, b.idx), a.rows, a.cols, out)
    }

    pub fn mul_elem(&self, a: Var, b: Var) -> Var {
        assert_eq!((a.rows, a.cols), (b.rows, b.cols), "mul_elem shape mismatch");
        let out = self.zip(a, b, |x, y| x * y);
        self.push(Op::MulElem(a.idx, b.idx), a.rows, a.cols, out)
    }

    pub fn neg(&self, a: Var) -> Var {
        let out = self.map(a, |x| -x);
        self.push(Op::Neg(a.idx), a.rows, a.cols, out)
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| c * x);
        self.push(Op::Scale(a.idx, c), a.rows, a.cols, out)
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let out = self.map(a, |x| x + c);
        self.push(Op::AddScalar(a.idx, c), a.rows, a.cols, out)
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.map(a, f64::tanh);
        self.push(Op::Tanh(a.idx), a.rows, a.cols, out)
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.map(a, |x| 1.0 / (1.0 + (-x).exp()));
        self.push(Op::Sigmoid(a.idx), a.rows, a.cols, out)
    }

    pub fn relu(&self, a: Var) -> Var {
        let out = self.map(a, |x| x.max(0.0));
        self.push(Op::Relu(a.idx), a.rows, a.cols, out)
    }

    pub fn elu(&self, a: Var) -> Var {
        let out = self.map(a, |x| if x > 0.0 { x } else { x.exp() - 1.0 });
        self.push(Op::Elu(a.idx), a.rows, a.cols, out)
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.map(a, f64::exp);
        self.push(Op::Exp(a.idx), a.rows, a.cols, out)
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.map(a, f64::abs);
        self.push(Op::Abs(a.idx), a.rows, a.cols, out)
    }

    /// Clamp entries into `[lo, hi]`; gradient passes only strictly inside.
    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        assert!(lo < hi);
        let out = self.map(a, |x| x.clamp(lo, hi));
        self.push(Op::Clamp(a.idx, lo, hi), a.rows, a.cols, out)
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.with_value(a, |d| d.iter().sum());
        self.push(Op::Sum(a.idx), 1, 1, vec![s])
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = (a.rows * a.cols) as f64;
        let s: f64 = self.with_value(a, |d| d.iter().sum());
        self.push(Op::Mean(a.idx), 1, 1, vec![s / n])
    }

    /// Per-row element pick: `out[r, 0] = a[r, idx[r]]`.
    pub fn gather_cols(&self, a: Var, idx: &[usize]) -> Var {
        assert_eq!(idx.len(), a.rows, "gather_cols needs one index per row");
        assert!(idx.iter().all(|&i| i < a.cols), "gather_cols index range");
        let out = self.with_value(a, |d| {
            idx.iter()
                .enumerate()
                .map(|(r, &c)| d[r * a.cols + c])
                .collect::<Vec<_>>()
        });
        self.push(Op::GatherCols(a.idx, idx.to_vec()), a.rows, 1, out)
    }

    pub fn concat_cols(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = parts[0].rows;
        assert!(parts.iter().all(|p| p.rows == rows), "concat_cols row mismatch");
        let total: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = Vec::with_capacity(rows * total);
        {
            let nodes = self.nodes.borrow();
            for r in 0..rows {
                for p in parts {
                    let v = &nodes[p.idx].value;
                    out.extend_from_slice(&v[r * p.cols..(r + 1) * p.cols]);
                }
            }
        }
        let meta = parts.iter().map(|p| (p.idx, p.cols)).collect();
        self.push(Op::ConcatCols(meta), rows, total, out)
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Var {
        assert!(start + len <= a.cols, "slice_cols out of range");
        let out = self.with_value(a, |d| {
            let mut out = Vec::with_capacity(a.rows * len);
            for r in 0..a.rows {
                out.extend_from_slice(&d[r * a.cols + start..r * a.cols + start + len]);
            }
            out
        });
        self.push(Op::SliceCols(a.idx, start, len), a.rows, len, out)
    }

    /// Reinterpret the row-major buffer with a new shape of equal size.
    pub fn reshape(&self, a: Var, rows: usize, cols: usize) -> Var {
        assert_eq!(rows * cols, a.rows * a.cols, "reshape size mismatch");
        let out = self.with_value(a, |d| d.to_vec());
        self.push(Op::Reshape(a.idx), rows, cols, out)
    }

    /// Tile the whole row `times` times: `[m,n] -> [m, n*times]`.
    pub fn repeat_cols(&self, a: Var, times: usize) -> Var {
        assert!(times > 0);
        let mut out = Vec::with_capacity(a.rows * a.cols * times);
        self.with_value(a, |d| {
            for r in 0..a.rows {
                let row = &d[r * a.cols..(r + 1) * a.cols];
                for _ in 0..times {
                    out.extend_from_slice(row);
                }
            }
        });
        self.push(Op::RepeatCols(a.idx, times), a.rows, a.cols * times, out)
    }

    /// Sum consecutive column blocks: `[m, n] -> [m, n/block]`.
    pub fn sum_block_cols(&self, a: Var, block: usize) -> Var {
        assert!(block > 0 && a.cols % block == 0, "sum_block_cols divisibility");
        let groups = a.cols / block;
        let mut out = Vec::with_capacity(a.rows * groups);
        self.with_value(a, |d| {
            for r in 0..a.rows {
                for g in 0..groups {
                    let base = r * a.cols + g * block;
                    out.push(d[base..base + block].iter().sum());
                }
            }
        });
        self.push(Op::SumBlockCols(a.idx, block), a.rows, groups, out)
    }

    /// Row-wise log-softmax with max subtraction for stability.
    pub fn log_softmax_rows(&self, a: Var) -> Var {
        let mut out = Vec::with_capacity(a.rows * a.cols);
        self.with_value(a, |d| {
            for r in 0..a.rows {
                let row = &d[r * a.cols..(r + 1) * a.cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
        });
        self.push(Op::LogSoftmaxRows(a.idx), a.rows, a.cols, out)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.with_value(a, |d| d.iter().map(|&x| f(x)).collect())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let nodes = self.nodes.borrow();
        let av = &nodes[a.idx].value;
        let bv = &nodes[b.idx].value;
        av.iter().zip(bv).map(|(&x, &y)| f(x, y)).collect()
    }

    /// Reverse sweep from a scalar loss. Nodes the loss does not depend on
    /// keep a zero gradient.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!((loss.rows, loss.cols), (1, 1), "backward needs a scalar loss");
        let nodes = self.nodes.borrow();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.idx] = Some(vec![1.0]);

        for i in (0..=loss.idx).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, n) = (node.rows, node.cols);
                    let k = nodes[*a].cols;
                    // dA = dC * B^T
                    {
                        let bv = &nodes[*b].value;
                        let da = ensure(&mut grads, *a, m * k);
                        for r in 0..m {
                            for p in 0..k {
                                let brow = &bv[p * n..(p + 1) * n];
                                let grow = &g[r * n..(r + 1) * n];
                                let mut acc = 0.0;
                                for (gg, bb) in grow.iter().zip(brow) {
                                    acc += gg * bb;
                                }
                                da[r * k + p] += acc;
                            }
                        }
                    }
                    // dB = A^T * dC
                    {
                        let av = &nodes[*a].value;
                        let db = ensure(&mut grads, *b, k * n);
                        for r in 0..m {
                            for p in 0..k {
                                let x = av[r * k + p];
                                if x == 0.0 {
                                    continue;
                                }
                                let grow = &g[r * n..(r + 1) * n];
                                let drow = &mut db[p * n..(p + 1) * n];
                                for (dd, gg) in drow.iter_mut().zip(grow) {
                                    *dd += x * gg;
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::AddRow(a, row) => {
                    accumulate(&mut grads, *a, &g);
                    let cols = node.cols;
                    let dr = ensure(&mut grads, *row, cols);
                    for r in 0..node.rows {
                        for c in 0..cols {
                            dr[c] += g[r * cols + c];
                        }
                    }
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let db = ensure(&mut grads, *b, g.len());
                    for (d, gg) in db.iter_mut().zip(&g) {
                        *d -= gg;
                    }
                }
                Op::MulElem(a, b) => {
                    {
                        let bv = &nodes[*b].value;
                        let da = ensure(&mut grads, *a, g.len());
                        for ((d, gg), bb) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gg * bb;
                        }
                    }
                    {
                        let av = &nodes[*a].value;
                        let db = ensure(&mut grads, *b, g.len());
                        for ((d, gg), aa) in db.iter_mut().zip(&g).zip(av) {
                            *d += gg * aa;
                        }
                    }
                }
                Op::Neg(a) => {
                    let da = ensure(&mut grads, *a, g.len());
                    for (d, gg) in da.iter_mut().zip(&g) {
                        *d -= gg;
                    }
                }
                Op::Scale(a, c) => {
                    let da = ensure(&mut grads, *a, g.len());
                    for (d, gg) in da.iter_mut().zip(&g) {
                        *d += c * gg;
                    }
                }
                Op::AddScalar(a, _) => accumulate(&mut grads, *a, &g),
                Op::Tanh(a) => {
                    let da = ensure(&mut grads, *a, g.len());
                    for ((d, gg), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gg * (1.0 - y * y);
                    }
                }
                Op::Sigmoid(a) => {
                    let da = ensure(&mut grads, *a, g.len());
                    for ((d, gg), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gg * y * (1.0 - y);
                    }
                }
                Op::Relu(a) => {
                    let xv = &nodes[*a].value;
                    let da = ensure(&mut grads, *a, g.len());
                    for ((d, gg), x) in da.iter_mut().zip(&g).zip(xv) {
                        if *x > 0.0 {
                            *d += gg;
                        }
                    }
                }
                Op::Elu(a) => {
                    let xv = &nodes[*a].value;
                    let da = ensure(&mut grads, *a, g.len());
                    for (((d, gg), x), y) in da.iter_mut().zip(&g).zip(xv).zip(&node.value) {
                        *d += if *x > 0.0 { *gg } else { gg * (y + 1.0) };
                    }
                }
                Op::Exp(a) => {
                    let da = ensure(&mut grads, *a, g.len());
                    for ((d, gg), y) in da.iter_mut().zip(&g).zip(&node.value) {
                        *d += gg * y;
                    }
                }
                Op::Abs(a) => {
                    let xv = &nodes[*a].value;
                    let da = ensure(&mut grads, *a, g.len());
                    for ((d, gg), x) in da.iter_mut().zip(&g).zip(xv) {
                        *d += gg * if *x > 0.0 { 1.0 } else if *x < 0.0 { -1.0 } else { 0.0 };
                    }
                }
                Op::Clamp(a, lo, hi) => {
                    let xv = &nodes[*a].value;
                    let da = ensure(&mut grads, *a, g.len());
                    for ((d, gg), x) in da.iter_mut().zip(&g).zip(xv) {
                        if *x > *lo && *x < *hi {
                            *d += gg;
                        }
                    }
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    let da = ensure(&mut grads, *a, n);
                    for d in da.iter_mut() {
                        *d += g[0];
                    }
                }
                Op::Mean(a) => {
                    let n = nodes[*a].value.len();
                    let w = g[0] / n as f64;
                    let da = ensure(&mut grads, *a, n);
                    for d in da.iter_mut() {
                        *d += w;
                    }
                }
                Op::GatherCols(a, idx) => {
                    let cols = nodes[*a].cols;
                    let da = ensure(&mut grads, *a, nodes[*a].value.len());
                    for (r, &c) in idx.iter().enumerate() {
                        da[r * cols + c] += g[r];
                    }
                }
                Op::ConcatCols(parts) => {
                    let rows = node.rows;
                    let total = node.cols;
                    let mut offset = 0;
                    for (pidx, pcols) in parts {
                        let da = ensure(&mut grads, *pidx, rows * pcols);
                        for r in 0..rows {
                            for c in 0..*pcols {
                                da[r * pcols + c] += g[r * total + offset + c];
                            }
                        }
                        offset += pcols;
                    }
                }
                Op::SliceCols(a, start, len) => {
                    let cols = nodes[*a].cols;
                    let da = ensure(&mut grads, *a, nodes[*a].value.len());
                    for r in 0..node.rows {
                        for c in 0..*len {
                            da[r * cols + start + c] += g[r * len + c];
                        }
                    }
                }
                Op::Reshape(a) => accumulate(&mut grads, *a, &g),
                Op::RepeatCols(a, times) => {
                    let cols = nodes[*a].cols;
                    let da = ensure(&mut grads, *a, nodes[*a].value.len());
                    for r in 0..node.rows {
                        for t in 0..*times {
                            for c in 0..cols {
                                da[r * cols + c] += g[r * node.cols + t * cols + c];
                            }
                        }
                    }
                }
                Op::SumBlockCols(a, block) => {
                    let cols = nodes[*a].cols;
                    let groups = node.cols;
                    let da = ensure(&mut grads, *a, nodes[*a].value.len());
                    for r in 0..node.rows {
                        for gidx in 0..groups {
                            let gg = g[r * groups + gidx];
                            let base = r * cols + gidx * block;
                            for d in da[base..base + block].iter_mut() {
                                *d += gg;
                            }
                        }
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    let cols = node.cols;
                    let da = ensure(&mut grads, *a, g.len());
                    for r in 0..node.rows {
                        let grow = &g[r * cols..(r + 1) * cols];
                        let yrow = &node.value[r * cols..(r + 1) * cols];
                        let gsum: f64 = grow.iter().sum();
                        for c in 0..cols {
                            da[r * cols + c] += grow[c] - yrow[c].exp() * gsum;
                        }
                    }
                }
            }
            grads[i] = Some(g);
        }

        Gradients {
            grads,
            shapes: nodes.iter().map(|n| (n.rows, n.cols)).collect(),
        }
    }
}

fn ensure(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize) -> &mut Vec<f64> {
    let slot = &mut grads[idx];
    if slot.is_none() {
        *slot = Some(vec![0.0; len]);
    }
    slot.as_mut().unwrap()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64]) {
    let da = ensure(grads, idx, g.len());
    for (d, gg) in da.iter_mut().zip(g) {
        *d += gg;
    }
}

/// Gradients keyed by tape node. Leaves the loss never touched read as zero.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.idx];
        match &self.grads[v.idx] {
            Some(g) => Tensor::from_vec(r, c, g.clone()),
            None => Tensor::zeros(r, c),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grad_of_x_squared_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[3.0]));
        let y = tape.mul_elem(x, x);
        let loss = tape.sum(y);
        assert_eq!(tape.scalar(loss), 9.0);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[2.0]));
        let unused = tape.leaf(&Tensor::vector(&[5.0, 7.0]));
        let loss = tape.sum(tape.mul_elem(x, x));
        let grads = tape.backward(loss);
        assert_eq!(grads.get(unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_forward_and_backward() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(2, 2, vec![1.0, 2.0, 3.0, 4.0]));
        let b = tape.leaf(&Tensor::from_vec(2, 1, vec![5.0, 6.0]));
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[17.0, 39.0]);
        let loss = tape.sum(c);
        let grads = tape.backward(loss);
        // d(sum(A b))/dA = [b^T; b^T], d/db = column sums of A.
        assert_eq!(grads.get(a).data(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(grads.get(b).data(), &[4.0, 6.0]);
    }

    #[test]
    fn log_softmax_rows_normalizes() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let y = tape.log_softmax_rows(x);
        let v = tape.value(y);
        let total: f64 = v.data().iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gather_and_concat_roundtrip_gradients() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let picked = tape.gather_cols(a, &[2, 0]);
        assert_eq!(tape.value(picked).data(), &[3.0, 4.0]);
        let twice = tape.concat_cols(&[picked, picked]);
        let loss = tape.sum(twice);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).data(), &[0.0, 0.0, 2.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn repeat_and_sum_block_cols_are_adjoint() {
        let tape = Tape::new();
        let a = tape.leaf(&Tensor::vector(&[1.0, 2.0]));
        let tiled = tape.repeat_cols(a, 3);
        assert_eq!(tape.value(tiled).data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let back = tape.sum_block_cols(tiled, 2);
        assert_eq!(tape.value(back).data(), &[3.0, 3.0, 3.0]);
        let loss = tape.sum(back);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(a).data(), &[3.0, 3.0]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(&[-9.0, 0.5, 9.0]));
        let y = tape.clamp(x, -8.0, 4.0);
        assert_eq!(tape.value(y).data(), &[-8.0, 0.5, 4.0]);
        let loss = tape.sum(y);
        let grads = tape.backward(loss);
        assert_eq!(grads.get(x).data(), &[0.0, 1.0, 0.0]);
    }
}
