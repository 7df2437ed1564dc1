//! Matrix-valued reverse-mode automatic differentiation.
//!
//! Every operation appends a node holding its forward value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates vector-Jacobian products. Nodes
//! built only from constants do not require gradients and are skipped.
//!
//! Besides the usual elementwise and matrix operations the tape has fused
//! kernels for the pieces of the simulator that would otherwise produce
//! thousands of tiny nodes: affine scans, dilated causal depthwise
//! convolution, per-segment softmax/pooling, and the Student-t likelihood.

use statrs::function::gamma::{digamma, ln_gamma};

use crate::scan::scan_sequential;
use crate::tensor::{gemm, Mat};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Square,
    Sqrt,
    Abs,
    Relu,
    Neg,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    RowSoftmax(Var),
    SumCols(Var),
    SumRows(Var),
    SumAll(Var),
    GatherRows(Var, Vec<usize>),
    Scan {
        a: Var,
        b: Var,
        h0: Var,
        steps: usize,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        dilation: usize,
        steps: usize,
    },
    SegmentSoftmax(Var, usize),
    SegmentWeightedSum {
        x: Var,
        w: Var,
        steps: usize,
    },
    StudentT {
        y: Mat,
        mu: Var,
        log_sigma: Var,
        nu: Var,
        gaussian: bool,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; only nodes reached from the loss are populated.
pub struct Grads {
    grads: Vec<Option<Mat>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads[v.0].take()
    }
}

fn same_shape(a: &Mat, b: &Mat, what: &str) {
    assert_eq!(a.shape(), b.shape(), "{what}: shape mismatch");
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// Differentiable input (a parameter).
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x + y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x - y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x * y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Mul(a, b), rg)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip(self.value(b), |x, y| x / y);
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Div(a, b), rg)
    }

    /// `a + 1ᵀr` with `r` a `1×m` row.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, m.cols), "add_row: row shape");
        let mut value = m.clone();
        for i in 0..value.rows {
            for (x, y) in value.row_mut(i).iter_mut().zip(&r.data) {
                *x += y;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::AddRow(a, row), rg)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        let (m, r) = (self.value(a), self.value(row));
        assert_eq!((r.rows, r.cols), (1, m.cols), "mul_row: row shape");
        let mut value = m.clone();
        for i in 0..value.rows {
            for (x, y) in value.row_mut(i).iter_mut().zip(&r.data) {
                *x *= y;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(value, Op::MulRow(a, row), rg)
    }

    /// Scales row `i` of `a` by `col[i]` (`col` is `n×1`).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (m, c) = (self.value(a), self.value(col));
        assert_eq!((c.rows, c.cols), (m.rows, 1), "mul_col: column shape");
        let mut value = m.clone();
        for i in 0..value.rows {
            let s = c.data[i];
            value.row_mut(i).iter_mut().for_each(|x| *x *= s);
        }
        let rg = self.rg(&[a, col]);
        self.push(value, Op::MulCol(a, col), rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let rg = self.rg(&[a]);
        self.push(value, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        let rg = self.rg(&[a]);
        self.push(value, Op::AddScalar(a), rg)
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let f: fn(f64) -> f64 = match kind {
            Unary::Tanh => f64::tanh,
            Unary::Sigmoid => sigmoid,
            Unary::Exp => f64::exp,
            Unary::Log => f64::ln,
            Unary::Softplus => softplus,
            Unary::Square => |x| x * x,
            Unary::Sqrt => f64::sqrt,
            Unary::Abs => f64::abs,
            Unary::Relu => |x: f64| x.max(0.0),
            Unary::Neg => |x: f64| -x,
        };
        let value = self.value(a).map(f);
        let rg = self.rg(&[a]);
        self.push(value, Op::Unary(a, kind), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut value = Mat::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let m = self.value(p);
                assert_eq!(m.rows, rows, "concat_cols: row mismatch");
                value.data[r * cols + off..r * cols + off + m.cols].copy_from_slice(m.row(r));
                off += m.cols;
            }
        }
        let rg = self.rg(parts);
        self.push(value, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let m = self.value(a);
        assert!(start + len <= m.cols, "slice_cols out of range");
        let mut value = Mat::zeros(m.rows, len);
        for r in 0..m.rows {
            value.row_mut(r).copy_from_slice(&m.row(r)[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SliceCols(a, start), rg)
    }

    pub fn row_softmax(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = m.clone();
        for r in 0..value.rows {
            softmax_in_place(value.row_mut(r));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::RowSoftmax(a), rg)
    }

    pub fn sum_cols(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = Mat::col_vec((0..m.rows).map(|r| m.row(r).iter().sum()).collect());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumCols(a), rg)
    }

    pub fn sum_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let mut value = Mat::zeros(1, m.cols);
        for r in 0..m.rows {
            for (x, y) in value.data.iter_mut().zip(m.row(r)) {
                *x += y;
            }
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SumRows(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Mat::scalar(self.value(a).sum());
        let rg = self.rg(&[a]);
        self.push(value, Op::SumAll(a), rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Output row `i` is row `index[i]` of `a` (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, index: Vec<usize>) -> Var {
        let m = self.value(a);
        let mut value = Mat::zeros(index.len(), m.cols);
        for (i, &src) in index.iter().enumerate() {
            value.row_mut(i).copy_from_slice(m.row(src));
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::GatherRows(a, index), rg)
    }

    /// Repeats every row of `a` `times` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let rows = self.value(a).rows;
        let index = (0..rows).flat_map(|r| std::iter::repeat_n(r, times)).collect();
        self.gather_rows(a, index)
    }

    /// Batch-major affine scan; `a`, `b` are `(B·steps)×d`, `h0` is `B×d`.
    pub fn scan(&mut self, a: Var, b: Var, h0: Var, steps: usize) -> Var {
        let (am, bm, hm) = (self.value(a), self.value(b), self.value(h0));
        same_shape(am, bm, "scan a/b");
        assert_eq!(hm.cols, am.cols, "scan h0 width");
        assert_eq!(hm.rows * steps, am.rows, "scan batch layout");
        let d = am.cols;
        let mut value = Mat::zeros(am.rows, d);
        for bi in 0..hm.rows {
            let span = bi * steps * d..(bi + 1) * steps * d;
            let out = scan_sequential(hm.row(bi), &am.data[span.clone()], &bm.data[span.clone()], d);
            value.data[span].copy_from_slice(&out);
        }
        let rg = self.rg(&[a, b, h0]);
        self.push(value, Op::Scan { a, b, h0, steps }, rg)
    }

    /// Causal dilated depthwise convolution over batch-major sequences.
    /// `w` holds one row of per-channel taps per lag (`K×C`); tap `j` reads
    /// `x[t - j·dilation]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, dilation: usize, steps: usize) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!(xm.cols, wm.cols, "depthwise_conv channels");
        assert_eq!(xm.rows % steps, 0, "depthwise_conv batch layout");
        let c = xm.cols;
        let mut value = Mat::zeros(xm.rows, c);
        for bi in 0..xm.rows / steps {
            for t in 0..steps {
                let out = &mut value.data[(bi * steps + t) * c..(bi * steps + t + 1) * c];
                for j in 0..wm.rows {
                    let lag = j * dilation;
                    if lag > t {
                        break;
                    }
                    let src = xm.row(bi * steps + t - lag);
                    for ((o, s), k) in out.iter_mut().zip(src).zip(wm.row(j)) {
                        *o += k * s;
                    }
                }
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(
            value,
            Op::DepthwiseConv {
                x,
                w,
                dilation,
                steps,
            },
            rg,
        )
    }

    /// Softmax over each consecutive block of `steps` rows of an `n×1` column.
    pub fn segment_softmax(&mut self, a: Var, steps: usize) -> Var {
        let m = self.value(a);
        assert_eq!(m.cols, 1, "segment_softmax expects a column");
        let mut value = m.clone();
        for seg in value.data.chunks_exact_mut(steps) {
            softmax_in_place(seg);
        }
        let rg = self.rg(&[a]);
        self.push(value, Op::SegmentSoftmax(a, steps), rg)
    }

    /// `out[b] = Σ_t w[b,t]·x[b,t]` per block of `steps` rows.
    pub fn segment_weighted_sum(&mut self, x: Var, w: Var, steps: usize) -> Var {
        let (xm, wm) = (self.value(x), self.value(w));
        assert_eq!((wm.rows, wm.cols), (xm.rows, 1), "segment_weighted_sum weights");
        let batches = xm.rows / steps;
        let mut value = Mat::zeros(batches, xm.cols);
        for bi in 0..batches {
            for t in 0..steps {
                let r = bi * steps + t;
                let wt = wm.data[r];
                for (o, s) in value.row_mut(bi).iter_mut().zip(xm.row(r)) {
                    *o += wt * s;
                }
            }
        }
        let rg = self.rg(&[x, w]);
        self.push(value, Op::SegmentWeightedSum { x, w, steps }, rg)
    }

    /// Elementwise negative log density of a location-scale Student-t (or a
    /// Gaussian when `gaussian`). `nu` is a `1×m` row broadcast over rows.
    pub fn student_t_nll(&mut self, y: Mat, mu: Var, log_sigma: Var, nu: Var, gaussian: bool) -> Var {
        let (mm, sm, nm) = (self.value(mu), self.value(log_sigma), self.value(nu));
        same_shape(&y, mm, "student_t y/mu");
        same_shape(mm, sm, "student_t mu/log_sigma");
        assert_eq!((nm.rows, nm.cols), (1, mm.cols), "student_t nu row");
        let mut value = Mat::zeros(mm.rows, mm.cols);
        let consts: Vec<f64> = nm
            .data
            .iter()
            .map(|&nu| t_log_norm(nu))
            .collect();
        for r in 0..mm.rows {
            for c in 0..mm.cols {
                let k = r * mm.cols + c;
                let ls = sm.data[k];
                let z = (y.data[k] - mm.data[k]) * (-ls).exp();
                value.data[k] = if gaussian {
                    0.5 * (2.0 * std::f64::consts::PI).ln() + ls + 0.5 * z * z
                } else {
                    let nu = nm.data[c];
                    consts[c] + ls + 0.5 * (nu + 1.0) * (z * z / nu).ln_1p()
                };
            }
        }
        let rg = self.rg(&[mu, log_sigma, nu]);
        self.push(
            value,
            Op::StudentT {
                y,
                mu,
                log_sigma,
                nu,
                gaussian,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Grads {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, m: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot @ None => *slot = Some(m),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.needs(*a) {
                    let mut da = Mat::zeros(val(*a).rows, val(*a).cols);
                    gemm(g, false, val(*b), true, &mut da, 0.0);
                    acc(*a, da);
                }
                if self.needs(*b) {
                    let mut db = Mat::zeros(val(*b).rows, val(*b).cols);
                    gemm(val(*a), true, g, false, &mut db, 0.0);
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.zip(val(*b), |g, y| g * y));
                }
                if self.needs(*b) {
                    acc(*b, g.zip(val(*a), |g, x| g * x));
                }
            }
            Op::Div(a, b) => {
                let bv = val(*b);
                if self.needs(*a) {
                    acc(*a, g.zip(bv, |g, d| g / d));
                }
                if self.needs(*b) {
                    // d(a/b)/db = -(a/b)/b
                    let t = y.zip(bv, |q, d| -q / d);
                    acc(*b, g.zip(&t, |g, t| g * t));
                }
            }
            Op::AddRow(a, row) => {
                acc(*a, g.clone());
                if self.needs(*row) {
                    acc(*row, column_sums(g));
                }
            }
            Op::MulRow(a, row) => {
                let rv = val(*row);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        for (x, s) in da.row_mut(r).iter_mut().zip(&rv.data) {
                            *x *= s;
                        }
                    }
                    acc(*a, da);
                }
                if self.needs(*row) {
                    acc(*row, column_sums(&g.zip(val(*a), |g, x| g * x)));
                }
            }
            Op::MulCol(a, col) => {
                let cv = val(*col);
                if self.needs(*a) {
                    let mut da = g.clone();
                    for r in 0..da.rows {
                        let s = cv.data[r];
                        da.row_mut(r).iter_mut().for_each(|x| *x *= s);
                    }
                    acc(*a, da);
                }
                if self.needs(*col) {
                    let av = val(*a);
                    let dc = (0..g.rows)
                        .map(|r| g.row(r).iter().zip(av.row(r)).map(|(g, x)| g * x).sum())
                        .collect();
                    acc(*col, Mat::col_vec(dc));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a) => acc(*a, g.clone()),
            Op::Unary(a, kind) => {
                let x = val(*a);
                let d = match kind {
                    Unary::Tanh => y.map(|t| 1.0 - t * t),
                    Unary::Sigmoid => y.map(|s| s * (1.0 - s)),
                    Unary::Exp => y.clone(),
                    Unary::Log => x.map(|x| 1.0 / x),
                    Unary::Softplus => x.map(sigmoid),
                    Unary::Square => x.map(|x| 2.0 * x),
                    Unary::Sqrt => y.map(|s| 0.5 / s),
                    Unary::Abs => x.map(|x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    }),
                    Unary::Relu => x.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
                    Unary::Neg => x.map(|_| -1.0),
                };
                acc(*a, g.zip(&d, |g, d| g * d));
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let cols = val(p).cols;
                    if self.needs(p) {
                        let mut dp = Mat::zeros(g.rows, cols);
                        for r in 0..g.rows {
                            dp.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                        }
                        acc(p, dp);
                    }
                    off += cols;
                }
            }
            Op::SliceCols(a, start) => {
                let av = val(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for r in 0..g.rows {
                    da.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::RowSoftmax(a) => {
                let mut da = Mat::zeros(g.rows, g.cols);
                for r in 0..g.rows {
                    softmax_backward(y.row(r), g.row(r), da.row_mut(r));
                }
                acc(*a, da);
            }
            Op::SumCols(a) => {
                let av = val(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    let s = g.data[r];
                    da.row_mut(r).iter_mut().for_each(|x| *x = s);
                }
                acc(*a, da);
            }
            Op::SumRows(a) => {
                let av = val(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for r in 0..av.rows {
                    da.row_mut(r).copy_from_slice(&g.data);
                }
                acc(*a, da);
            }
            Op::SumAll(a) => {
                let av = val(*a);
                acc(*a, Mat::filled(av.rows, av.cols, g.data[0]));
            }
            Op::GatherRows(a, index) => {
                let av = val(*a);
                let mut da = Mat::zeros(av.rows, av.cols);
                for (i, &src) in index.iter().enumerate() {
                    for (x, gv) in da.row_mut(src).iter_mut().zip(g.row(i)) {
                        *x += gv;
                    }
                }
                acc(*a, da);
            }
            Op::Scan { a, b, h0, steps } => {
                let (av, hv) = (val(*a), val(*h0));
                let d = av.cols;
                let mut da = Mat::zeros(av.rows, d);
                let mut db = Mat::zeros(av.rows, d);
                let mut dh0 = Mat::zeros(hv.rows, d);
                let mut carry = vec![0.0; d];
                for bi in 0..hv.rows {
                    carry.iter_mut().for_each(|c| *c = 0.0);
                    for t in (0..*steps).rev() {
                        let r = bi * steps + t;
                        // carry holds a_{t+1}·G_{t+1}
                        let prev = if t == 0 { hv.row(bi) } else { y.row(r - 1) };
                        for k in 0..d {
                            let gt = g.data[r * d + k] + carry[k];
                            db.data[r * d + k] = gt;
                            da.data[r * d + k] = gt * prev[k];
                            carry[k] = av.data[r * d + k] * gt;
                        }
                    }
                    dh0.row_mut(bi).copy_from_slice(&carry);
                }
                acc(*a, da);
                acc(*b, db);
                acc(*h0, dh0);
            }
            Op::DepthwiseConv {
                x,
                w,
                dilation,
                steps,
            } => {
                let (xv, wv) = (val(*x), val(*w));
                let c = xv.cols;
                let mut dx = Mat::zeros(xv.rows, c);
                let mut dw = Mat::zeros(wv.rows, c);
                for bi in 0..xv.rows / steps {
                    for t in 0..*steps {
                        let gr = g.row(bi * steps + t);
                        for j in 0..wv.rows {
                            let lag = j * dilation;
                            if lag > t {
                                break;
                            }
                            let src = bi * steps + t - lag;
                            let xs = xv.row(src);
                            let wk = wv.row(j);
                            for k in 0..c {
                                dx.data[src * c + k] += wk[k] * gr[k];
                                dw.data[j * c + k] += xs[k] * gr[k];
                            }
                        }
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::SegmentSoftmax(a, steps) => {
                let mut da = Mat::zeros(g.rows, 1);
                for ((ys, gs), ds) in y
                    .data
                    .chunks_exact(*steps)
                    .zip(g.data.chunks_exact(*steps))
                    .zip(da.data.chunks_exact_mut(*steps))
                {
                    softmax_backward(ys, gs, ds);
                }
                acc(*a, da);
            }
            Op::SegmentWeightedSum { x, w, steps } => {
                let (xv, wv) = (val(*x), val(*w));
                let mut dx = Mat::zeros(xv.rows, xv.cols);
                let mut dw = Mat::zeros(wv.rows, 1);
                for bi in 0..g.rows {
                    let gb = g.row(bi);
                    for t in 0..*steps {
                        let r = bi * steps + t;
                        let wt = wv.data[r];
                        let mut s = 0.0;
                        for ((d, xs), gv) in dx.row_mut(r).iter_mut().zip(xv.row(r)).zip(gb) {
                            *d = wt * gv;
                            s += xs * gv;
                        }
                        dw.data[r] = s;
                    }
                }
                acc(*x, dx);
                acc(*w, dw);
            }
            Op::StudentT {
                y: target,
                mu,
                log_sigma,
                nu,
                gaussian,
            } => {
                let (mv, sv, nv) = (val(*mu), val(*log_sigma), val(*nu));
                let cols = mv.cols;
                let mut dmu = Mat::zeros(mv.rows, cols);
                let mut dls = Mat::zeros(mv.rows, cols);
                let mut dnu = Mat::zeros(1, cols);
                let psi: Vec<(f64, f64)> = nv
                    .data
                    .iter()
                    .map(|&n| (digamma(0.5 * n), digamma(0.5 * (n + 1.0))))
                    .collect();
                for r in 0..mv.rows {
                    for c in 0..cols {
                        let k = r * cols + c;
                        let gk = g.data[k];
                        let inv_s = (-sv.data[k]).exp();
                        let z = (target.data[k] - mv.data[k]) * inv_s;
                        if *gaussian {
                            dmu.data[k] = -gk * z * inv_s;
                            dls.data[k] = gk * (1.0 - z * z);
                        } else {
                            let n = nv.data[c];
                            let denom = n + z * z;
                            dmu.data[k] = -gk * (n + 1.0) * z * inv_s / denom;
                            dls.data[k] = gk * (1.0 - (n + 1.0) * z * z / denom);
                            let (p_half, p_half1) = psi[c];
                            dnu.data[c] += gk
                                * (0.5 * (p_half - p_half1) + 0.5 / n + 0.5 * (z * z / n).ln_1p()
                                    - (n + 1.0) * z * z / (2.0 * n * denom));
                        }
                    }
                }
                acc(*mu, dmu);
                acc(*log_sigma, dls);
                acc(*nu, dnu);
            }
        }
    }
}

fn column_sums(g: &Mat) -> Mat {
    let mut out = Mat::zeros(1, g.cols);
    for r in 0..g.rows {
        for (o, x) in out.data.iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

fn softmax_in_place(xs: &mut [f64]) {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

fn softmax_backward(y: &[f64], g: &[f64], out: &mut [f64]) {
    let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, yv), gv) in out.iter_mut().zip(y).zip(g) {
        *o = yv * (gv - dot);
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

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `-log` of the Student-t normalising constant, excluding the scale term.
pub fn t_log_norm(nu: f64) -> f64 {
    -ln_gamma(0.5 * (nu + 1.0)) + ln_gamma(0.5 * nu) + 0.5 * (nu * std::f64::consts::PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: usize, cols: usize, seed: u64) -> Mat {
        // small deterministic pseudo-random fill
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        let data = (0..rows * cols)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Mat::from_vec(rows, cols, data)
    }

    /// Central-difference check of `d f / d inputs` for a scalar-valued graph.
    fn check(inputs: Vec<Mat>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out);
        let eval = |ins: &[Mat]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ins.iter().map(|m| t.param(m.clone())).collect();
            let o = build(&mut t, &vs);
            t.scalar(o)
        };
        let h = 1e-6;
        for (vi, input) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[vi]).cloned().unwrap_or(Mat::zeros(input.rows, input.cols));
            for k in 0..input.len() {
                let mut plus = inputs.clone();
                plus[vi].data[k] += h;
                let mut minus = inputs.clone();
                minus[vi].data[k] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = analytic.data[k];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + fd.abs().max(an.abs())),
                    "input {vi} elem {k}: fd {fd} vs analytic {an}"
                );
            }
        }
    }

    #[test]
    fn matmul_and_broadcast_ops() {
        check(vec![mat(3, 4, 1), mat(4, 2, 2), mat(1, 2, 3), mat(3, 1, 4)], |t, v| {
            let p = t.matmul(v[0], v[1]);
            let q = t.add_row(p, v[2]);
            let r = t.mul_row(q, v[2]);
            let s = t.mul_col(r, v[3]);
            let u = t.tanh(s);
            t.sum_all(u)
        });
    }

    #[test]
    fn elementwise_ops() {
        check(vec![mat(2, 3, 5), mat(2, 3, 6)], |t, v| {
            let a = t.sigmoid(v[0]);
            let b = t.softplus(v[1]);
            let c = t.div(a, b);
            let d = t.mul(c, v[0]);
            let e = t.sub(d, v[1]);
            let f = t.square(e);
            let g = t.exp(v[1]);
            let h = t.log(g);
            let i = t.add(f, h);
            let j = t.unary(i, Unary::Abs);
            let k = t.add_scalar(j, 1.0);
            let l = t.unary(k, Unary::Sqrt);
            let m = t.scale(l, -0.7);
            t.mean_all(m)
        });
    }

    #[test]
    fn structural_ops() {
        check(vec![mat(4, 3, 7), mat(4, 2, 8)], |t, v| {
            let c = t.concat_cols(&[v[0], v[1]]);
            let s = t.slice_cols(c, 1, 3);
            let sm = t.row_softmax(s);
            let g = t.gather_rows(sm, vec![3, 0, 0, 2]);
            let rr = t.repeat_rows(g, 2);
            let sc = t.sum_cols(rr);
            let sq = t.square(sc);
            let sr = t.sum_rows(v[1]);
            let sr2 = t.square(sr);
            let a = t.sum_all(sq);
            let b = t.sum_all(sr2);
            t.add(a, b)
        });
    }

    #[test]
    fn scan_gradients() {
        // two sequences of three steps, width 2
        let a = mat(6, 2, 9).map(|x| 0.5 + 0.4 * x);
        check(vec![a, mat(6, 2, 10), mat(2, 2, 11), mat(6, 2, 12)], |t, v| {
            let h = t.scan(v[0], v[1], v[2], 3);
            let w = t.mul(h, v[3]);
            t.sum_all(w)
        });
    }

    #[test]
    fn conv_and_pooling_gradients() {
        check(vec![mat(10, 3, 13), mat(3, 3, 14), mat(10, 1, 15), mat(2, 3, 16)], |t, v| {
            let y = t.depthwise_conv(v[0], v[1], 2, 5);
            let w = t.segment_softmax(v[2], 5);
            let p = t.segment_weighted_sum(y, w, 5);
            let q = t.mul(p, v[3]);
            t.sum_all(q)
        });
    }

    #[test]
    fn student_t_gradients() {
        let nu = Mat::row_vec(vec![3.5, 7.0]);
        let y = mat(3, 2, 17);
        for gaussian in [false, true] {
            let y = y.clone();
            check(vec![mat(3, 2, 18), mat(3, 2, 19).map(|x| 0.3 * x), nu.clone()], move |t, v| {
                let n = t.student_t_nll(y.clone(), v[0], v[1], v[2], gaussian);
                t.sum_all(n)
            });
        }
    }

    #[test]
    fn conv_is_causal() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(8, 2, 20));
        let w = tape.constant(mat(3, 2, 21));
        let y = tape.depthwise_conv(x, w, 2, 8);
        let before = tape.value(y).clone();
        let mut xp = tape.value(x).clone();
        xp.data[5 * 2] += 1.0;
        let x2 = tape.constant(xp);
        let y2 = tape.depthwise_conv(x2, w, 2, 8);
        for t in 0..5 {
            assert_eq!(before.row(t), tape.value(y2).row(t));
        }
        assert_ne!(before.row(5), tape.value(y2).row(5));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(Mat::scalar(2.0));
        let p = tape.param(Mat::scalar(3.0));
        let y = tape.mul(c, p);
        let g = tape.backward(y);
        assert!(g.get(c).is_none());
        assert_eq!(g.get(p).unwrap().data[0], 2.0);
    }

    #[test]
    fn quadratic_gradient() {
        // f(x) = Σ (x - a)², ∇f = 2(x - a)
        let mut tape = Tape::new();
        let x = tape.param(Mat::row_vec(vec![1.0, -2.0, 0.5]));
        let a = tape.constant(Mat::row_vec(vec![0.5, 0.5, 0.5]));
        let d = tape.sub(x, a);
        let s = tape.square(d);
        let f = tape.sum_all(s);
        let g = tape.backward(f);
        assert_eq!(g.get(x).unwrap().data, vec![1.0, -5.0, 0.0]);
    }
}
