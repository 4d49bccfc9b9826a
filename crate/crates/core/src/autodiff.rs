//! Reverse-mode differentiation over a tape of rank-2 tensors.
//!
//! Every node holds its forward value. Leaves are either constants or
//! parameters; only nodes that depend on a parameter receive gradients.
//! Vectors live on the tape as `1 × n` rows.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{layer_norm_in_place, matmul_into, softmax_in_place, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf { shape: Vec<usize> },
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Exp(Var),
    Ln(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Square(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    Broadcast(Var),
    SoftmaxRows(Var),
    SoftmaxCols(Var),
    LayerNormRows(Var, f64),
    SliceRows(Var, usize),
    Column(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    PoseTransform { poses: Var, transforms: Var, p: usize, q: usize },
    CrossEntropy(Var, usize),
    Gather(Var, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// A recording of a computation, differentiable with respect to its
/// parameter leaves.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to every parameter leaf.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Option<Vec<usize>>>,
}

impl Gradients {
    /// Gradient for leaf `v`, in the leaf's original shape. `None` when `v`
    /// is a constant or does not influence the output.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        let g = self.grads.get(v.0)?.as_ref()?;
        let shape = self.shapes[v.0].clone()?;
        Some(Tensor::from_parts(shape, g.clone()))
    }

    /// Like [`get`](Self::get) but zero-filled when the output does not
    /// depend on `v`.
    pub fn get_or_zeros(&self, g: &Graph, v: Var) -> Tensor {
        self.get(v).unwrap_or_else(|| match &g.nodes[v.0].op {
            Op::Leaf { shape } => Tensor::zeros(shape),
            _ => Tensor::zeros(&[g.nodes[v.0].rows, g.nodes[v.0].cols]),
        })
    }
}

fn as_2d(t: &Tensor) -> (usize, usize) {
    match t.shape() {
        [n] => (1, *n),
        [r, rest @ ..] => (*r, rest.iter().product()),
        [] => (1, 1),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, t: &Tensor, needs_grad: bool) -> Var {
        let (rows, cols) = as_2d(t);
        self.nodes.push(Node {
            rows,
            cols,
            value: t.data().to_vec(),
            op: Op::Leaf {
                shape: t.shape().to_vec(),
            },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient. Rank-1 tensors become `1 × n`,
    /// higher ranks are viewed as `shape[0] × rest`.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, t: &Tensor) -> Var {
        self.leaf(t, true)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(&Tensor::scalar(x))
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Forward value of `v` as a `rows × cols` tensor.
    pub fn value(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::from_parts(vec![n.rows, n.cols], n.value.clone())
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da != db {
            return Err(Error::shape(op, &[da.0, da.1], &[db.0, db.1]));
        }
        Ok(da)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        Ok(self.push(m, n, out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.push(c, r, out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if r * c != rows * cols {
            return Err(Error::shape("reshape", &[r, c], &[rows, cols]));
        }
        let v = self.data(a).to_vec();
        Ok(self.push(rows, cols, v, Op::Reshape(a), &[a]))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var> {
        let (r, c) = self.same_shape(name, a, b)?;
        let v = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.push(r, c, v, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("div", a, b, Op::Div(a, b), |x, y| x / y)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let (r, c) = self.dims(a);
        let v = self.data(a).iter().map(|&x| f(x)).collect();
        self.push(r, c, v, op, &[a])
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Scale(a, k), |x| k * x)
    }

    pub fn offset(&mut self, a: Var, k: f64) -> Var {
        self.unary(a, Op::Offset(a), |x| x + k)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), libm::log)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), crate::tensor::sigmoid)
    }

    /// `ln sigmoid(x)`, finite for any finite `x`.
    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::LogSigmoid(a), |x| x.min(0.0) - libm::log1p(libm::exp(-libm::fabs(x))))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// `max(x, floor)` elementwise; no gradient flows through clamped entries.
    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Var {
        self.unary(a, Op::ClampMin(a, floor), |x| x.max(floor))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.push(1, 1, vec![s], Op::SumAll(a), &[a])
    }

    /// Sums over rows: `m × n → 1 × n`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, x) in out.iter_mut().zip(&src[i * c..(i + 1) * c]) {
                *o += x;
            }
        }
        self.push(1, c, out, Op::SumRows(a), &[a])
    }

    /// Sums over columns: `m × n → m × 1`.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let out = (0..r).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(r, 1, out, Op::SumCols(a), &[a])
    }

    /// Expands a `1 × 1`, `1 × n` or `m × 1` node to `rows × cols`.
    pub fn broadcast(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if !((r == 1 || r == rows) && (c == 1 || c == cols)) {
            return Err(Error::shape("broadcast", &[r, c], &[rows, cols]));
        }
        let src = self.data(a);
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                out.push(src[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }]);
            }
        }
        Ok(self.push(rows, cols, out, Op::Broadcast(a), &[a]))
    }

    /// Softmax within each row.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let mut v = self.data(a).to_vec();
        for row in v.chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(r, c, v, Op::SoftmaxRows(a), &[a])
    }

    /// Softmax within each column.
    pub fn softmax_cols(&mut self, a: Var) -> Var {
        let (r, c) = self.dims(a);
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        let mut buf = vec![0.0; r];
        for j in 0..c {
            for i in 0..r {
                buf[i] = src[i * c + j];
            }
            softmax_in_place(&mut buf);
            for i in 0..r {
                out[i * c + j] = buf[i];
            }
        }
        self.push(r, c, out, Op::SoftmaxCols(a), &[a])
    }

    /// Layer normalisation of each row, no affine terms.
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let (r, c) = self.dims(a);
        let mut v = self.data(a).to_vec();
        for row in v.chunks_mut(c) {
            layer_norm_in_place(row, eps);
        }
        self.push(r, c, v, Op::LayerNormRows(a, eps), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if len == 0 || start + len > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, len]));
        }
        let v = self.data(a)[start * c..(start + len) * c].to_vec();
        Ok(self.push(len, c, v, Op::SliceRows(a, start), &[a]))
    }

    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        let (r, c) = self.dims(a);
        if j >= c {
            return Err(Error::Index { index: j, len: c });
        }
        let src = self.data(a);
        let v = (0..r).map(|i| src[i * c + j]).collect();
        Ok(self.push(r, 1, v, Op::Column(a, j), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = parts.first().map(|&p| self.dims(p).1).ok_or_else(|| Error::shape("concat_rows", &[], &[]))?;
        let mut rows = 0;
        let mut v = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(Error::shape("concat_rows", &[pr, pc], &[rows, c]));
            }
            rows += pr;
            v.extend_from_slice(self.data(p));
        }
        Ok(self.push(rows, c, v, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = parts.first().map(|&p| self.dims(p).0).ok_or_else(|| Error::shape("concat_cols", &[], &[]))?;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(Error::shape("concat_cols", &[pr, pc], &[r, cols]));
            }
            cols += pc;
        }
        let mut v = Vec::with_capacity(r * cols);
        for i in 0..r {
            for &p in parts {
                let pc = self.dims(p).1;
                v.extend_from_slice(&self.data(p)[i * pc..(i + 1) * pc]);
            }
        }
        Ok(self.push(r, cols, v, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Per-row pose products. Row `i` of `poses` (`n × p·q`) is read as a
    /// `p × q` matrix `M_i` and multiplied by the `q × q` block `T_i` taken
    /// from rows `i·q..(i+1)·q` of `transforms`. With `p = 1` this is a
    /// row-vector transform.
    pub fn pose_transform(&mut self, poses: Var, transforms: Var, p: usize, q: usize) -> Result<Var> {
        let (n, pq) = self.dims(poses);
        let (tr, tc) = self.dims(transforms);
        if pq != p * q || tr != n * q || tc != q {
            return Err(Error::shape("pose_transform", &[n, pq], &[tr, tc]));
        }
        let m = self.data(poses);
        let t = self.data(transforms);
        let mut out = vec![0.0; n * pq];
        for i in 0..n {
            matmul_into(&m[i * pq..(i + 1) * pq], &t[i * q * q..(i + 1) * q * q], &mut out[i * pq..(i + 1) * pq], p, q, q);
        }
        Ok(self.push(n, pq, out, Op::PoseTransform { poses, transforms, p, q }, &[poses, transforms]))
    }

    /// `-log softmax(logits)[label]` for a row or column of logits.
    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Result<Var> {
        let x = self.data(logits);
        if label >= x.len() {
            return Err(Error::Index { index: label, len: x.len() });
        }
        let loss = crate::tensor::log_sum_exp_minus(x, label);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy(logits, label), &[logits]))
    }

    /// Picks flat entries `indices` of `a` into a `1 × k` row.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let x = self.data(a);
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Index { index: bad, len: x.len() });
        }
        let v = indices.iter().map(|&i| x[i]).collect();
        Ok(self.push(1, indices.len(), v, Op::Gather(a, indices.to_vec()), &[a]))
    }

    /// Reverse pass from the `1 × 1` node `output`.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.dims(output) != (1, 1) {
            let (r, c) = self.dims(output);
            return Err(Error::shape("backward", &[r, c], &[1, 1]));
        }
        if !self.nodes[output.0].value[0].is_finite() {
            return Err(Error::NonFinite(alloc::format!("loss value {}", self.nodes[output.0].value[0])));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![1.0]);
        for idx in (0..=output.0).rev() {
            let Some(dc) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if let Op::Leaf { .. } = node.op {
                grads[idx] = Some(dc);
                continue;
            }
            self.propagate(node, &dc, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| match &n.op {
                Op::Leaf { shape } if n.needs_grad => Some(shape.clone()),
                _ => None,
            })
            .collect::<Vec<_>>();
        for (g, s) in grads.iter_mut().zip(&shapes) {
            if s.is_none() {
                *g = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, node: &Node, dc: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let (rows, cols) = (node.rows, node.cols);
        let out = &node.value;
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = cols;
                if self.wants(*a) {
                    let bv = self.data(*b);
                    self.accumulate(grads, *a, |g| {
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = 0.0;
                                for j in 0..n {
                                    s += dc[i * n + j] * bv[p * n + j];
                                }
                                g[i * k + p] += s;
                            }
                        }
                    });
                }
                if self.wants(*b) {
                    let av = self.data(*a);
                    self.accumulate(grads, *b, |g| {
                        for i in 0..m {
                            for p in 0..k {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    g[p * n + j] += aip * dc[i * n + j];
                                }
                            }
                        }
                    });
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, |g| {
                for i in 0..rows {
                    for j in 0..cols {
                        g[j * rows + i] += dc[i * cols + j];
                    }
                }
            }),
            Op::Reshape(a) | Op::Offset(a) => self.accumulate(grads, *a, |g| add_into(g, dc)),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dc));
                self.accumulate(grads, *b, |g| add_into(g, dc));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |g| add_into(g, dc));
                self.accumulate(grads, *b, |g| g.iter_mut().zip(dc).for_each(|(g, d)| *g -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dc[i] * bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dc[i] * av[i];
                    }
                });
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dc[i] / bv[i];
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] -= dc[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::Scale(a, k) => self.accumulate(grads, *a, |g| g.iter_mut().zip(dc).for_each(|(g, d)| *g += k * d)),
            Op::Exp(a) => self.accumulate(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dc[i] * out[i];
                }
            }),
            Op::Ln(a) => {
                let av = self.data(*a);
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dc[i] / av[i];
                    }
                });
            }
            Op::Sigmoid(a) => self.accumulate(grads, *a, |g| {
                for i in 0..g.len() {
                    g[i] += dc[i] * out[i] * (1.0 - out[i]);
                }
            }),
            Op::LogSigmoid(a) => {
                let av = self.data(*a);
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dc[i] * crate::tensor::sigmoid(-av[i]);
                    }
                });
            }
            Op::Square(a) => {
                let av = self.data(*a);
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += 2.0 * av[i] * dc[i];
                    }
                });
            }
            Op::ClampMin(a, floor) => {
                let av = self.data(*a);
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        if av[i] >= *floor {
                            g[i] += dc[i];
                        }
                    }
                });
            }
            Op::SumAll(a) => self.accumulate(grads, *a, |g| g.iter_mut().for_each(|g| *g += dc[0])),
            Op::SumRows(a) => {
                let c = cols;
                self.accumulate(grads, *a, |g| {
                    for row in g.chunks_mut(c) {
                        add_into(row, dc);
                    }
                });
            }
            Op::SumCols(a) => {
                let c = self.dims(*a).1;
                self.accumulate(grads, *a, |g| {
                    for (row, d) in g.chunks_mut(c).zip(dc) {
                        row.iter_mut().for_each(|g| *g += d);
                    }
                });
            }
            Op::Broadcast(a) => {
                let (r, c) = self.dims(*a);
                self.accumulate(grads, *a, |g| {
                    for i in 0..rows {
                        for j in 0..cols {
                            g[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }] += dc[i * cols + j];
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => self.accumulate(grads, *a, |g| {
                for i in 0..rows {
                    let y = &out[i * cols..(i + 1) * cols];
                    let d = &dc[i * cols..(i + 1) * cols];
                    let dot: f64 = y.iter().zip(d).map(|(y, d)| y * d).sum();
                    for j in 0..cols {
                        g[i * cols + j] += y[j] * (d[j] - dot);
                    }
                }
            }),
            Op::SoftmaxCols(a) => self.accumulate(grads, *a, |g| {
                for j in 0..cols {
                    let dot: f64 = (0..rows).map(|i| out[i * cols + j] * dc[i * cols + j]).sum();
                    for i in 0..rows {
                        let k = i * cols + j;
                        g[k] += out[k] * (dc[k] - dot);
                    }
                }
            }),
            Op::LayerNormRows(a, eps) => {
                let av = self.data(*a);
                let n = cols as f64;
                self.accumulate(grads, *a, |g| {
                    for i in 0..rows {
                        let x = &av[i * cols..(i + 1) * cols];
                        let y = &out[i * cols..(i + 1) * cols];
                        let d = &dc[i * cols..(i + 1) * cols];
                        let mean = x.iter().sum::<f64>() / n;
                        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / libm::sqrt(var + eps);
                        let sum_d: f64 = d.iter().sum();
                        let sum_dy: f64 = d.iter().zip(y).map(|(d, y)| d * y).sum();
                        for j in 0..cols {
                            g[i * cols + j] += inv * (d[j] - (sum_d + y[j] * sum_dy) / n);
                        }
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let s = start * cols;
                self.accumulate(grads, *a, |g| add_into(&mut g[s..s + dc.len()], dc));
            }
            Op::Column(a, j) => {
                let c = self.dims(*a).1;
                self.accumulate(grads, *a, |g| {
                    for (i, d) in dc.iter().enumerate() {
                        g[i * c + j] += d;
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.data(p).len();
                    self.accumulate(grads, p, |g| add_into(g, &dc[off..off + n]));
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let pc = self.dims(p).1;
                    self.accumulate(grads, p, |g| {
                        for i in 0..rows {
                            add_into(&mut g[i * pc..(i + 1) * pc], &dc[i * cols + col..i * cols + col + pc]);
                        }
                    });
                    col += pc;
                }
            }
            Op::PoseTransform { poses, transforms, p, q } => {
                let (p, q) = (*p, *q);
                let pq = p * q;
                let (mv, tv) = (self.data(*poses), self.data(*transforms));
                self.accumulate(grads, *poses, |g| {
                    for i in 0..rows {
                        let t = &tv[i * q * q..(i + 1) * q * q];
                        for r in 0..p {
                            for k in 0..q {
                                let mut s = 0.0;
                                for c in 0..q {
                                    s += dc[i * pq + r * q + c] * t[k * q + c];
                                }
                                g[i * pq + r * q + k] += s;
                            }
                        }
                    }
                });
                self.accumulate(grads, *transforms, |g| {
                    for i in 0..rows {
                        let m = &mv[i * pq..(i + 1) * pq];
                        for k in 0..q {
                            for c in 0..q {
                                let mut s = 0.0;
                                for r in 0..p {
                                    s += m[r * q + k] * dc[i * pq + r * q + c];
                                }
                                g[i * q * q + k * q + c] += s;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy(a, label) => {
                let mut p = self.data(*a).to_vec();
                softmax_in_place(&mut p);
                p[*label] -= 1.0;
                self.accumulate(grads, *a, |g| g.iter_mut().zip(&p).for_each(|(g, p)| *g += dc[0] * p));
            }
            Op::Gather(a, indices) => self.accumulate(grads, *a, |g| {
                for (t, &i) in indices.iter().enumerate() {
                    g[i] += dc[t];
                }
            }),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let n = self.nodes[v.0].value.len();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }
}

fn add_into(g: &mut [f64], d: &[f64]) {
    for (g, d) in g.iter_mut().zip(d) {
        *g += d;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    /// Central differences of `f` at `x`.
    fn numeric(f: &dyn Fn(&Tensor) -> f64, x: &Tensor) -> Vec<f64> {
        let h = 1e-6;
        (0..x.len())
            .map(|i| {
                let mut p = x.clone();
                p.data_mut()[i] += h;
                let mut m = x.clone();
                m.data_mut()[i] -= h;
                (f(&p) - f(&m)) / (2.0 * h)
            })
            .collect()
    }

    fn check(build: impl Fn(&mut Graph, Var) -> Var, x: Tensor) {
        let f = |t: &Tensor| {
            let mut g = Graph::new();
            let v = g.param(t);
            let out = build(&mut g, v);
            g.scalar_value(out)
        };
        let mut g = Graph::new();
        let v = g.param(&x);
        let out = build(&mut g, v);
        let analytic = g.backward(out).unwrap().get_or_zeros(&g, v);
        let num = numeric(&f, &x);
        for (a, n) in analytic.data().iter().zip(&num) {
            assert!((a - n).abs() <= 1e-6 * (1.0 + a.abs()), "analytic {a} numeric {n}");
        }
    }

    fn weights(g: &mut Graph, v: Var, seed: u64) -> Var {
        let (r, c) = g.dims(v);
        let w = SeededRng::new(seed).uniform_tensor(&[r, c], -1.0, 1.0);
        let w = g.constant(&w);
        let p = g.mul(v, w).unwrap();
        g.sum_all(p)
    }

    #[test]
    fn elementwise_ops() {
        let x = SeededRng::new(1).uniform_tensor(&[3, 4], 0.5, 2.0);
        check(|g, v| { let e = g.exp(v); weights(g, e, 2) }, x.clone());
        check(|g, v| { let e = g.ln(v); weights(g, e, 2) }, x.clone());
        check(|g, v| { let e = g.sigmoid(v); weights(g, e, 2) }, x.clone());
        check(|g, v| { let e = g.square(v); weights(g, e, 2) }, x.clone());
        check(|g, v| { let e = g.log_sigmoid(v); weights(g, e, 2) }, x.map(|v| 6.0 * v - 6.0));
        check(|g, v| { let e = g.div(v, v).unwrap(); let s = g.mul(e, v).unwrap(); weights(g, s, 2) }, x.clone());
        check(|g, v| { let e = g.clamp_min(v, 1.0); weights(g, e, 2) }, x.clone().map(|v| if (v - 1.0).abs() < 1e-3 { 1.5 } else { v }));
    }

    #[test]
    fn structural_ops() {
        let x = SeededRng::new(3).uniform_tensor(&[3, 4], -1.0, 1.0);
        check(|g, v| { let t = g.transpose(v); weights(g, t, 4) }, x.clone());
        check(|g, v| { let t = g.sum_rows(v); let b = g.broadcast(t, 5, 4).unwrap(); weights(g, b, 4) }, x.clone());
        check(|g, v| { let t = g.sum_cols(v); let b = g.broadcast(t, 3, 2).unwrap(); weights(g, b, 4) }, x.clone());
        check(|g, v| { let t = g.softmax_rows(v); weights(g, t, 4) }, x.clone());
        check(|g, v| { let t = g.softmax_cols(v); weights(g, t, 4) }, x.clone());
        check(|g, v| { let t = g.layer_norm_rows(v, 1e-5); weights(g, t, 4) }, x.clone());
        check(|g, v| {
            let a = g.slice_rows(v, 1, 2).unwrap();
            let b = g.column(v, 3).unwrap();
            let top = g.slice_rows(v, 0, 1).unwrap();
            let c = g.concat_rows(&[a, top]).unwrap();
            let d = g.concat_cols(&[b, c, b]).unwrap();
            weights(g, d, 4)
        }, x.clone());
        check(|g, v| { let vt = g.transpose(v); let t = g.matmul(v, vt).unwrap(); weights(g, t, 4) }, x.clone());
        check(|g, v| { let vt = g.transpose(v); let t = g.matmul(vt, v).unwrap(); weights(g, t, 4) }, x.clone());
        check(|g, v| { let r = g.reshape(v, 2, 6).unwrap(); let gt = g.gather(r, &[0, 5, 5, 11]).unwrap(); weights(g, gt, 4) }, x.clone());
        check(|g, v| { let r = g.reshape(v, 1, 12).unwrap(); g.cross_entropy(r, 7).unwrap() }, x);
    }

    #[test]
    fn pose_transform_both_operands() {
        let mut rng = SeededRng::new(5);
        let poses = rng.uniform_tensor(&[3, 4], -1.0, 1.0);
        let t = rng.uniform_tensor(&[6, 2], -1.0, 1.0);
        let tc = t.clone();
        check(move |g, v| { let tv = g.constant(&tc); let o = g.pose_transform(v, tv, 2, 2).unwrap(); weights(g, o, 6) }, poses.clone());
        let pc = poses.clone();
        check(move |g, v| { let pv = g.constant(&pc); let o = g.pose_transform(pv, v, 2, 2).unwrap(); weights(g, o, 6) }, t);
        // p = 1 reads each row as a vector.
        let vt = rng.uniform_tensor(&[12, 4], -1.0, 1.0);
        check(move |g, v| { let tv = g.constant(&vt); let o = g.pose_transform(v, tv, 1, 4).unwrap(); weights(g, o, 6) }, poses);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(&Tensor::scalar(2.0));
        let p = g.param(&Tensor::scalar(3.0));
        let y = g.mul(c, p).unwrap();
        let grads = g.backward(y).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[2.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::zeros(&[2, 2]));
        assert!(g.backward(p).is_err());
    }
}
