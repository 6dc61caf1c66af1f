//! Reverse-mode automatic differentiation on a flat operation tape.
//!
//! Forward values live in a single bump arena per tape; recording an
//! operation appends one node and one value block, so rebuilding the graph
//! every iteration costs no per-node heap allocation. The backward pass
//! walks the node list in reverse and accumulates adjoints into a parallel
//! arena, which keeps gradients exact (plain chain rule, no approximation)
//! and deterministic.
//!
//! A tape is single-threaded; run one tape per batch member for parallelism.

use crate::matrix::Mat;
use thiserror::Error;

pub type NodeId = u32;

/// `sig` saturates at `1 - SIG_CLAMP_MARGIN` so that controls scaled by
/// `U_max` stay strictly inside the saturation bounds even when `tanh`
/// rounds to exactly one.
const SIG_CLAMP: f64 = 1.0 - 1e-15;

/// Handle to a value recorded on a [`Tape`]. Cheap to copy; the data lives
/// in the tape arena.
#[derive(Clone, Copy, Debug)]
pub struct Tensor {
    id: NodeId,
    rows: u32,
    cols: u32,
}

impl Tensor {
    pub fn id(&self) -> NodeId {
        self.id
    }

    pub fn rows(&self) -> usize {
        self.rows as usize
    }

    pub fn cols(&self) -> usize {
        self.cols as usize
    }

    pub fn len(&self) -> usize {
        (self.rows * self.cols) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    fn shape(&self) -> (usize, usize) {
        (self.rows as usize, self.cols as usize)
    }
}

#[derive(Debug, Error)]
pub enum TapeError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("backward root must be a scalar, got {rows}x{cols}")]
    NonScalarRoot { rows: usize, cols: usize },
    #[error("gradients not available; call backward first")]
    NoGradients,
    #[error("non-finite value encountered in {what}")]
    NonFinite { what: &'static str },
}

#[derive(Clone, Debug)]
enum Op {
    Leaf { trainable: bool },
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Dot(NodeId, NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Sig(NodeId),
    Sin(NodeId),
    Cos(NodeId),
    Ln(NodeId),
    Recip(NodeId),
    LnCosh(NodeId),
    Square(NodeId),
    Sum(NodeId),
    Neg(NodeId),
    Scale(NodeId, f64),
    Offset(NodeId, f64),
    Transpose(NodeId),
    SliceRows(NodeId, u32),
    Concat(Vec<NodeId>),
}

struct Node {
    op: Op,
    off: usize,
    rows: u32,
    cols: u32,
}

/// Define-by-run gradient tape.
pub struct Tape {
    nodes: Vec<Node>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    adj_ready: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(cosh(x))` without overflow for large `|x|`.
pub fn ln_cosh(x: f64) -> f64 {
    let a = x.abs();
    a + (-2.0 * a).exp().ln_1p() - std::f64::consts::LN_2
}

fn sig_clamped(x: f64) -> f64 {
    (0.5 * x).tanh().clamp(-SIG_CLAMP, SIG_CLAMP)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            vals: Vec::new(),
            adj: Vec::new(),
            adj_ready: false,
        }
    }

    pub fn with_capacity(nodes: usize, values: usize) -> Self {
        Tape {
            nodes: Vec::with_capacity(nodes),
            vals: Vec::with_capacity(values),
            adj: Vec::new(),
            adj_ready: false,
        }
    }

    /// Drop all recorded nodes and values, keeping allocations for reuse.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.vals.clear();
        self.adj.clear();
        self.adj_ready = false;
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn value_len(&self) -> usize {
        self.vals.len()
    }

    /// Forward value of a recorded tensor.
    pub fn value(&self, t: Tensor) -> &[f64] {
        let node = &self.nodes[t.id as usize];
        &self.vals[node.off..node.off + t.len()]
    }

    pub fn value_scalar(&self, t: Tensor) -> f64 {
        self.value(t)[0]
    }

    pub fn value_mat(&self, t: Tensor) -> Mat {
        Mat::new(t.rows(), t.cols(), self.value(t).to_vec())
    }

    fn push(&mut self, op: Op, rows: usize, cols: usize) -> Tensor {
        let off = self.vals.len();
        self.vals.resize(off + rows * cols, 0.0);
        let id = self.nodes.len() as NodeId;
        self.nodes.push(Node {
            op,
            off,
            rows: rows as u32,
            cols: cols as u32,
        });
        self.adj_ready = false;
        Tensor {
            id,
            rows: rows as u32,
            cols: cols as u32,
        }
    }

    fn out_slice(&mut self, t: Tensor) -> &mut [f64] {
        let node = &self.nodes[t.id as usize];
        let off = node.off;
        &mut self.vals[off..off + t.len()]
    }

    fn offset_of(&self, id: NodeId) -> usize {
        self.nodes[id as usize].off
    }

    /// Record an input value. Only trainable leaves receive gradients
    /// callers care about, but every node's adjoint is defined after
    /// `backward`.
    pub fn leaf(&mut self, data: &[f64], rows: usize, cols: usize, trainable: bool) -> Tensor {
        assert_eq!(data.len(), rows * cols, "leaf data length mismatch");
        let t = self.push(Op::Leaf { trainable }, rows, cols);
        self.out_slice(t).copy_from_slice(data);
        t
    }

    pub fn leaf_mat(&mut self, m: &Mat, trainable: bool) -> Tensor {
        self.leaf(m.data(), m.rows(), m.cols(), trainable)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.leaf(&[v], 1, 1, false)
    }

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TapeError> {
        if a.cols != b.rows {
            return Err(TapeError::Shape {
                op: "matmul",
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        let (m, k, n) = (a.rows(), a.cols(), b.cols());
        let t = self.push(Op::MatMul(a.id, b.id), m, n);
        let ao = self.offset_of(a.id);
        let bo = self.offset_of(b.id);
        let oo = self.offset_of(t.id);
        let (vals, out) = self.vals.split_at_mut(oo);
        let av = &vals[ao..ao + m * k];
        let bv = &vals[bo..bo + k * n];
        matmul_kernel(&mut out[..m * n], av, bv, m, k, n);
        Ok(t)
    }

    fn binary_same_shape(
        &mut self,
        op_name: &'static str,
        a: Tensor,
        b: Tensor,
    ) -> Result<(), TapeError> {
        if a.rows != b.rows || a.cols != b.cols {
            return Err(TapeError::Shape {
                op: op_name,
                lhs: a.shape(),
                rhs: b.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TapeError> {
        self.binary_same_shape("add", a, b)?;
        let t = self.push(Op::Add(a.id, b.id), a.rows(), a.cols());
        self.elementwise_binary(t, a, b, |x, y| x + y);
        Ok(t)
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TapeError> {
        self.binary_same_shape("sub", a, b)?;
        let t = self.push(Op::Sub(a.id, b.id), a.rows(), a.cols());
        self.elementwise_binary(t, a, b, |x, y| x - y);
        Ok(t)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TapeError> {
        self.binary_same_shape("mul", a, b)?;
        let t = self.push(Op::Mul(a.id, b.id), a.rows(), a.cols());
        self.elementwise_binary(t, a, b, |x, y| x * y);
        Ok(t)
    }

    /// Sum of elementwise products, as a scalar.
    pub fn dot(&mut self, a: Tensor, b: Tensor) -> Result<Tensor, TapeError> {
        self.binary_same_shape("dot", a, b)?;
        let t = self.push(Op::Dot(a.id, b.id), 1, 1);
        let ao = self.offset_of(a.id);
        let bo = self.offset_of(b.id);
        let n = a.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.vals[ao + i] * self.vals[bo + i];
        }
        let oo = self.offset_of(t.id);
        self.vals[oo] = acc;
        Ok(t)
    }

    fn elementwise_binary(&mut self, t: Tensor, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) {
        let ao = self.offset_of(a.id);
        let bo = self.offset_of(b.id);
        let oo = self.offset_of(t.id);
        for i in 0..t.len() {
            self.vals[oo + i] = f(self.vals[ao + i], self.vals[bo + i]);
        }
    }

    fn unary(&mut self, op: Op, a: Tensor, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.push(op, a.rows(), a.cols());
        let ao = self.offset_of(a.id);
        let oo = self.offset_of(t.id);
        for i in 0..t.len() {
            self.vals[oo + i] = f(self.vals[ao + i]);
        }
        t
    }

    pub fn tanh(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Tanh(a.id), a, f64::tanh))
    }

    pub fn sigmoid(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Sigmoid(a.id), a, sigmoid))
    }

    /// The odd saturating sigmoid `2/(1+e^-v) - 1 = tanh(v/2)`, clamped a
    /// hair inside (-1, 1) so downstream controls stay strictly interior.
    pub fn sig(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Sig(a.id), a, sig_clamped))
    }

    pub fn sin(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Sin(a.id), a, f64::sin))
    }

    pub fn cos(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Cos(a.id), a, f64::cos))
    }

    pub fn ln(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Ln(a.id), a, f64::ln))
    }

    pub fn recip(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Recip(a.id), a, f64::recip))
    }

    pub fn ln_cosh(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::LnCosh(a.id), a, ln_cosh))
    }

    pub fn square(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Square(a.id), a, |x| x * x))
    }

    pub fn neg(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Neg(a.id), a, |x| -x))
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Scale(a.id, c), a, |x| c * x))
    }

    pub fn offset(&mut self, a: Tensor, c: f64) -> Result<Tensor, TapeError> {
        Ok(self.unary(Op::Offset(a.id, c), a, |x| x + c))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        let t = self.push(Op::Sum(a.id), 1, 1);
        let ao = self.offset_of(a.id);
        let mut acc = 0.0;
        for i in 0..a.len() {
            acc += self.vals[ao + i];
        }
        let oo = self.offset_of(t.id);
        self.vals[oo] = acc;
        Ok(t)
    }

    pub fn transpose(&mut self, a: Tensor) -> Result<Tensor, TapeError> {
        let (r, c) = a.shape();
        let t = self.push(Op::Transpose(a.id), c, r);
        let ao = self.offset_of(a.id);
        let oo = self.offset_of(t.id);
        for i in 0..r {
            for j in 0..c {
                self.vals[oo + j * r + i] = self.vals[ao + i * c + j];
            }
        }
        Ok(t)
    }

    /// Rows `start..start+len` of `a`.
    pub fn slice_rows(&mut self, a: Tensor, start: usize, len: usize) -> Result<Tensor, TapeError> {
        if start + len > a.rows() {
            return Err(TapeError::Invalid {
                op: "slice_rows",
                msg: format!(
                    "rows {}..{} out of bounds for {} rows",
                    start,
                    start + len,
                    a.rows()
                ),
            });
        }
        let cols = a.cols();
        let t = self.push(Op::SliceRows(a.id, start as u32), len, cols);
        let ao = self.offset_of(a.id);
        let oo = self.offset_of(t.id);
        for i in 0..len * cols {
            self.vals[oo + i] = self.vals[ao + start * cols + i];
        }
        Ok(t)
    }

    /// Vertical concatenation; all parts must share a column count.
    pub fn concat(&mut self, parts: &[Tensor]) -> Result<Tensor, TapeError> {
        let first = parts.first().ok_or_else(|| TapeError::Invalid {
            op: "concat",
            msg: "empty input list".into(),
        })?;
        let cols = first.cols();
        let mut rows = 0;
        for p in parts {
            if p.cols() != cols {
                return Err(TapeError::Shape {
                    op: "concat",
                    lhs: first.shape(),
                    rhs: p.shape(),
                });
            }
            rows += p.rows();
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let t = self.push(Op::Concat(ids), rows, cols);
        let oo = self.offset_of(t.id);
        let mut cursor = 0;
        for p in parts {
            let po = self.offset_of(p.id);
            for i in 0..p.len() {
                self.vals[oo + cursor + i] = self.vals[po + i];
            }
            cursor += p.len();
        }
        Ok(t)
    }

    /// Reverse pass from a scalar root. Adjoints for every node become
    /// available through [`Tape::gradient`]; the tape stays reusable.
    pub fn backward(&mut self, root: Tensor) -> Result<(), TapeError> {
        if !root.is_scalar() {
            return Err(TapeError::NonScalarRoot {
                rows: root.rows(),
                cols: root.cols(),
            });
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        let root_off = self.offset_of(root.id);
        self.adj[root_off] = 1.0;

        for idx in (0..=(root.id as usize)).rev() {
            let (op, off, rows, cols) = {
                let n = &self.nodes[idx];
                (n.op.clone(), n.off, n.rows as usize, n.cols as usize)
            };
            let len = rows * cols;
            match op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let (m, n) = (rows, cols);
                    let k = self.nodes[a as usize].cols as usize;
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    // dA += G * B^T
                    {
                        let (lower, upper) = self.adj.split_at_mut(off);
                        let g = &upper[..len];
                        let bv = &self.vals[bo..bo + k * n];
                        let da = &mut lower[ao..ao + m * k];
                        for i in 0..m {
                            for j in 0..k {
                                let mut acc = 0.0;
                                for c in 0..n {
                                    acc += g[i * n + c] * bv[j * n + c];
                                }
                                da[i * k + j] += acc;
                            }
                        }
                    }
                    // dB += A^T * G
                    {
                        let (lower, upper) = self.adj.split_at_mut(off);
                        let g = &upper[..len];
                        let av = &self.vals[ao..ao + m * k];
                        let db = &mut lower[bo..bo + k * n];
                        for i in 0..m {
                            for j in 0..k {
                                let a_ij = av[i * k + j];
                                if a_ij == 0.0 {
                                    continue;
                                }
                                for c in 0..n {
                                    db[j * n + c] += a_ij * g[i * n + c];
                                }
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    for i in 0..len {
                        let g = self.adj[off + i];
                        self.adj[ao + i] += g;
                        self.adj[bo + i] += g;
                    }
                }
                Op::Sub(a, b) => {
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    for i in 0..len {
                        let g = self.adj[off + i];
                        self.adj[ao + i] += g;
                        self.adj[bo + i] -= g;
                    }
                }
                Op::Mul(a, b) => {
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    for i in 0..len {
                        let g = self.adj[off + i];
                        let va = self.vals[ao + i];
                        let vb = self.vals[bo + i];
                        self.adj[ao + i] += g * vb;
                        self.adj[bo + i] += g * va;
                    }
                }
                Op::Dot(a, b) => {
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    let g = self.adj[off];
                    let n = self.nodes[a as usize].rows as usize
                        * self.nodes[a as usize].cols as usize;
                    for i in 0..n {
                        let va = self.vals[ao + i];
                        let vb = self.vals[bo + i];
                        self.adj[ao + i] += g * vb;
                        self.adj[bo + i] += g * va;
                    }
                }
                Op::Tanh(a) => self.unary_backward(a, off, len, |_, y| 1.0 - y * y),
                Op::Sigmoid(a) => self.unary_backward(a, off, len, |_, y| y * (1.0 - y)),
                Op::Sig(a) => self.unary_backward(a, off, len, |_, y| 0.5 * (1.0 - y * y)),
                Op::Sin(a) => self.unary_backward(a, off, len, |x, _| x.cos()),
                Op::Cos(a) => self.unary_backward(a, off, len, |x, _| -x.sin()),
                Op::Ln(a) => self.unary_backward(a, off, len, |x, _| 1.0 / x),
                Op::Recip(a) => self.unary_backward(a, off, len, |_, y| -y * y),
                Op::LnCosh(a) => self.unary_backward(a, off, len, |x, _| x.tanh()),
                Op::Square(a) => self.unary_backward(a, off, len, |x, _| 2.0 * x),
                Op::Neg(a) => self.unary_backward(a, off, len, |_, _| -1.0),
                Op::Scale(a, c) => self.unary_backward(a, off, len, |_, _| c),
                Op::Offset(a, _) => self.unary_backward(a, off, len, |_, _| 1.0),
                Op::Sum(a) => {
                    let ao = self.offset_of(a);
                    let g = self.adj[off];
                    let n = self.nodes[a as usize].rows as usize
                        * self.nodes[a as usize].cols as usize;
                    for i in 0..n {
                        self.adj[ao + i] += g;
                    }
                }
                Op::Transpose(a) => {
                    let ao = self.offset_of(a);
                    // output is cols x rows of input
                    let (or, oc) = (rows, cols);
                    for i in 0..or {
                        for j in 0..oc {
                            self.adj[ao + j * or + i] += self.adj[off + i * oc + j];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let ao = self.offset_of(a);
                    let in_cols = self.nodes[a as usize].cols as usize;
                    let base = ao + start as usize * in_cols;
                    for i in 0..len {
                        self.adj[base + i] += self.adj[off + i];
                    }
                }
                Op::Concat(parts) => {
                    let mut cursor = 0;
                    for p in parts {
                        let po = self.offset_of(p);
                        let plen = self.nodes[p as usize].rows as usize
                            * self.nodes[p as usize].cols as usize;
                        for i in 0..plen {
                            self.adj[po + i] += self.adj[off + cursor + i];
                        }
                        cursor += plen;
                    }
                }
            }
        }
        self.adj_ready = true;
        Ok(())
    }

    fn unary_backward(&mut self, a: NodeId, off: usize, len: usize, d: impl Fn(f64, f64) -> f64) {
        let ao = self.offset_of(a);
        for i in 0..len {
            let g = self.adj[off + i];
            if g == 0.0 {
                continue;
            }
            let x = self.vals[ao + i];
            let y = self.vals[off + i];
            self.adj[ao + i] += g * d(x, y);
        }
    }

    /// Handles of every leaf recorded as trainable, in recording order.
    pub fn trainable_leaves(&self) -> Vec<Tensor> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.op, Op::Leaf { trainable: true }))
            .map(|(id, n)| Tensor {
                id: id as NodeId,
                rows: n.rows,
                cols: n.cols,
            })
            .collect()
    }

    /// Adjoint of a recorded tensor; valid after [`Tape::backward`].
    pub fn gradient(&self, t: Tensor) -> Result<&[f64], TapeError> {
        if !self.adj_ready {
            return Err(TapeError::NoGradients);
        }
        let node = &self.nodes[t.id as usize];
        Ok(&self.adj[node.off..node.off + t.len()])
    }

    pub fn gradient_mat(&self, t: Tensor) -> Result<Mat, TapeError> {
        Ok(Mat::new(t.rows(), t.cols(), self.gradient(t)?.to_vec()))
    }

    /// Recompute every forward value from the recorded operations, in place.
    /// Leaves keep their stored values.
    pub fn replay(&mut self) {
        for idx in 0..self.nodes.len() {
            let (op, off, rows, cols) = {
                let n = &self.nodes[idx];
                (n.op.clone(), n.off, n.rows as usize, n.cols as usize)
            };
            let len = rows * cols;
            match op {
                Op::Leaf { .. } => {}
                Op::MatMul(a, b) => {
                    let k = self.nodes[a as usize].cols as usize;
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    let (vals, out) = self.vals.split_at_mut(off);
                    let av = &vals[ao..ao + rows * k];
                    let bv = &vals[bo..bo + k * cols];
                    matmul_kernel(&mut out[..len], av, bv, rows, k, cols);
                }
                Op::Add(a, b) => self.replay_binary(a, b, off, len, |x, y| x + y),
                Op::Sub(a, b) => self.replay_binary(a, b, off, len, |x, y| x - y),
                Op::Mul(a, b) => self.replay_binary(a, b, off, len, |x, y| x * y),
                Op::Dot(a, b) => {
                    let ao = self.offset_of(a);
                    let bo = self.offset_of(b);
                    let n = self.nodes[a as usize].rows as usize
                        * self.nodes[a as usize].cols as usize;
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += self.vals[ao + i] * self.vals[bo + i];
                    }
                    self.vals[off] = acc;
                }
                Op::Tanh(a) => self.replay_unary(a, off, len, f64::tanh),
                Op::Sigmoid(a) => self.replay_unary(a, off, len, sigmoid),
                Op::Sig(a) => self.replay_unary(a, off, len, sig_clamped),
                Op::Sin(a) => self.replay_unary(a, off, len, f64::sin),
                Op::Cos(a) => self.replay_unary(a, off, len, f64::cos),
                Op::Ln(a) => self.replay_unary(a, off, len, f64::ln),
                Op::Recip(a) => self.replay_unary(a, off, len, f64::recip),
                Op::LnCosh(a) => self.replay_unary(a, off, len, ln_cosh),
                Op::Square(a) => self.replay_unary(a, off, len, |x| x * x),
                Op::Neg(a) => self.replay_unary(a, off, len, |x| -x),
                Op::Scale(a, c) => self.replay_unary(a, off, len, |x| c * x),
                Op::Offset(a, c) => self.replay_unary(a, off, len, |x| x + c),
                Op::Sum(a) => {
                    let ao = self.offset_of(a);
                    let n = self.nodes[a as usize].rows as usize
                        * self.nodes[a as usize].cols as usize;
                    let mut acc = 0.0;
                    for i in 0..n {
                        acc += self.vals[ao + i];
                    }
                    self.vals[off] = acc;
                }
                Op::Transpose(a) => {
                    let ao = self.offset_of(a);
                    for i in 0..rows {
                        for j in 0..cols {
                            self.vals[off + i * cols + j] = self.vals[ao + j * rows + i];
                        }
                    }
                }
                Op::SliceRows(a, start) => {
                    let ao = self.offset_of(a);
                    let in_cols = self.nodes[a as usize].cols as usize;
                    let base = ao + start as usize * in_cols;
                    for i in 0..len {
                        self.vals[off + i] = self.vals[base + i];
                    }
                }
                Op::Concat(parts) => {
                    let mut cursor = 0;
                    for p in parts {
                        let po = self.offset_of(p);
                        let plen = self.nodes[p as usize].rows as usize
                            * self.nodes[p as usize].cols as usize;
                        for i in 0..plen {
                            self.vals[off + cursor + i] = self.vals[po + i];
                        }
                        cursor += plen;
                    }
                }
            }
        }
    }

    fn replay_unary(&mut self, a: NodeId, off: usize, len: usize, f: impl Fn(f64) -> f64) {
        let ao = self.offset_of(a);
        for i in 0..len {
            self.vals[off + i] = f(self.vals[ao + i]);
        }
    }

    fn replay_binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        off: usize,
        len: usize,
        f: impl Fn(f64, f64) -> f64,
    ) {
        let ao = self.offset_of(a);
        let bo = self.offset_of(b);
        for i in 0..len {
            self.vals[off + i] = f(self.vals[ao + i], self.vals[bo + i]);
        }
    }
}

fn matmul_kernel(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    out.fill(0.0);
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for c in 0..n {
                orow[c] += aip * brow[c];
            }
        }
    }
}

/// Maximum relative error between the tape gradient of `f` and central
/// finite differences (step `1e-5`) at `point`. `f` must build a scalar
/// output from the single leaf it is handed.
pub fn grad_check<F>(f: F, point: &[f64]) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape, Tensor) -> Result<Tensor, TapeError>,
{
    const STEP: f64 = 1e-5;

    let eval = |vals: &[f64]| -> Result<f64, TapeError> {
        let mut tape = Tape::new();
        let p = tape.leaf(vals, vals.len(), 1, true);
        let out = f(&mut tape, p)?;
        if !out.is_scalar() {
            return Err(TapeError::NonScalarRoot {
                rows: out.rows(),
                cols: out.cols(),
            });
        }
        let y = tape.value_scalar(out);
        if !y.is_finite() {
            return Err(TapeError::NonFinite {
                what: "grad_check objective",
            });
        }
        Ok(y)
    };

    let mut tape = Tape::new();
    let p = tape.leaf(point, point.len(), 1, true);
    let out = f(&mut tape, p)?;
    if !out.is_scalar() {
        return Err(TapeError::NonScalarRoot {
            rows: out.rows(),
            cols: out.cols(),
        });
    }
    if !tape.value_scalar(out).is_finite() {
        return Err(TapeError::NonFinite {
            what: "grad_check objective",
        });
    }
    tape.backward(out)?;
    let analytic = tape.gradient(p)?.to_vec();

    let mut worst = 0.0f64;
    let mut perturbed = point.to_vec();
    for i in 0..point.len() {
        perturbed[i] = point[i] + STEP;
        let fp = eval(&perturbed)?;
        perturbed[i] = point[i] - STEP;
        let fm = eval(&perturbed)?;
        perturbed[i] = point[i];
        let fd = (fp - fm) / (2.0 * STEP);
        let denom = analytic[i].abs().max(1.0);
        worst = worst.max((analytic[i] - fd).abs() / denom);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn matmul_identity_passes_vector_through() {
        let mut tape = Tape::new();
        let eye = tape.leaf(&[1.0, 0.0, 0.0, 1.0], 2, 2, false);
        let v = tape.leaf(&[3.5, -1.25], 2, 1, false);
        let out = tape.matmul(eye, v).unwrap();
        assert_eq!(tape.value(out), &[3.5, -1.25]);
    }

    #[test]
    fn sigmoid_at_zero_is_half() {
        let mut tape = Tape::new();
        let x = tape.scalar(0.0);
        let s = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value_scalar(s), 0.5);
    }

    #[test]
    fn sum_of_squares() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[3.0, 4.0], 2, 1, false);
        let sq = tape.square(v).unwrap();
        let s = tape.sum(sq).unwrap();
        assert_eq!(tape.value_scalar(s), 25.0);
    }

    #[test]
    fn product_rule() {
        let mut tape = Tape::new();
        let x = tape.leaf(&[2.0], 1, 1, true);
        let y = tape.leaf(&[3.0], 1, 1, true);
        let p = tape.mul(x, y).unwrap();
        tape.backward(p).unwrap();
        assert_eq!(tape.gradient(x).unwrap(), &[3.0]);
        assert_eq!(tape.gradient(y).unwrap(), &[2.0]);
    }

    #[test]
    fn tanh_gradient_at_zero_is_one() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[0.0; 5], 5, 1, true);
        let t = tape.tanh(v).unwrap();
        let s = tape.sum(t).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.gradient(v).unwrap(), &[1.0; 5]);
    }

    #[test]
    fn shape_mismatch_reports_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&[1.0, 2.0], 2, 1, false);
        let b = tape.leaf(&[1.0, 2.0, 3.0], 3, 1, false);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add"), "{msg}");
        assert!(msg.contains("(2, 1)") && msg.contains("(3, 1)"), "{msg}");
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[1.0, 2.0], 2, 1, true);
        let err = tape.backward(v).unwrap_err();
        assert!(matches!(err, TapeError::NonScalarRoot { rows: 2, cols: 1 }));
    }

    #[test]
    fn replay_is_bit_identical() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[0.3, -1.7, 2.9], 3, 1, true);
        let w = tape.leaf(&[0.11, 0.2, -0.4, 1.0, 0.5, -0.9], 2, 3, false);
        let h = tape.matmul(w, v).unwrap();
        let t = tape.tanh(h).unwrap();
        let lc = tape.ln_cosh(t).unwrap();
        let s = tape.sum(lc).unwrap();
        let before = tape.vals.clone();
        let y0 = tape.value_scalar(s);
        tape.replay();
        assert_eq!(tape.vals, before);
        assert_eq!(tape.value_scalar(s).to_bits(), y0.to_bits());
    }

    #[test]
    fn adjoints_are_linear_over_subgraph_sums() {
        // gradient of (f + g) equals gradient of f plus gradient of g
        let build = |with_f: bool, with_g: bool| -> Vec<f64> {
            let mut tape = Tape::new();
            let v = tape.leaf(&[0.4, -0.8, 1.2], 3, 1, true);
            let mut terms = Vec::new();
            if with_f {
                let sq = tape.square(v).unwrap();
                terms.push(tape.sum(sq).unwrap());
            }
            if with_g {
                let t = tape.tanh(v).unwrap();
                terms.push(tape.sum(t).unwrap());
            }
            let root = if terms.len() == 2 {
                tape.add(terms[0], terms[1]).unwrap()
            } else {
                terms[0]
            };
            tape.backward(root).unwrap();
            tape.gradient(v).unwrap().to_vec()
        };
        let both = build(true, true);
        let f_only = build(true, false);
        let g_only = build(false, true);
        for i in 0..3 {
            assert_relative_eq!(both[i], f_only[i] + g_only[i], epsilon = 1e-15);
        }
    }

    #[test]
    fn tape_is_reusable_after_clear() {
        let mut tape = Tape::new();
        for _ in 0..3 {
            let x = tape.leaf(&[1.5], 1, 1, true);
            let y = tape.square(x).unwrap();
            tape.backward(y).unwrap();
            assert_eq!(tape.gradient(x).unwrap(), &[3.0]);
            tape.clear();
            assert_eq!(tape.node_count(), 0);
        }
    }

    #[test]
    fn grad_check_quadratic_is_tiny() {
        // f(p) = 0.5 * ||p||^2, analytic gradient = p
        let err = grad_check(
            |tape, p| {
                let sq = tape.square(p)?;
                let s = tape.sum(sq)?;
                tape.scale(s, 0.5)
            },
            &[1.0, 2.0],
        )
        .unwrap();
        assert!(err < 1e-9, "relative error {err}");
    }

    #[test]
    fn grad_check_rejects_non_finite() {
        let err = grad_check(
            |tape, p| {
                let l = tape.ln(p)?;
                tape.sum(l)
            },
            &[-1.0],
        );
        assert!(err.is_err());
    }

    #[test]
    fn sig_is_strictly_interior_for_huge_inputs() {
        let mut tape = Tape::new();
        let v = tape.leaf(&[1e6, -1e6, 50.0], 3, 1, false);
        let s = tape.sig(v).unwrap();
        let vals = tape.value(s);
        assert!(vals[0] < 1.0 && vals[0] > 1.0 - 1e-9);
        assert!(vals[1] > -1.0 && vals[1] < -(1.0 - 1e-9));
        assert!(vals[2] > 1.0 - 1e-9 && vals[2] < 1.0);
    }
}
