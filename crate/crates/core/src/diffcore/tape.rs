use std::sync::atomic::{AtomicU64, Ordering};

use super::tensor::{NodeId, Tensor};
use super::DiffError;

/// Largest x for which exp(x) is finite in f64.
const EXP_OVERFLOW_BOUND: f64 = 709.782712893384;

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

type Result<T> = std::result::Result<T, DiffError>;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    MatVec(NodeId, NodeId),
    VecMat(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    BroadcastAddRow(NodeId, NodeId),
    Mul(NodeId, NodeId),
    ScalarScale(NodeId, NodeId),
    ConcatCols(NodeId, NodeId),
    StackRows(Vec<NodeId>),
    SumAll(NodeId),
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    SoftmaxVec(NodeId),
    LogSumExpVec(NodeId),
    IndexRow(NodeId, usize),
    IndexCol(NodeId, usize),
    IndexElem(NodeId, usize),
    SliceCols(NodeId, usize, usize),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-use record of a forward computation.
///
/// Every op validates its input shapes, computes the result eagerly, and
/// appends a node; inputs always precede their consumers, so the record is
/// topologically ordered by construction. Tensors produced by other tapes (or
/// by no tape) are lifted in as fresh leaves, i.e. treated as constants of
/// this computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Register a tensor as a leaf of this tape and return the attached
    /// handle. Gradients can later be queried through the handle.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf, t.detach());
        self.nodes[id].value.clone()
    }

    /// Node id for an input tensor, lifting foreign/detached tensors as
    /// constant leaves of this tape.
    fn input(&mut self, t: &Tensor) -> NodeId {
        match t.origin {
            Some((tape, node)) if tape == self.id => node,
            _ => self.push(Op::Leaf, t.detach()),
        }
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let id = self.nodes.len();
        let value = value.with_origin(self.id, id);
        self.nodes.push(Node { op, value });
        id
    }

    fn record(&mut self, op: Op, shape: &[usize], data: Vec<f64>) -> Tensor {
        debug_assert!(
            data.iter().all(|v| v.is_finite()),
            "non-finite forward value out of {op:?}"
        );
        let id = self.push(op, Tensor::new(shape, data));
        self.nodes[id].value.clone()
    }

    fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    // ---- shape validation helpers -------------------------------------

    fn want_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(DiffError::RankMismatch {
                op,
                expected: "a rank-2 tensor",
                got: other.to_vec(),
            }),
        }
    }

    fn want_vector(op: &'static str, t: &Tensor) -> Result<usize> {
        match t.shape() {
            [n] => Ok(*n),
            other => Err(DiffError::RankMismatch {
                op,
                expected: "a rank-1 tensor",
                got: other.to_vec(),
            }),
        }
    }

    fn want_scalar(op: &'static str, t: &Tensor) -> Result<()> {
        if t.is_scalar() {
            Ok(())
        } else {
            Err(DiffError::RankMismatch {
                op,
                expected: "a scalar (one element)",
                got: t.shape().to_vec(),
            })
        }
    }

    fn want_finite(op: &'static str, t: &Tensor) -> Result<()> {
        if t.is_finite() {
            Ok(())
        } else {
            Err(DiffError::NonFiniteInput { op })
        }
    }

    // ---- linear algebra ------------------------------------------------

    /// `C = A · B` for `A: m×k`, `B: k×n`.
    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (m, k) = Self::want_matrix("matmul", a)?;
        let (k2, n) = Self::want_matrix("matmul", b)?;
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let ail = ad[i * k + l];
                for j in 0..n {
                    out[i * n + j] += ail * bd[l * n + j];
                }
            }
        }
        let (ia, ib) = (self.input(a), self.input(b));
        Ok(self.record(Op::MatMul(ia, ib), &[m, n], out))
    }

    /// `y = M · x` for `M: m×k`, `x: k`.
    pub fn matvec(&mut self, m: &Tensor, x: &Tensor) -> Result<Tensor> {
        let (rows, cols) = Self::want_matrix("matvec", m)?;
        let n = Self::want_vector("matvec", x)?;
        if cols != n {
            return Err(DiffError::ShapeMismatch {
                op: "matvec",
                lhs: m.shape().to_vec(),
                rhs: x.shape().to_vec(),
            });
        }
        let (md, xd) = (m.data(), x.data());
        let out: Vec<f64> = (0..rows)
            .map(|i| (0..cols).map(|j| md[i * cols + j] * xd[j]).sum())
            .collect();
        let (im, ix) = (self.input(m), self.input(x));
        Ok(self.record(Op::MatVec(im, ix), &[rows], out))
    }

    /// `y = xᵀ · M` for `x: m`, `M: m×n`.
    pub fn vecmat(&mut self, x: &Tensor, m: &Tensor) -> Result<Tensor> {
        let n = Self::want_vector("vecmat", x)?;
        let (rows, cols) = Self::want_matrix("vecmat", m)?;
        if n != rows {
            return Err(DiffError::ShapeMismatch {
                op: "vecmat",
                lhs: x.shape().to_vec(),
                rhs: m.shape().to_vec(),
            });
        }
        let (xd, md) = (x.data(), m.data());
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            let xi = xd[i];
            for j in 0..cols {
                out[j] += xi * md[i * cols + j];
            }
        }
        let (ix, im) = (self.input(x), self.input(m));
        Ok(self.record(Op::VecMat(ix, im), &[cols], out))
    }

    // ---- elementwise ----------------------------------------------------

    fn zip_same_shape(
        &mut self,
        op_name: &'static str,
        a: &Tensor,
        b: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        make: impl Fn(NodeId, NodeId) -> Op,
    ) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(DiffError::ShapeMismatch {
                op: op_name,
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
        let out: Vec<f64> = a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape().to_vec();
        let (ia, ib) = (self.input(a), self.input(b));
        Ok(self.record(make(ia, ib), &shape, out))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.zip_same_shape("elementwise_mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Add a length-`c` row vector to every row of an `r×c` matrix.
    pub fn broadcast_add_row(&mut self, m: &Tensor, row: &Tensor) -> Result<Tensor> {
        let (r, c) = Self::want_matrix("broadcast_add_row", m)?;
        let n = Self::want_vector("broadcast_add_row", row)?;
        if c != n {
            return Err(DiffError::ShapeMismatch {
                op: "broadcast_add_row",
                lhs: m.shape().to_vec(),
                rhs: row.shape().to_vec(),
            });
        }
        let (md, rd) = (m.data(), row.data());
        let out: Vec<f64> = (0..r * c).map(|i| md[i] + rd[i % c]).collect();
        let (im, ir) = (self.input(m), self.input(row));
        Ok(self.record(Op::BroadcastAddRow(im, ir), &[r, c], out))
    }

    /// Scale every element of `x` by the scalar tensor `s`.
    pub fn scalar_scale(&mut self, x: &Tensor, s: &Tensor) -> Result<Tensor> {
        Self::want_scalar("scalar_scale", s)?;
        let sv = s.data()[0];
        let out: Vec<f64> = x.iter().map(|&v| v * sv).collect();
        let shape = x.shape().to_vec();
        let (ix, is) = (self.input(x), self.input(s));
        Ok(self.record(Op::ScalarScale(ix, is), &shape, out))
    }

    // ---- concatenation and stacking --------------------------------------

    /// Concatenate along the last axis: two vectors end to end, or two
    /// matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        match (a.shape(), b.shape()) {
            ([p], [q]) => {
                let mut out = Vec::with_capacity(p + q);
                out.extend_from_slice(a.data());
                out.extend_from_slice(b.data());
                let shape = [p + q];
                let (ia, ib) = (self.input(a), self.input(b));
                Ok(self.record(Op::ConcatCols(ia, ib), &shape, out))
            }
            ([r1, p], [r2, q]) if r1 == r2 => {
                let (r, p, q) = (*r1, *p, *q);
                let mut out = Vec::with_capacity(r * (p + q));
                for i in 0..r {
                    out.extend_from_slice(&a.data()[i * p..(i + 1) * p]);
                    out.extend_from_slice(&b.data()[i * q..(i + 1) * q]);
                }
                let shape = [r, p + q];
                let (ia, ib) = (self.input(a), self.input(b));
                Ok(self.record(Op::ConcatCols(ia, ib), &shape, out))
            }
            _ => Err(DiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            }),
        }
    }

    /// Stack equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Tensor]) -> Result<Tensor> {
        if rows.is_empty() {
            return Err(DiffError::EmptyInput { op: "stack_rows" });
        }
        let n = Self::want_vector("stack_rows", &rows[0])?;
        let mut out = Vec::with_capacity(rows.len() * n);
        for row in rows {
            let len = Self::want_vector("stack_rows", row)?;
            if len != n {
                return Err(DiffError::ShapeMismatch {
                    op: "stack_rows",
                    lhs: vec![n],
                    rhs: row.shape().to_vec(),
                });
            }
            out.extend_from_slice(row.data());
        }
        let ids: Vec<NodeId> = rows.iter().map(|r| self.input(r)).collect();
        let shape = [rows.len(), n];
        Ok(self.record(Op::StackRows(ids), &shape, out))
    }

    // ---- reductions and activations ---------------------------------------

    /// Sum of all elements, as a scalar tensor.
    pub fn sum_all(&mut self, x: &Tensor) -> Result<Tensor> {
        let s: f64 = x.iter().sum();
        let ix = self.input(x);
        Ok(self.record(Op::SumAll(ix), &[1], vec![s]))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.iter().map(|&v| v.tanh()).collect();
        let shape = x.shape().to_vec();
        let ix = self.input(x);
        Ok(self.record(Op::Tanh(ix), &shape, out))
    }

    pub fn sigmoid(&mut self, x: &Tensor) -> Result<Tensor> {
        let out: Vec<f64> = x.iter().map(|&v| stable_sigmoid(v)).collect();
        let shape = x.shape().to_vec();
        let ix = self.input(x);
        Ok(self.record(Op::Sigmoid(ix), &shape, out))
    }

    /// Elementwise exp. Inputs above the f64 overflow bound are rejected
    /// rather than silently producing infinities.
    pub fn exp(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(&v) = x.iter().find(|&&v| v > EXP_OVERFLOW_BOUND) {
            return Err(DiffError::ExpOverflow {
                value: v,
                bound: EXP_OVERFLOW_BOUND,
            });
        }
        let out: Vec<f64> = x.iter().map(|&v| v.exp()).collect();
        let shape = x.shape().to_vec();
        let ix = self.input(x);
        Ok(self.record(Op::Exp(ix), &shape, out))
    }

    /// Elementwise natural log. Non-positive inputs are rejected, never
    /// clamped.
    pub fn log(&mut self, x: &Tensor) -> Result<Tensor> {
        if let Some(&v) = x.iter().find(|&&v| v <= 0.0) {
            return Err(DiffError::LogDomain { value: v });
        }
        let out: Vec<f64> = x.iter().map(|&v| v.ln()).collect();
        let shape = x.shape().to_vec();
        let ix = self.input(x);
        Ok(self.record(Op::Log(ix), &shape, out))
    }

    /// Softmax of a vector, computed with max subtraction.
    pub fn softmax_vec(&mut self, x: &Tensor) -> Result<Tensor> {
        let n = Self::want_vector("softmax_vec", x)?;
        Self::want_finite("softmax_vec", x)?;
        let out = softmax_slice(x.data());
        let ix = self.input(x);
        Ok(self.record(Op::SoftmaxVec(ix), &[n], out))
    }

    /// log Σ exp over a vector, computed with max subtraction; scalar output.
    pub fn logsumexp_vec(&mut self, x: &Tensor) -> Result<Tensor> {
        Self::want_vector("logsumexp_vec", x)?;
        Self::want_finite("logsumexp_vec", x)?;
        let v = logsumexp_slice(x.data());
        let ix = self.input(x);
        Ok(self.record(Op::LogSumExpVec(ix), &[1], vec![v]))
    }

    // ---- indexing and slicing ---------------------------------------------

    /// Row `i` of a matrix, as a vector.
    pub fn index_row(&mut self, m: &Tensor, i: usize) -> Result<Tensor> {
        let (r, c) = Self::want_matrix("index_row", m)?;
        if i >= r {
            return Err(DiffError::IndexOutOfRange {
                op: "index_row",
                index: i,
                shape: m.shape().to_vec(),
            });
        }
        let out = m.data()[i * c..(i + 1) * c].to_vec();
        let im = self.input(m);
        Ok(self.record(Op::IndexRow(im, i), &[c], out))
    }

    /// Column `j` of a matrix, as a vector.
    pub fn index_col(&mut self, m: &Tensor, j: usize) -> Result<Tensor> {
        let (r, c) = Self::want_matrix("index_col", m)?;
        if j >= c {
            return Err(DiffError::IndexOutOfRange {
                op: "index_col",
                index: j,
                shape: m.shape().to_vec(),
            });
        }
        let out: Vec<f64> = (0..r).map(|i| m.data()[i * c + j]).collect();
        let im = self.input(m);
        Ok(self.record(Op::IndexCol(im, j), &[r], out))
    }

    /// Single element at a multi-index, as a scalar tensor.
    pub fn index_elem(&mut self, t: &Tensor, index: &[usize]) -> Result<Tensor> {
        if index.len() != t.shape().len()
            || index.iter().zip(t.shape()).any(|(&i, &d)| i >= d)
        {
            return Err(DiffError::IndexOutOfRange {
                op: "index_elem",
                index: index.last().copied().unwrap_or(0),
                shape: t.shape().to_vec(),
            });
        }
        let flat = t.flat_index(index);
        let v = t.data()[flat];
        let it = self.input(t);
        Ok(self.record(Op::IndexElem(it, flat), &[1], vec![v]))
    }

    /// Columns `lo..hi` of a matrix.
    pub fn slice_cols(&mut self, m: &Tensor, lo: usize, hi: usize) -> Result<Tensor> {
        let (r, c) = Self::want_matrix("slice_cols", m)?;
        if lo >= hi || hi > c {
            return Err(DiffError::IndexOutOfRange {
                op: "slice_cols",
                index: hi,
                shape: m.shape().to_vec(),
            });
        }
        let w = hi - lo;
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&m.data()[i * c + lo..i * c + hi]);
        }
        let im = self.input(m);
        Ok(self.record(Op::SliceCols(im, lo, hi), &[r, w], out))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar root. The root gets gradient 1; every node
    /// reachable from it accumulates its chain-rule contribution, and nodes it
    /// does not depend on read back as zero.
    ///
    /// Takes `&self`: the record is not consumed, so replaying the same tape
    /// yields bit-identical gradients.
    pub fn backward(&self, root: &Tensor) -> Result<Gradients> {
        let root_id = match root.origin {
            Some((tape, node)) if tape == self.id => node,
            _ => return Err(DiffError::DetachedRoot),
        };
        if !root.is_scalar() {
            return Err(DiffError::NonScalarRoot {
                shape: root.shape().to_vec(),
            });
        }

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root_id] = Some(vec![1.0]);

        for id in (0..=root_id).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }

        Ok(Gradients {
            tape_id: self.id,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            grads,
        })
    }

    fn backward_node(&self, id: NodeId, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let acc = |grads: &mut [Option<Vec<f64>>], target: NodeId, write: &mut dyn FnMut(&mut [f64])| {
            let numel = self.nodes[target].value.numel();
            let slot = grads[target].get_or_insert_with(|| vec![0.0; numel]);
            write(slot);
        };

        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.rows(), av.cols());
                let n = bv.cols();
                let (ad, bd) = (av.data(), bv.data());
                acc(grads, *a, &mut |da| {
                    for i in 0..m {
                        for l in 0..k {
                            let mut s = 0.0;
                            for j in 0..n {
                                s += g[i * n + j] * bd[l * n + j];
                            }
                            da[i * k + l] += s;
                        }
                    }
                });
                acc(grads, *b, &mut |db| {
                    for l in 0..k {
                        for j in 0..n {
                            let mut s = 0.0;
                            for i in 0..m {
                                s += ad[i * k + l] * g[i * n + j];
                            }
                            db[l * n + j] += s;
                        }
                    }
                });
            }
            Op::MatVec(m, x) => {
                let (mv, xv) = (self.value(*m), self.value(*x));
                let (rows, cols) = (mv.rows(), mv.cols());
                let (md, xd) = (mv.data(), xv.data());
                acc(grads, *m, &mut |dm| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dm[i * cols + j] += g[i] * xd[j];
                        }
                    }
                });
                acc(grads, *x, &mut |dx| {
                    for j in 0..cols {
                        let mut s = 0.0;
                        for i in 0..rows {
                            s += md[i * cols + j] * g[i];
                        }
                        dx[j] += s;
                    }
                });
            }
            Op::VecMat(x, m) => {
                let (xv, mv) = (self.value(*x), self.value(*m));
                let (rows, cols) = (mv.rows(), mv.cols());
                let (xd, md) = (xv.data(), mv.data());
                acc(grads, *x, &mut |dx| {
                    for i in 0..rows {
                        let mut s = 0.0;
                        for j in 0..cols {
                            s += md[i * cols + j] * g[j];
                        }
                        dx[i] += s;
                    }
                });
                acc(grads, *m, &mut |dm| {
                    for i in 0..rows {
                        for j in 0..cols {
                            dm[i * cols + j] += xd[i] * g[j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                acc(grads, *a, &mut |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, &mut |db| {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                acc(grads, *a, &mut |da| {
                    for (d, &gi) in da.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *b, &mut |db| {
                    for (d, &gi) in db.iter_mut().zip(g) {
                        *d -= gi;
                    }
                });
            }
            Op::BroadcastAddRow(m, r) => {
                let cols = self.value(*r).numel();
                acc(grads, *m, &mut |dm| {
                    for (d, &gi) in dm.iter_mut().zip(g) {
                        *d += gi;
                    }
                });
                acc(grads, *r, &mut |dr| {
                    for (i, &gi) in g.iter().enumerate() {
                        dr[i % cols] += gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data().to_vec(), self.value(*b).data().to_vec());
                acc(grads, *a, &mut |da| {
                    for i in 0..g.len() {
                        da[i] += g[i] * bd[i];
                    }
                });
                acc(grads, *b, &mut |db| {
                    for i in 0..g.len() {
                        db[i] += g[i] * ad[i];
                    }
                });
            }
            Op::ScalarScale(x, s) => {
                let sv = self.value(*s).data()[0];
                let xd = self.value(*x).data().to_vec();
                acc(grads, *x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * sv;
                    }
                });
                acc(grads, *s, &mut |ds| {
                    ds[0] += g.iter().zip(&xd).map(|(&gi, &xi)| gi * xi).sum::<f64>();
                });
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match (av.shape(), bv.shape()) {
                    ([p], [q]) => {
                        let (p, _q) = (*p, *q);
                        acc(grads, *a, &mut |da| {
                            for i in 0..p {
                                da[i] += g[i];
                            }
                        });
                        acc(grads, *b, &mut |db| {
                            for (i, d) in db.iter_mut().enumerate() {
                                *d += g[p + i];
                            }
                        });
                    }
                    ([r, p], [_, q]) => {
                        let (r, p, q) = (*r, *p, *q);
                        let w = p + q;
                        acc(grads, *a, &mut |da| {
                            for i in 0..r {
                                for j in 0..p {
                                    da[i * p + j] += g[i * w + j];
                                }
                            }
                        });
                        acc(grads, *b, &mut |db| {
                            for i in 0..r {
                                for j in 0..q {
                                    db[i * q + j] += g[i * w + p + j];
                                }
                            }
                        });
                    }
                    _ => unreachable!("concat_cols recorded with invalid shapes"),
                }
            }
            Op::StackRows(ids) => {
                let n = g.len() / ids.len();
                for (row, &src) in ids.iter().enumerate() {
                    acc(grads, src, &mut |d| {
                        for j in 0..n {
                            d[j] += g[row * n + j];
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                acc(grads, *x, &mut |dx| {
                    for d in dx.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Tanh(x) => {
                let y = self.value(id).data().to_vec();
                acc(grads, *x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = self.value(id).data().to_vec();
                acc(grads, *x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Exp(x) => {
                let y = self.value(id).data().to_vec();
                acc(grads, *x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] * y[i];
                    }
                });
            }
            Op::Log(x) => {
                let xd = self.value(*x).data().to_vec();
                acc(grads, *x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += g[i] / xd[i];
                    }
                });
            }
            Op::SoftmaxVec(x) => {
                let y = self.value(id).data().to_vec();
                let dot: f64 = g.iter().zip(&y).map(|(&gi, &yi)| gi * yi).sum();
                acc(grads, *x, &mut |dx| {
                    for i in 0..g.len() {
                        dx[i] += y[i] * (g[i] - dot);
                    }
                });
            }
            Op::LogSumExpVec(x) => {
                let sm = softmax_slice(self.value(*x).data());
                acc(grads, *x, &mut |dx| {
                    for i in 0..sm.len() {
                        dx[i] += g[0] * sm[i];
                    }
                });
            }
            Op::IndexRow(m, i) => {
                let c = g.len();
                let i = *i;
                acc(grads, *m, &mut |dm| {
                    for j in 0..c {
                        dm[i * c + j] += g[j];
                    }
                });
            }
            Op::IndexCol(m, j) => {
                let c = self.value(*m).cols();
                let j = *j;
                acc(grads, *m, &mut |dm| {
                    for (i, &gi) in g.iter().enumerate() {
                        dm[i * c + j] += gi;
                    }
                });
            }
            Op::IndexElem(t, flat) => {
                let flat = *flat;
                acc(grads, *t, &mut |dt| {
                    dt[flat] += g[0];
                });
            }
            Op::SliceCols(m, lo, hi) => {
                let c = self.value(*m).cols();
                let (lo, w) = (*lo, *hi - *lo);
                acc(grads, *m, &mut |dm| {
                    for i in 0..g.len() / w {
                        for j in 0..w {
                            dm[i * c + lo + j] += g[i * w + j];
                        }
                    }
                });
            }
        }
    }
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape_id: u64,
    shapes: Vec<Vec<usize>>,
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to a tensor recorded on the originating tape.
    /// Nodes the root does not depend on read back as all zeros.
    pub fn wrt(&self, t: &Tensor) -> std::result::Result<Tensor, DiffError> {
        let node = match t.origin {
            Some((tape, node)) if tape == self.tape_id => node,
            _ => return Err(DiffError::UnknownNode),
        };
        let shape = &self.shapes[node];
        Ok(match &self.grads[node] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        })
    }
}

pub(crate) fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softmax_slice(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub(crate) fn logsumexp_slice(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_constant_input_is_uniform() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![0.0, 0.0, 0.0, 0.0]);
        let y = tape.softmax_vec(&x).unwrap();
        assert_eq!(y.data(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn logsumexp_matches_analytic_identity() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![2.0f64.ln(), 3.0f64.ln()]);
        let y = tape.logsumexp_vec(&x).unwrap();
        assert!(close(y.item(), 5.0f64.ln(), 1e-12), "{}", y.item());
    }

    #[test]
    fn matmul_matches_naive_triple_loop() {
        // Fixed pseudo-random values; the oracle below multiplies them
        // independently of the tape implementation.
        let a = Tensor::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.5, 0.05, -0.9]);
        let b = Tensor::matrix(3, 2, vec![1.1, 0.4, -0.6, 2.0, 0.25, -1.75]);
        let mut expected = vec![0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for l in 0..3 {
                    expected[i * 2 + j] += a.data()[i * 3 + l] * b.data()[l * 2 + j];
                }
            }
        }
        let mut tape = Tape::new();
        let c = tape.matmul(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 2]);
        for (got, want) in c.iter().zip(&expected) {
            assert!(close(*got, *want, 1e-15));
        }
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = Tensor::matrix(2, 3, vec![0.0; 6]);
        let b = Tensor::matrix(4, 2, vec![0.0; 8]);
        let err = tape.matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn log_rejects_non_positive_input() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![1.0, 0.0]);
        assert!(matches!(
            tape.log(&x),
            Err(DiffError::LogDomain { value }) if value == 0.0
        ));
    }

    #[test]
    fn exp_rejects_overflowing_input() {
        let mut tape = Tape::new();
        let x = Tensor::vector(vec![800.0]);
        assert!(matches!(tape.exp(&x), Err(DiffError::ExpOverflow { .. })));
    }

    #[test]
    fn grad_of_sum_of_squares_is_two_x() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(&x, &x).unwrap();
        let loss = tape.sum_all(&sq).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn grad_of_logsumexp_is_softmax() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.1, -0.7, 2.3]));
        let loss = tape.logsumexp_vec(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        let sm = softmax_slice(x.data());
        for (g, s) in grads.wrt(&x).unwrap().iter().zip(&sm) {
            assert!(close(*g, *s, 1e-12));
        }
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.add(&x, &x).unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(DiffError::NonScalarRoot { .. })
        ));
    }

    #[test]
    fn backward_rejects_detached_root() {
        let tape = Tape::new();
        let x = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&x), Err(DiffError::DetachedRoot)));
    }

    #[test]
    fn unreached_nodes_have_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![1.0, 2.0]));
        let y = tape.leaf(&Tensor::vector(vec![3.0, 4.0]));
        let loss = tape.sum_all(&x).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&y).unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn replaying_the_same_tape_is_bit_identical() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::vector(vec![0.3, -0.8, 1.9]));
        let s = tape.softmax_vec(&x).unwrap();
        let w = tape.leaf(&Tensor::vector(vec![1.0, -2.0, 0.5]));
        let p = tape.mul(&s, &w).unwrap();
        let loss = tape.sum_all(&p).unwrap();
        let g1 = tape.backward(&loss).unwrap();
        let g2 = tape.backward(&loss).unwrap();
        for t in [&x, &w] {
            let a = g1.wrt(t).unwrap();
            let b = g2.wrt(t).unwrap();
            for (va, vb) in a.iter().zip(b.iter()) {
                assert_eq!(va.to_bits(), vb.to_bits());
            }
        }
    }

    #[test]
    fn foreign_tensor_is_lifted_as_constant() {
        let mut t1 = Tape::new();
        let a = t1.leaf(&Tensor::scalar(2.0));
        let mut t2 = Tape::new();
        let b = t2.leaf(&Tensor::scalar(5.0));
        // `a` belongs to t1; using it on t2 treats it as a constant there.
        let prod = t2.mul(&a, &b).unwrap();
        let grads = t2.backward(&prod).unwrap();
        assert_eq!(grads.wrt(&b).unwrap().item(), 2.0);
        assert!(matches!(grads.wrt(&a), Err(DiffError::UnknownNode)));
    }

    #[test]
    fn gradient_accumulates_across_multiple_uses() {
        // f(x) = x·x + x  =>  f'(x) = 2x + 1
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0));
        let sq = tape.mul(&x, &x).unwrap();
        let f = tape.add(&sq, &x).unwrap();
        let grads = tape.backward(&f).unwrap();
        assert_eq!(grads.wrt(&x).unwrap().item(), 7.0);
    }

    #[test]
    fn index_and_slice_ops_route_gradients_sparsely() {
        let mut tape = Tape::new();
        let m = tape.leaf(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let row = tape.index_row(&m, 1).unwrap();
        assert_eq!(row.data(), &[4.0, 5.0, 6.0]);
        let loss = tape.sum_all(&row).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(
            grads.wrt(&m).unwrap().data(),
            &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]
        );
    }

    #[test]
    fn concat_cols_on_matrices_splits_gradient_blocks() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::matrix(2, 1, vec![1.0, 2.0]));
        let b = tape.leaf(&Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]));
        let c = tape.concat_cols(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let col = tape.index_col(&c, 0).unwrap();
        let loss = tape.sum_all(&col).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.wrt(&a).unwrap().data(), &[1.0, 1.0]);
        assert_eq!(grads.wrt(&b).unwrap().data(), &[0.0; 4]);
    }
}
