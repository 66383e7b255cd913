//! Dense rank-0..2 tensors and a define-by-run tape for reverse-mode
//! gradients.
//!
//! Every value is stored as a row-major `rows × cols` block of `f64`.
//! Scalars are `1 × 1`, vectors are single rows. Batched quantities keep one
//! sample per row, so the same op kinds serve both a single path and a
//! minibatch of paths.
//!
//! A [`Tape`] is rebuilt for every training step. Nodes may only reference
//! earlier nodes, so the insertion order is already a topological order and
//! [`Tape::backward`] is a single reverse sweep.

use std::fmt;

use thiserror::Error;

/// Row-major dense tensor with at most two dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if rows * cols != data.len() {
            return Err(TensorError::DataLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            rows: 1,
            cols: 1,
            data: vec![value],
        }
    }

    /// A `1 × n` row vector.
    pub fn row(values: Vec<f64>) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { 1.0 } else { 0.0 })
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
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.rows == 1 && self.cols == 1
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row_slice(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Value of a `1 × 1` tensor.
    pub fn item(&self) -> Option<f64> {
        self.is_scalar().then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape(), other.shape());
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

/// Errors raised while building or differentiating a tape.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("tensor data of length {len} does not fit shape {rows}x{cols}")]
    DataLength {
        rows: usize,
        cols: usize,
        len: usize,
    },
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op} expects {expected} input(s), got {got}")]
    Arity {
        op: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("node {0} is not on this tape")]
    UnknownNode(usize),
    #[error("backward root must be scalar, got shape {0:?}")]
    NonScalarRoot((usize, usize)),
    #[error("{op} produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("batch normalization needs at least 2 rows in train mode, got {0}")]
    BatchTooSmall(usize),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

/// The closed set of differentiable operations.
///
/// Binary elementwise kinds (`Add`, `Sub`, `Mul`) broadcast any operand
/// dimension of size one. `MatVec` applies one `k × l` matrix to every row
/// of a batch; `BatchMatVec` applies a different flattened matrix per row.
/// `InnerProduct` contracts rows pairwise and yields a column.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    ScalarMul(f64),
    MatMul,
    MatVec,
    BatchMatVec,
    InnerProduct,
    Trace,
    /// Row `r` (`d²` entries, a flattened `d × d` matrix) to its diagonal.
    Diagonal,
    Relu,
    Square,
    Cube,
    Exp,
    Ln,
    Reciprocal,
    Sum,
    Mean,
    SquaredNorm,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::ScalarMul(_) => "scalar-mul",
            OpKind::MatMul => "matmul",
            OpKind::MatVec => "mat-vec",
            OpKind::BatchMatVec => "batch-mat-vec",
            OpKind::InnerProduct => "inner-product",
            OpKind::Trace => "trace",
            OpKind::Diagonal => "diagonal",
            OpKind::Relu => "relu",
            OpKind::Square => "square",
            OpKind::Cube => "cube",
            OpKind::Exp => "exp",
            OpKind::Ln => "ln",
            OpKind::Reciprocal => "reciprocal",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SquaredNorm => "squared-norm",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::MatMul
            | OpKind::MatVec
            | OpKind::BatchMatVec
            | OpKind::InnerProduct => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Unary(OpKind, usize),
    Binary(OpKind, usize, usize),
    BatchNorm {
        input: usize,
        scale: usize,
        shift: usize,
        normalized: Tensor,
        inv_std: Vec<f64>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
    trainable: bool,
}

/// Single-threaded recording of a computation.
#[derive(Clone, Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf. Gradients are reported for these.
    pub fn parameter(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, true, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn is_parameter(&self, id: NodeId) -> bool {
        self.nodes.get(id.0).is_some_and(|n| n.trainable)
    }

    pub fn parameters(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.trainable)
            .map(|(i, _)| NodeId(i))
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool, trainable: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
            trainable,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), TensorError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(TensorError::UnknownNode(id.0))
        }
    }

    /// Records `kind` applied to `inputs`, computing and caching the primal.
    pub fn record(&mut self, kind: OpKind, inputs: &[NodeId]) -> Result<NodeId, TensorError> {
        if inputs.len() != kind.arity() {
            return Err(TensorError::Arity {
                op: kind.name(),
                expected: kind.arity(),
                got: inputs.len(),
            });
        }
        for &id in inputs {
            self.check(id)?;
        }
        let requires_grad = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        let (value, op) = if kind.arity() == 2 {
            let (a, b) = (inputs[0].0, inputs[1].0);
            let value = forward_binary(kind, &self.nodes[a].value, &self.nodes[b].value)?;
            (value, Op::Binary(kind, a, b))
        } else {
            let a = inputs[0].0;
            let value = forward_unary(kind, &self.nodes[a].value)?;
            (value, Op::Unary(kind, a))
        };
        if !value.is_finite() && inputs.iter().all(|id| self.nodes[id.0].value.is_finite()) {
            return Err(TensorError::NonFinite { op: kind.name() });
        }
        Ok(self.push(op, value, requires_grad, false))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Mul, &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> Result<NodeId, TensorError> {
        self.record(OpKind::ScalarMul(factor), &[a])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::MatMul, &[a, b])
    }

    /// `matrix` is `k × l`, `batch` is `rows × l`; returns `rows × k`.
    pub fn mat_vec(&mut self, matrix: NodeId, batch: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::MatVec, &[matrix, batch])
    }

    /// Row `r` of `matrices` is a row-major `k × l` matrix applied to row `r`
    /// of `vectors` (`rows × l`). Either operand may have a single row.
    pub fn batch_mat_vec(
        &mut self,
        matrices: NodeId,
        vectors: NodeId,
    ) -> Result<NodeId, TensorError> {
        self.record(OpKind::BatchMatVec, &[matrices, vectors])
    }

    pub fn inner(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::InnerProduct, &[a, b])
    }

    pub fn trace(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Trace, &[a])
    }

    pub fn diagonal(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Diagonal, &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Relu, &[a])
    }

    pub fn square(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Square, &[a])
    }

    pub fn cube(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Cube, &[a])
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Exp, &[a])
    }

    pub fn ln(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Ln, &[a])
    }

    pub fn reciprocal(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Reciprocal, &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Sum, &[a])
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::Mean, &[a])
    }

    pub fn squared_norm(&mut self, a: NodeId) -> Result<NodeId, TensorError> {
        self.record(OpKind::SquaredNorm, &[a])
    }

    /// Column-wise batch normalization with batch statistics.
    ///
    /// Returns the node together with the per-column batch mean and biased
    /// variance so the caller can update running statistics.
    pub fn batch_norm(
        &mut self,
        input: NodeId,
        scale: NodeId,
        shift: NodeId,
        epsilon: f64,
    ) -> Result<(NodeId, Vec<f64>, Vec<f64>), TensorError> {
        for id in [input, scale, shift] {
            self.check(id)?;
        }
        let x = &self.nodes[input.0].value;
        let (rows, cols) = x.shape();
        if rows < 2 {
            return Err(TensorError::BatchTooSmall(rows));
        }
        for id in [scale, shift] {
            let s = self.nodes[id.0].value.shape();
            if s != (1, cols) {
                return Err(TensorError::ShapeMismatch {
                    op: "batch-norm",
                    lhs: x.shape(),
                    rhs: s,
                });
            }
        }
        let mut mean = vec![0.0; cols];
        for r in 0..rows {
            for (m, v) in mean.iter_mut().zip(x.row_slice(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= rows as f64);
        let mut var = vec![0.0; cols];
        for r in 0..rows {
            for ((s, v), m) in var.iter_mut().zip(x.row_slice(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= rows as f64);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + epsilon).sqrt()).collect();
        let normalized = Tensor::from_fn(rows, cols, |r, c| (x.get(r, c) - mean[c]) * inv_std[c]);
        let gamma = self.nodes[scale.0].value.data();
        let beta = self.nodes[shift.0].value.data();
        let value = Tensor::from_fn(rows, cols, |r, c| normalized.get(r, c) * gamma[c] + beta[c]);
        let requires_grad = [input, scale, shift]
            .iter()
            .any(|id| self.nodes[id.0].requires_grad);
        let id = self.push(
            Op::BatchNorm {
                input: input.0,
                scale: scale.0,
                shift: shift.0,
                normalized,
                inv_std,
            },
            value,
            requires_grad,
            false,
        );
        Ok((id, mean, var))
    }

    /// Reverse sweep from a scalar root with seed 1.
    pub fn backward(&self, root: NodeId) -> Result<Gradients, TensorError> {
        self.backward_with_seed(root, 1.0)
    }

    pub fn backward_with_seed(&self, root: NodeId, seed: f64) -> Result<Gradients, TensorError> {
        self.check(root)?;
        let shape = self.nodes[root.0].value.shape();
        if shape != (1, 1) {
            return Err(TensorError::NonScalarRoot(shape));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::scalar(seed));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = (match node.op {
                Op::Leaf => None,
                _ => grads[i].take(),
            }) else {
                continue;
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Unary(kind, a) => self.backward_unary(*kind, *a, &node.value, &g, &mut grads),
                Op::Binary(kind, a, b) => {
                    self.backward_binary(*kind, *a, *b, &node.value, &g, &mut grads)
                }
                Op::BatchNorm {
                    input,
                    scale,
                    shift,
                    normalized,
                    inv_std,
                } => self.backward_batch_norm(
                    *input, *scale, *shift, normalized, inv_std, &g, &mut grads,
                ),
            }
        }
        let mut out = Vec::new();
        for (i, g) in grads.into_iter().enumerate() {
            if self.nodes[i].trainable {
                let g = g.unwrap_or_else(|| {
                    let (r, c) = self.nodes[i].value.shape();
                    Tensor::zeros(r, c)
                });
                out.push((NodeId(i), g));
            }
        }
        // parameters recorded after the root never saw the sweep
        for (i, n) in self.nodes.iter().enumerate().skip(root.0 + 1) {
            if n.trainable {
                out.push((NodeId(i), Tensor::zeros(n.value.rows, n.value.cols)));
            }
        }
        Ok(Gradients { grads: out })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Tensor>], i: usize) -> &'g mut Tensor {
        let (r, c) = self.nodes[i].value.shape();
        grads[i].get_or_insert_with(|| Tensor::zeros(r, c))
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], i: usize, g: Tensor) {
        match &mut grads[i] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_unary(
        &self,
        kind: OpKind,
        a: usize,
        out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        if !self.needs(a) {
            return;
        }
        let x = &self.nodes[a].value;
        let local = match kind {
            OpKind::ScalarMul(c) => g.map(|v| v * c),
            OpKind::Relu => zip_map(g, x, |gv, xv| if xv > 0.0 { gv } else { 0.0 }),
            OpKind::Square => zip_map(g, x, |gv, xv| 2.0 * xv * gv),
            OpKind::Cube => zip_map(g, x, |gv, xv| 3.0 * xv * xv * gv),
            OpKind::Exp => zip_map(g, out, |gv, ov| gv * ov),
            OpKind::Ln => zip_map(g, x, |gv, xv| gv / xv),
            OpKind::Reciprocal => zip_map(g, out, |gv, ov| -gv * ov * ov),
            OpKind::Trace => {
                let s = g.data[0];
                Tensor::from_fn(x.rows, x.cols, |r, c| if r == c { s } else { 0.0 })
            }
            OpKind::Diagonal => {
                let d = g.cols;
                let mut local = Tensor::zeros(x.rows, x.cols);
                for r in 0..x.rows {
                    for i in 0..d {
                        local.data[r * x.cols + i * d + i] = g.data[r * d + i];
                    }
                }
                local
            }
            OpKind::Sum => Tensor::filled(x.rows, x.cols, g.data[0]),
            OpKind::Mean => Tensor::filled(x.rows, x.cols, g.data[0] / x.len() as f64),
            OpKind::SquaredNorm => x.map(|v| 2.0 * v * g.data[0]),
            _ => unreachable!("binary kind recorded as unary"),
        };
        self.accumulate(grads, a, local);
    }

    fn backward_binary(
        &self,
        kind: OpKind,
        a: usize,
        b: usize,
        _out: &Tensor,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let xa = &self.nodes[a].value;
        let xb = &self.nodes[b].value;
        match kind {
            OpKind::Add | OpKind::Sub => {
                let sign = if kind == OpKind::Sub { -1.0 } else { 1.0 };
                if self.needs(a) {
                    let ga = reduce_to(g, xa.shape(), |v, _, _| v);
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = reduce_to(g, xb.shape(), |v, _, _| sign * v);
                    self.accumulate(grads, b, gb);
                }
            }
            OpKind::Mul => {
                if self.needs(a) {
                    let ga = reduce_to(g, xa.shape(), |v, r, c| v * bget(xb, r, c));
                    self.accumulate(grads, a, ga);
                }
                if self.needs(b) {
                    let gb = reduce_to(g, xb.shape(), |v, r, c| v * bget(xa, r, c));
                    self.accumulate(grads, b, gb);
                }
            }
            OpKind::MatMul => {
                // C = A B, A: m×k, B: k×n
                let (m, k) = xa.shape();
                let n = xb.cols;
                if self.needs(a) {
                    let ga = self.slot(grads, a);
                    // dA += dC · Bᵀ
                    gemm(m, n, k, &g.data, (n, 1), &xb.data, (1, n), &mut ga.data, k);
                }
                if self.needs(b) {
                    let gb = self.slot(grads, b);
                    // dB += Aᵀ · dC
                    gemm(k, m, n, &xa.data, (1, k), &g.data, (n, 1), &mut gb.data, n);
                }
            }
            OpKind::MatVec => {
                // out = X Wᵀ, W: k×l, X: r×l
                let (k, l) = xa.shape();
                let r = xb.rows;
                if self.needs(a) {
                    let gw = self.slot(grads, a);
                    // dW += dOutᵀ · X
                    gemm(k, r, l, &g.data, (1, k), &xb.data, (l, 1), &mut gw.data, l);
                }
                if self.needs(b) {
                    let gx = self.slot(grads, b);
                    // dX += dOut · W
                    gemm(r, k, l, &g.data, (k, 1), &xa.data, (l, 1), &mut gx.data, l);
                }
            }
            OpKind::BatchMatVec => {
                let l = xb.cols;
                let k = xa.cols / l;
                let rows = g.rows;
                if self.needs(a) {
                    let ga = self.slot(grads, a);
                    for r in 0..rows {
                        let ra = if xa.rows == 1 { 0 } else { r };
                        let rb = if xb.rows == 1 { 0 } else { r };
                        let v = xb.row_slice(rb);
                        let grow = g.row_slice(r);
                        let dst = &mut ga.data[ra * k * l..(ra + 1) * k * l];
                        for i in 0..k {
                            let gi = grow[i];
                            if gi == 0.0 {
                                continue;
                            }
                            for (d, vj) in dst[i * l..(i + 1) * l].iter_mut().zip(v) {
                                *d += gi * vj;
                            }
                        }
                    }
                }
                if self.needs(b) {
                    let gb = self.slot(grads, b);
                    for r in 0..rows {
                        let ra = if xa.rows == 1 { 0 } else { r };
                        let rb = if xb.rows == 1 { 0 } else { r };
                        let mat = xa.row_slice(ra);
                        let grow = g.row_slice(r);
                        let dst = &mut gb.data[rb * l..(rb + 1) * l];
                        for i in 0..k {
                            let gi = grow[i];
                            for (d, m) in dst.iter_mut().zip(&mat[i * l..(i + 1) * l]) {
                                *d += gi * m;
                            }
                        }
                    }
                }
            }
            OpKind::InnerProduct => {
                let cols = xa.cols;
                for (target, other, needs) in [(a, xb, self.needs(a)), (b, xa, self.needs(b))] {
                    if !needs {
                        continue;
                    }
                    let target_rows = self.nodes[target].value.rows;
                    let dst = self.slot(grads, target);
                    for r in 0..g.rows {
                        let rt = if target_rows == 1 { 0 } else { r };
                        let ro = if other.rows == 1 { 0 } else { r };
                        let gv = g.data[r];
                        let o = other.row_slice(ro);
                        for (d, ov) in dst.data[rt * cols..(rt + 1) * cols].iter_mut().zip(o) {
                            *d += gv * ov;
                        }
                    }
                }
            }
            _ => unreachable!("unary kind recorded as binary"),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_batch_norm(
        &self,
        input: usize,
        scale: usize,
        shift: usize,
        normalized: &Tensor,
        inv_std: &[f64],
        g: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (rows, cols) = g.shape();
        let gamma = self.nodes[scale].value.data();
        let mut sum_g = vec![0.0; cols];
        let mut sum_gx = vec![0.0; cols];
        for r in 0..rows {
            for c in 0..cols {
                let gv = g.get(r, c);
                sum_g[c] += gv;
                sum_gx[c] += gv * normalized.get(r, c);
            }
        }
        if self.needs(input) {
            let n = rows as f64;
            let dx = Tensor::from_fn(rows, cols, |r, c| {
                gamma[c] * inv_std[c] / n
                    * (n * g.get(r, c) - sum_g[c] - normalized.get(r, c) * sum_gx[c])
            });
            self.accumulate(grads, input, dx);
        }
        if self.needs(scale) {
            self.accumulate(grads, scale, Tensor::row(sum_gx));
        }
        if self.needs(shift) {
            self.accumulate(grads, shift, Tensor::row(sum_g));
        }
    }
}

/// Gradients of a scalar root with respect to every trainable leaf.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<(NodeId, Tensor)>,
}

impl Gradients {
    pub fn get(&self, leaf: NodeId) -> Option<&Tensor> {
        self.grads
            .iter()
            .find(|(id, _)| *id == leaf)
            .map(|(_, g)| g)
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor)> {
        self.grads.iter().map(|(id, g)| (*id, g))
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn bget(t: &Tensor, r: usize, c: usize) -> f64 {
    let rr = if t.rows == 1 { 0 } else { r };
    let cc = if t.cols == 1 { 0 } else { c };
    t.data[rr * t.cols + cc]
}

fn broadcast_shape(
    op: &'static str,
    a: (usize, usize),
    b: (usize, usize),
) -> Result<(usize, usize), TensorError> {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            Some(x)
        } else if x == 1 {
            Some(y)
        } else {
            None
        }
    };
    match (dim(a.0, b.0), dim(a.1, b.1)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(TensorError::ShapeMismatch { op, lhs: a, rhs: b }),
    }
}

/// Sums `g` (full broadcast shape) down to `shape`, applying `f` per element.
fn reduce_to(g: &Tensor, shape: (usize, usize), f: impl Fn(f64, usize, usize) -> f64) -> Tensor {
    if g.shape() == shape {
        return Tensor::from_fn(shape.0, shape.1, |r, c| f(g.get(r, c), r, c));
    }
    let mut out = Tensor::zeros(shape.0, shape.1);
    for r in 0..g.rows {
        let rr = if shape.0 == 1 { 0 } else { r };
        for c in 0..g.cols {
            let cc = if shape.1 == 1 { 0 } else { c };
            out.data[rr * shape.1 + cc] += f(g.get(r, c), r, c);
        }
    }
    out
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor {
        rows: a.rows,
        cols: a.cols,
        data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect(),
    }
}

/// `c (m×n) += a (m×k) · b (k×n)` with arbitrary (row, col) strides for `a`
/// and `b`; `c` is row-major with leading dimension `ldc`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    ldc: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the strides describe in-bounds views of `a`, `b` and `c` for the
    // given dimensions; callers pass shapes taken from the tensors themselves.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            1.0,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

fn forward_binary(kind: OpKind, a: &Tensor, b: &Tensor) -> Result<Tensor, TensorError> {
    let mismatch = || TensorError::ShapeMismatch {
        op: kind.name(),
        lhs: a.shape(),
        rhs: b.shape(),
    };
    match kind {
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let (rows, cols) = broadcast_shape(kind.name(), a.shape(), b.shape())?;
            let f: fn(f64, f64) -> f64 = match kind {
                OpKind::Add => |x, y| x + y,
                OpKind::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            if a.shape() == b.shape() {
                return Ok(zip_map(a, b, f));
            }
            Ok(Tensor::from_fn(rows, cols, |r, c| {
                f(bget(a, r, c), bget(b, r, c))
            }))
        }
        OpKind::MatMul => {
            if a.cols != b.rows {
                return Err(mismatch());
            }
            let (m, k, n) = (a.rows, a.cols, b.cols);
            let mut out = Tensor::zeros(m, n);
            gemm(m, k, n, &a.data, (k, 1), &b.data, (n, 1), &mut out.data, n);
            Ok(out)
        }
        OpKind::MatVec => {
            if a.cols != b.cols {
                return Err(mismatch());
            }
            let (k, l) = a.shape();
            let r = b.rows;
            let mut out = Tensor::zeros(r, k);
            gemm(r, l, k, &b.data, (l, 1), &a.data, (1, l), &mut out.data, k);
            Ok(out)
        }
        OpKind::BatchMatVec => {
            let l = b.cols;
            if l == 0 || a.cols % l != 0 || (a.rows != b.rows && a.rows != 1 && b.rows != 1) {
                return Err(mismatch());
            }
            let k = a.cols / l;
            let rows = a.rows.max(b.rows);
            let mut out = Tensor::zeros(rows, k);
            for r in 0..rows {
                let mat = a.row_slice(if a.rows == 1 { 0 } else { r });
                let v = b.row_slice(if b.rows == 1 { 0 } else { r });
                for i in 0..k {
                    out.data[r * k + i] = mat[i * l..(i + 1) * l]
                        .iter()
                        .zip(v)
                        .map(|(m, x)| m * x)
                        .sum();
                }
            }
            Ok(out)
        }
        OpKind::InnerProduct => {
            if a.cols != b.cols || (a.rows != b.rows && a.rows != 1 && b.rows != 1) {
                return Err(mismatch());
            }
            let rows = a.rows.max(b.rows);
            let data = (0..rows)
                .map(|r| {
                    let x = a.row_slice(if a.rows == 1 { 0 } else { r });
                    let y = b.row_slice(if b.rows == 1 { 0 } else { r });
                    x.iter().zip(y).map(|(p, q)| p * q).sum()
                })
                .collect();
            Ok(Tensor {
                rows,
                cols: 1,
                data,
            })
        }
        _ => unreachable!("unary kind in binary forward"),
    }
}

fn forward_unary(kind: OpKind, x: &Tensor) -> Result<Tensor, TensorError> {
    Ok(match kind {
        OpKind::ScalarMul(c) => x.map(|v| v * c),
        OpKind::Relu => x.map(|v| v.max(0.0)),
        OpKind::Square => x.map(|v| v * v),
        OpKind::Cube => x.map(|v| v * v * v),
        OpKind::Exp => x.map(f64::exp),
        OpKind::Ln => x.map(f64::ln),
        OpKind::Reciprocal => x.map(|v| 1.0 / v),
        OpKind::Trace => {
            if x.rows != x.cols {
                return Err(TensorError::ShapeMismatch {
                    op: kind.name(),
                    lhs: x.shape(),
                    rhs: (x.cols, x.rows),
                });
            }
            Tensor::scalar((0..x.rows).map(|i| x.get(i, i)).sum())
        }
        OpKind::Diagonal => {
            let d = (x.cols as f64).sqrt().round() as usize;
            if d * d != x.cols {
                return Err(TensorError::ShapeMismatch {
                    op: kind.name(),
                    lhs: x.shape(),
                    rhs: (d, d),
                });
            }
            Tensor::from_fn(x.rows, d, |r, i| x.data[r * x.cols + i * d + i])
        }
        OpKind::Sum => Tensor::scalar(x.data.iter().sum()),
        OpKind::Mean => Tensor::scalar(x.data.iter().sum::<f64>() / x.len() as f64),
        OpKind::SquaredNorm => Tensor::scalar(x.data.iter().map(|v| v * v).sum()),
        _ => unreachable!("binary kind in unary forward"),
    })
}
