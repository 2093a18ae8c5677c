//! Reverse-mode differentiation over dense matrices.
//!
//! A [`Tape`] records every primitive as it is evaluated; `backward` replays
//! the records in exact reverse order. Parameters are read straight from a
//! borrowed [`ParamStore`] and their gradients land in a [`ParamGrads`], so a
//! forward pass never copies a weight matrix. Embedding lookups are recorded
//! as gathers whose gradients scatter back into only the rows that were read.

use crate::error::{MianError, Result};
use crate::numerics::kernels::{activate, layer_norm_row, log_sum_exp2, softmax_in_place, Activation};
use crate::numerics::matrix::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use crate::numerics::{DenseMatrix, ParamGrads, ParamId, ParamStore};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Input,
    Param(ParamId),
    Gather { table: ParamId, rows: Vec<usize> },
    MatMul(NodeId, NodeId),
    MatMulNT(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    MulConst(NodeId, DenseMatrix<T>),
    Act(NodeId, Activation),
    SoftmaxRows(NodeId),
    LayerNormRows { input: NodeId, gamma: NodeId, beta: NodeId, xhat: DenseMatrix<T>, inv_std: Vec<T> },
    ConcatCols(Vec<NodeId>),
    ConcatRows(Vec<NodeId>),
    SliceCols { input: NodeId, start: usize },
    BroadcastRows(NodeId),
    RowDot(NodeId, NodeId),
    PadRows(NodeId),
    SoftmaxXent { logits: NodeId, label: usize, probs: [T; 2] },
    SumSquares(NodeId),
    Sum(Vec<NodeId>),
}

#[derive(Debug)]
struct Node<T> {
    op: Op<T>,
    /// `None` for parameter nodes, whose value lives in the store.
    value: Option<DenseMatrix<T>>,
}

/// Gradients of one backward sweep with respect to every recorded node.
#[derive(Debug)]
pub struct NodeGrads<T> {
    grads: Vec<Option<DenseMatrix<T>>>,
    order: Vec<NodeId>,
}

impl<T: Scalar> NodeGrads<T> {
    /// Gradient with respect to `node`, or `None` if the output does not depend on it.
    pub fn get(&self, node: NodeId) -> Option<&DenseMatrix<T>> {
        self.grads[node.0].as_ref()
    }

    /// Nodes in the order the backward sweep processed them.
    pub fn visit_order(&self) -> &[NodeId] {
        &self.order
    }
}

pub struct Tape<'p, T> {
    params: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    relu_pattern: u64,
}

fn mismatch(op: &'static str, left: (usize, usize), right: (usize, usize)) -> MianError {
    MianError::ShapeMismatch { op, left, right }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn new(params: &'p ParamStore<T>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            relu_pattern: 0xcbf2_9ce4_8422_2325,
        }
    }

    pub fn params(&self) -> &'p ParamStore<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseMatrix<T> {
        let node = &self.nodes[id.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            _ => unreachable!("non-parameter node without a value"),
        }
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        self.value(id).shape()
    }

    fn push(&mut self, op: Op<T>, value: DenseMatrix<T>) -> NodeId {
        self.nodes.push(Node { op, value: Some(value) });
        NodeId(self.nodes.len() - 1)
    }

    /// A leaf holding caller-supplied values. Its gradient is reported in [`NodeGrads`].
    pub fn input(&mut self, value: DenseMatrix<T>) -> NodeId {
        self.push(Op::Input, value)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Rows `rows` of the embedding table `table`, stacked in order.
    pub fn gather(&mut self, table: ParamId, rows: Vec<usize>) -> NodeId {
        let t = self.params.value(table);
        let mut out = DenseMatrix::zeros(rows.len(), t.cols());
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r));
        }
        self.push(Op::Gather { table, rows }, out)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.cols() {
            return Err(mismatch("matmul_nt", av.shape(), bv.shape()));
        }
        let mut out = DenseMatrix::zeros(av.rows(), bv.rows());
        matmul_nt_acc(av, bv, &mut out);
        Ok(self.push(Op::MatMulNT(a, b), out))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).transpose();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(Op::Add(a, b), out))
    }

    /// Adds the `1 x m` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.0 != 1 || sa.1 != sb.1 {
            return Err(mismatch("add_row", sa, sb));
        }
        let mut out = self.value(a).clone();
        let row = self.value(b).data().to_vec();
        for r in 0..sa.0 {
            for (o, &v) in out.row_mut(r).iter_mut().zip(&row) {
                *o += v;
            }
        }
        Ok(self.push(Op::AddRow(a, b), out))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).map(|v| v * s);
        self.push(Op::Scale(a, s), out)
    }

    /// Elementwise product with a constant (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: NodeId, c: DenseMatrix<T>) -> Result<NodeId> {
        if self.shape(a) != c.shape() {
            return Err(mismatch("mul_const", self.shape(a), c.shape()));
        }
        let mut out = self.value(a).clone();
        for (o, &m) in out.data_mut().iter_mut().zip(c.data()) {
            *o *= m;
        }
        Ok(self.push(Op::MulConst(a, c), out))
    }

    pub fn activation(&mut self, a: NodeId, kind: Activation) -> NodeId {
        let out = self.value(a).map(|v| activate(v, kind));
        if kind == Activation::Relu {
            let mut h = self.relu_pattern;
            for &v in self.value(a).data() {
                h = (h ^ u64::from(v > T::zero())).wrapping_mul(0x100_0000_01b3);
            }
            self.relu_pattern = h;
        }
        self.push(Op::Act(a, kind), out)
    }

    /// Hash of the on/off pattern of every ReLU evaluated so far. Two inputs
    /// with equal signatures lie (almost surely) in the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_pattern
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Relu)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Tanh)
    }

    /// Row-wise softmax. With a column mask, masked columns get weight exactly
    /// zero in every row (equivalent to a score of negative infinity).
    pub fn softmax_rows(&mut self, a: NodeId, mask: Option<&[bool]>) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if cols == 0 {
            return Err(MianError::Empty("softmax"));
        }
        if let Some(m) = mask {
            if m.len() != cols {
                return Err(mismatch("softmax mask", (rows, cols), (1, m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(MianError::AllMasked);
            }
        }
        let mut out = self.value(a).clone();
        for r in 0..rows {
            softmax_in_place(out.row_mut(r), mask);
        }
        Ok(self.push(Op::SoftmaxRows(a), out))
    }

    /// Per-row layer normalization with `1 x m` gain and shift.
    pub fn layer_norm_rows(&mut self, a: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if self.shape(gamma) != (1, cols) || self.shape(beta) != (1, cols) {
            return Err(mismatch("layer_norm", (rows, cols), self.shape(gamma)));
        }
        let x = self.value(a);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let ones = vec![T::one(); cols];
        let zeros = vec![T::zero(); cols];
        let mut out = DenseMatrix::zeros(rows, cols);
        let mut xhat = DenseMatrix::zeros(rows, cols);
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            inv_std.push(layer_norm_row(x.row(r), &ones, &zeros, eps, xhat.row_mut(r)));
            for c in 0..cols {
                out.set(r, c, g[c] * xhat.get(r, c) + b[c]);
            }
        }
        Ok(self.push(
            Op::LayerNormRows {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            out,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let rows = parts.first().map(|&p| self.shape(p).0).ok_or(MianError::Empty("concat_cols"))?;
        let mut cols = 0;
        for &p in parts {
            if self.shape(p).0 != rows {
                return Err(mismatch("concat_cols", (rows, cols), self.shape(p)));
            }
            cols += self.shape(p).1;
        }
        let mut out = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let v = self.value(p);
                out.row_mut(r)[off..off + v.cols()].copy_from_slice(v.row(r));
                off += v.cols();
            }
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let cols = parts.first().map(|&p| self.shape(p).1).ok_or(MianError::Empty("concat_rows"))?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.shape(p).1 != cols {
                return Err(mismatch("concat_rows", (rows, cols), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
            rows += self.shape(p).0;
        }
        let out = DenseMatrix::from_vec(rows, cols, data)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), out))
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if start + len > cols {
            return Err(mismatch("slice_cols", (rows, cols), (start, len)));
        }
        let v = self.value(a);
        let mut out = DenseMatrix::zeros(rows, len);
        for r in 0..rows {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..start + len]);
        }
        Ok(self.push(Op::SliceCols { input: a, start }, out))
    }

    /// Repeats the single row of `a` `n` times.
    pub fn broadcast_rows(&mut self, a: NodeId, n: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if rows != 1 {
            return Err(mismatch("broadcast_rows", (rows, cols), (1, cols)));
        }
        let row = self.value(a).data().to_vec();
        let mut data = Vec::with_capacity(n * cols);
        for _ in 0..n {
            data.extend_from_slice(&row);
        }
        let out = DenseMatrix::from_vec(n, cols, data)?;
        Ok(self.push(Op::BroadcastRows(a), out))
    }

    /// `out[i] = <a[i,:], b[i,:]>`, an `n x 1` column.
    pub fn row_dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("row_dot", self.shape(a), self.shape(b)));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let data = (0..av.rows())
            .map(|r| av.row(r).iter().zip(bv.row(r)).map(|(&x, &y)| x * y).sum())
            .collect();
        let out = DenseMatrix::from_vec(av.rows(), 1, data)?;
        Ok(self.push(Op::RowDot(a, b), out))
    }

    /// Appends zero rows until `a` has `total` rows.
    pub fn pad_rows(&mut self, a: NodeId, total: usize) -> Result<NodeId> {
        let (rows, cols) = self.shape(a);
        if rows > total {
            return Err(mismatch("pad_rows", (rows, cols), (total, cols)));
        }
        let mut data = self.value(a).data().to_vec();
        data.resize(total * cols, T::zero());
        let out = DenseMatrix::from_vec(total, cols, data)?;
        Ok(self.push(Op::PadRows(a), out))
    }

    /// Cross-entropy of a `1 x 2` logit row against `label`, computed by log-sum-exp.
    pub fn softmax_xent(&mut self, logits: NodeId, label: usize) -> Result<NodeId> {
        if self.shape(logits) != (1, 2) {
            return Err(mismatch("softmax_xent", self.shape(logits), (1, 2)));
        }
        if label > 1 {
            return Err(MianError::InvalidLabel(label.to_string()));
        }
        let z = self.value(logits).data();
        let lse = log_sum_exp2(z[0], z[1]);
        let probs = [(z[0] - lse).exp(), (z[1] - lse).exp()];
        let loss = lse - z[label];
        Ok(self.push(
            Op::SoftmaxXent { logits, label, probs },
            DenseMatrix::row_vector(vec![loss]),
        ))
    }

    pub fn sum_squares(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).sum_squares();
        self.push(Op::SumSquares(a), DenseMatrix::row_vector(vec![s]))
    }

    /// Elementwise sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = *parts.first().ok_or(MianError::Empty("sum"))?;
        let mut out = self.value(first).clone();
        for &p in &parts[1..] {
            if self.shape(p) != out.shape() {
                return Err(mismatch("sum", out.shape(), self.shape(p)));
            }
            out.add_assign(self.value(p));
        }
        Ok(self.push(Op::Sum(parts.to_vec()), out))
    }

    /// Backpropagates from a `1 x 1` output, accumulating parameter gradients
    /// scaled by `seed` into `param_grads`.
    pub fn backward_into(&self, output: NodeId, seed: T, param_grads: &mut ParamGrads<T>) -> NodeGrads<T> {
        self.sweep(output, seed, Some(param_grads))
    }

    /// Backpropagates from a `1 x 1` output with unit seed; parameter gradients are discarded.
    pub fn backward(&self, output: NodeId) -> NodeGrads<T> {
        self.sweep(output, T::one(), None)
    }

    fn sweep(&self, output: NodeId, seed: T, mut param_grads: Option<&mut ParamGrads<T>>) -> NodeGrads<T> {
        assert_eq!(self.shape(output), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<DenseMatrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(DenseMatrix::filled(1, 1, seed));
        let mut order = Vec::new();

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            order.push(NodeId(idx));
            self.propagate(idx, &g, &mut grads, param_grads.as_deref_mut());
            grads[idx] = Some(g);
        }
        NodeGrads { grads, order }
    }

    fn propagate(
        &self,
        idx: usize,
        g: &DenseMatrix<T>,
        grads: &mut [Option<DenseMatrix<T>>],
        param_grads: Option<&mut ParamGrads<T>>,
    ) {
        let out = self.nodes[idx].value.as_ref();
        let acc = slot_fn(|grads: &mut [Option<DenseMatrix<T>>], id: NodeId| {
            let (r, c) = self.shape(id);
            grads[id.0].get_or_insert_with(move || DenseMatrix::zeros(r, c))
        });
        match &self.nodes[idx].op {
            Op::Input => {}
            Op::Param(p) => {
                if let Some(pg) = param_grads {
                    pg.get_mut(*p).add_assign(g);
                }
            }
            Op::Gather { table, rows } => {
                if let Some(pg) = param_grads {
                    let t = pg.get_mut(*table);
                    for (i, &r) in rows.iter().enumerate() {
                        for (dst, &src) in t.row_mut(r).iter_mut().zip(g.row(i)) {
                            *dst += src;
                        }
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                matmul_nt_acc(g, bv, acc(grads, *a));
                matmul_tn_acc(av, g, acc(grads, *b));
            }
            Op::MatMulNT(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                matmul_acc(g, bv, acc(grads, *a));
                matmul_tn_acc(g, av, acc(grads, *b));
            }
            Op::Transpose(a) => acc(grads, *a).add_assign(&g.transpose()),
            Op::Add(a, b) => {
                acc(grads, *a).add_assign(g);
                acc(grads, *b).add_assign(g);
            }
            Op::AddRow(a, b) => {
                acc(grads, *a).add_assign(g);
                let gb = acc(grads, *b);
                for r in 0..g.rows() {
                    for (d, &v) in gb.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            Op::Scale(a, s) => acc(grads, *a).axpy(*s, g),
            Op::MulConst(a, m) => {
                let ga = acc(grads, *a);
                for ((d, &gv), &mv) in ga.data_mut().iter_mut().zip(g.data()).zip(m.data()) {
                    *d += gv * mv;
                }
            }
            Op::Act(a, kind) => {
                let x = self.value(*a);
                let y = out.unwrap();
                let ga = acc(grads, *a);
                for i in 0..g.len() {
                    let local = match kind {
                        Activation::Relu => {
                            if x.data()[i] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        Activation::Tanh => T::one() - y.data()[i] * y.data()[i],
                    };
                    ga.data_mut()[i] += g.data()[i] * local;
                }
            }
            Op::SoftmaxRows(a) => {
                let y = out.unwrap();
                let ga = acc(grads, *a);
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    for (d, (&p, &q)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *d += p * (q - dot);
                    }
                }
            }
            Op::LayerNormRows {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = self.value(*gamma).data().to_vec();
                let (rows, cols) = xhat.shape();
                let n = T::from_usize(cols).unwrap();
                {
                    let gg = acc(grads, *gamma);
                    for r in 0..rows {
                        for c in 0..cols {
                            gg.data_mut()[c] += g.get(r, c) * xhat.get(r, c);
                        }
                    }
                }
                {
                    let gb = acc(grads, *beta);
                    for r in 0..rows {
                        for c in 0..cols {
                            gb.data_mut()[c] += g.get(r, c);
                        }
                    }
                }
                let gx = acc(grads, *input);
                let mut dxhat = vec![T::zero(); cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dxhat[c] = g.get(r, c) * gam[c];
                    }
                    let mean_d = dxhat.iter().copied().sum::<T>() / n;
                    let mean_dx = (0..cols).map(|c| dxhat[c] * xhat.get(r, c)).sum::<T>() / n;
                    for c in 0..cols {
                        let v = inv_std[r] * (dxhat[c] - mean_d - xhat.get(r, c) * mean_dx);
                        gx.data_mut()[r * cols + c] += v;
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    let gp = acc(grads, p);
                    for r in 0..g.rows() {
                        for (d, &v) in gp.row_mut(r).iter_mut().zip(&g.row(r)[off..off + w]) {
                            *d += v;
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.shape(p).0;
                    let gp = acc(grads, p);
                    for r in 0..h {
                        for (d, &v) in gp.row_mut(r).iter_mut().zip(g.row(off + r)) {
                            *d += v;
                        }
                    }
                    off += h;
                }
            }
            Op::SliceCols { input, start } => {
                let ga = acc(grads, *input);
                for r in 0..g.rows() {
                    for (d, &v) in ga.row_mut(r)[*start..*start + g.cols()].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            Op::BroadcastRows(a) => {
                let ga = acc(grads, *a);
                for r in 0..g.rows() {
                    for (d, &v) in ga.data_mut().iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                {
                    let ga = acc(grads, *a);
                    for r in 0..av.rows() {
                        let s = g.data()[r];
                        for (d, &v) in ga.row_mut(r).iter_mut().zip(bv.row(r)) {
                            *d += s * v;
                        }
                    }
                }
                let gb = acc(grads, *b);
                for r in 0..av.rows() {
                    let s = g.data()[r];
                    for (d, &v) in gb.row_mut(r).iter_mut().zip(av.row(r)) {
                        *d += s * v;
                    }
                }
            }
            Op::PadRows(a) => {
                let ga = acc(grads, *a);
                let n = ga.len();
                for (d, &v) in ga.data_mut().iter_mut().zip(&g.data()[..n]) {
                    *d += v;
                }
            }
            Op::SoftmaxXent { logits, label, probs } => {
                let s = g.data()[0];
                let gl = acc(grads, *logits);
                for k in 0..2 {
                    let target = if k == *label { T::one() } else { T::zero() };
                    gl.data_mut()[k] += s * (probs[k] - target);
                }
            }
            Op::SumSquares(a) => {
                let s = g.data()[0] + g.data()[0];
                let av = self.value(*a);
                acc(grads, *a).axpy(s, av);
            }
            Op::Sum(parts) => {
                for &p in parts {
                    acc(grads, p).add_assign(g);
                }
            }
        }
    }
}

fn slot_fn<T, F>(f: F) -> F
where
    F: Fn(&mut [Option<DenseMatrix<T>>], NodeId) -> &mut DenseMatrix<T>,
{
    f
}
