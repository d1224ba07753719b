//! Reverse-mode gradient tape over dense tensors.
//!
//! Every operation appends one node holding the op kind, the input node ids
//! and the output tensor. Node ids are handed out in construction order, so
//! the node list is already topologically sorted and a single reverse sweep
//! propagates gradients. Ops are pure functions of their inputs: building the
//! same graph from the same inputs twice reproduces bit-identical values.

use super::{NdError, Tensor};

/// Index of a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    /// Elementwise add; a 1-element operand broadcasts as a scalar.
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Add a 1-d bias row to every row of a matrix.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Ln(NodeId),
    /// Row-wise softmax over the last dimension.
    Softmax(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    ConcatCols(Vec<NodeId>),
    /// Row lookup into a table by constant indices; backward scatter-adds.
    SelectRows(NodeId, Vec<usize>),
    /// out[i] = a[i, cols[i]], one picked column per row.
    GatherCols(NodeId, Vec<usize>),
    /// Multiply row i by the constant mask[i].
    MulRowMask(NodeId, Vec<f64>),
    /// Elementwise multiply by a constant tensor (dropout masks).
    MulMask(NodeId, Tensor),
}

struct Node {
    op: Op,
    value: Tensor,
    grad: Tensor,
}

/// Recorded computation graph. One tape per forward/backward cycle; tapes are
/// single-threaded and never shared.
pub struct Tape {
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
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

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        let grad = Tensor::zeros(value.shape());
        self.nodes.push(Node { op, value, grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Register an input or parameter tensor.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Accumulated gradient of `id`; zeros before any backward pass.
    pub fn grad(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].grad
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad.fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), value))
    }

    /// Elementwise add; also accepts a 1-element tensor on either side as a
    /// scalar broadcast. No other implicit broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x + y)?
        } else if vb.is_scalar() {
            let s = vb.data()[0];
            va.map(|x| x + s)
        } else if va.is_scalar() {
            let s = va.data()[0];
            vb.map(|x| x + s)
        } else {
            return Err(NdError::DimMismatch {
                op: "add",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        Ok(self.push(Op::Add(a, b), value))
    }

    /// Elementwise (Hadamard) product with the same scalar-broadcast rule as
    /// [`Tape::add`].
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let (va, vb) = (self.value(a), self.value(b));
        let value = if va.shape() == vb.shape() {
            va.zip_map(vb, |x, y| x * y)?
        } else if vb.is_scalar() {
            let s = vb.data()[0];
            va.map(|x| x * s)
        } else if va.is_scalar() {
            let s = va.data()[0];
            vb.map(|x| x * s)
        } else {
            return Err(NdError::DimMismatch {
                op: "mul",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        };
        Ok(self.push(Op::Mul(a, b), value))
    }

    /// Add a 1-d bias of length `cols` to every row of a `[rows x cols]`
    /// matrix.
    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId, NdError> {
        let va = self.value(a);
        let vb = self.value(bias);
        let (rows, cols) = va.dims2()?;
        if vb.shape() != [cols] {
            return Err(NdError::DimMismatch {
                op: "add_row",
                lhs: va.shape().to_vec(),
                rhs: vb.shape().to_vec(),
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(va.data()[i * cols + j] + vb.data()[j]);
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::AddRow(a, bias), value))
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let value = self.value(a).map(|x| x * k);
        self.push(Op::Scale(a, k), value)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NdError> {
        let neg = self.scale(b, -1.0);
        self.add(a, neg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(stable_sigmoid);
        self.push(Op::Sigmoid(a), value)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        self.push(Op::Tanh(a), value)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(|x| x.max(0.0));
        self.push(Op::Relu(a), value)
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::ln);
        self.push(Op::Ln(a), value)
    }

    /// Row-wise softmax with max-subtraction for overflow safety.
    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        let va = self.value(a);
        let (rows, cols) = va.dims2().expect("softmax input must be 1-d or 2-d");
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let row = &va.data()[i * cols..(i + 1) * cols];
            data.extend(softmax_row(row));
        }
        let value = Tensor::new(va.shape(), data).expect("softmax preserves shape");
        self.push(Op::Softmax(a), value)
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(Op::Sum(a), value)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let value = Tensor::scalar(v.sum() / v.numel() as f64);
        self.push(Op::Mean(a), value)
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId, NdError> {
        if parts.is_empty() {
            return Err(NdError::EmptySequence);
        }
        let (rows, _) = self.value(parts[0]).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if r != rows {
                return Err(NdError::DimMismatch {
                    op: "concat_cols",
                    lhs: self.value(parts[0]).shape().to_vec(),
                    rhs: self.value(p).shape().to_vec(),
                });
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                let v = self.value(p);
                data.extend_from_slice(&v.data()[i * w..(i + 1) * w]);
            }
        }
        let value = Tensor::new(&[rows, total], data)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value))
    }

    /// Pick rows of a `[n x d]` table by index; duplicate indices accumulate
    /// gradient into the same row.
    pub fn select_rows(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, NdError> {
        let vt = self.value(table);
        let (n, d) = vt.dims2()?;
        if indices.is_empty() {
            return Err(NdError::EmptySequence);
        }
        let mut data = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= n {
                return Err(NdError::IndexOutOfRange {
                    index: idx,
                    size: n,
                });
            }
            data.extend_from_slice(&vt.data()[idx * d..(idx + 1) * d]);
        }
        let value = Tensor::new(&[indices.len(), d], data)?;
        Ok(self.push(Op::SelectRows(table, indices.to_vec()), value))
    }

    /// One picked entry per row: out[i, 0] = a[i, cols[i]].
    pub fn gather_cols(&mut self, a: NodeId, cols: &[usize]) -> Result<NodeId, NdError> {
        let va = self.value(a);
        let (rows, width) = va.dims2()?;
        if cols.len() != rows {
            return Err(NdError::BadShape {
                op: "gather_cols",
                expect: "one column index per row",
                got: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(rows);
        for (i, &c) in cols.iter().enumerate() {
            if c >= width {
                return Err(NdError::IndexOutOfRange {
                    index: c,
                    size: width,
                });
            }
            data.push(va.data()[i * width + c]);
        }
        let value = Tensor::new(&[rows, 1], data)?;
        Ok(self.push(Op::GatherCols(a, cols.to_vec()), value))
    }

    /// Scale each row i of a matrix by the constant mask[i].
    pub fn mul_row_mask(&mut self, a: NodeId, mask: &[f64]) -> Result<NodeId, NdError> {
        let va = self.value(a);
        let (rows, cols) = va.dims2()?;
        if mask.len() != rows {
            return Err(NdError::BadShape {
                op: "mul_row_mask",
                expect: "one mask entry per row",
                got: vec![mask.len()],
            });
        }
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(va.data()[i * cols + j] * mask[i]);
            }
        }
        let value = Tensor::new(va.shape(), data)?;
        Ok(self.push(Op::MulRowMask(a, mask.to_vec()), value))
    }

    /// Elementwise multiply by a constant tensor of the same shape.
    pub fn mul_mask(&mut self, a: NodeId, mask: Tensor) -> Result<NodeId, NdError> {
        let value = self.value(a).zip_map(&mask, |x, m| x * m)?;
        Ok(self.push(Op::MulMask(a, mask), value))
    }

    /// Reverse sweep from a scalar loss node. Gradients of this pass are
    /// added onto whatever the tape already holds, so calling backward twice
    /// without [`Tape::zero_grads`] doubles every gradient.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NdError> {
        let shape = self.value(loss).shape().to_vec();
        if self.value(loss).numel() != 1 {
            return Err(NdError::NonScalarLoss(shape));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let out_grad = std::mem::replace(&mut grads[idx], Tensor::zeros(&[1]));
            if out_grad.data().iter().all(|&g| g == 0.0) {
                grads[idx] = out_grad;
                continue;
            }
            self.propagate(idx, &out_grad, &mut grads);
            grads[idx] = out_grad;
        }

        for (node, g) in self.nodes.iter_mut().zip(&grads) {
            node.grad
                .add_scaled(g, 1.0)
                .expect("gradient shape matches value shape");
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor, grads: &mut [Tensor]) {
        let acc = |grads: &mut [Tensor], id: NodeId, delta: Tensor| {
            grads[id.0]
                .add_scaled(&delta, 1.0)
                .expect("gradient shape matches input shape");
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let va = &self.nodes[a.0].value;
                let vb = &self.nodes[b.0].value;
                let da = g.matmul(&vb.transpose2().unwrap()).unwrap();
                let db = va.transpose2().unwrap().matmul(g).unwrap();
                acc(grads, *a, da);
                acc(grads, *b, db);
            }
            Op::Add(a, b) => {
                self.acc_broadcast(grads, *a, g, 1.0, None);
                self.acc_broadcast(grads, *b, g, 1.0, None);
            }
            Op::Mul(a, b) => {
                let vb = self.nodes[b.0].value.clone();
                let va = self.nodes[a.0].value.clone();
                self.acc_broadcast(grads, *a, g, 1.0, Some(&vb));
                self.acc_broadcast(grads, *b, g, 1.0, Some(&va));
            }
            Op::AddRow(a, bias) => {
                acc(grads, *a, g.clone());
                let (rows, cols) = g.dims2().unwrap();
                let gb = &mut grads[bias.0];
                for i in 0..rows {
                    for j in 0..cols {
                        gb.data_mut()[j] += g.data()[i * cols + j];
                    }
                }
            }
            Op::Scale(a, k) => acc(grads, *a, g.map(|x| x * k)),
            Op::Sigmoid(a) => {
                let y = &self.nodes[idx].value;
                let delta = g.zip_map(y, |gi, yi| gi * yi * (1.0 - yi)).unwrap();
                acc(grads, *a, delta);
            }
            Op::Tanh(a) => {
                let y = &self.nodes[idx].value;
                let delta = g.zip_map(y, |gi, yi| gi * (1.0 - yi * yi)).unwrap();
                acc(grads, *a, delta);
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                let delta = g
                    .zip_map(x, |gi, xi| if xi > 0.0 { gi } else { 0.0 })
                    .unwrap();
                acc(grads, *a, delta);
            }
            Op::Ln(a) => {
                let x = &self.nodes[a.0].value;
                let delta = g.zip_map(x, |gi, xi| gi / xi).unwrap();
                acc(grads, *a, delta);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = y.dims2().unwrap();
                let mut delta = Tensor::zeros(y.shape());
                for i in 0..rows {
                    let yr = &y.data()[i * cols..(i + 1) * cols];
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(&yj, &gj)| yj * gj).sum();
                    for j in 0..cols {
                        delta.data_mut()[i * cols + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(grads, *a, delta);
            }
            Op::Sum(a) => {
                let g0 = g.data()[0];
                let shape = self.nodes[a.0].value.shape();
                acc(grads, *a, Tensor::full(shape, g0));
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.numel() as f64;
                let g0 = g.data()[0] / n;
                let shape = self.nodes[a.0].value.shape();
                acc(grads, *a, Tensor::full(shape, g0));
            }
            Op::ConcatCols(parts) => {
                let (rows, _) = g.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.nodes[p.0].value.dims2().unwrap();
                    let total = g.dims2().unwrap().1;
                    let mut delta = Tensor::zeros(self.nodes[p.0].value.shape());
                    for i in 0..rows {
                        for j in 0..w {
                            delta.data_mut()[i * w + j] = g.data()[i * total + offset + j];
                        }
                    }
                    acc(grads, p, delta);
                    offset += w;
                }
            }
            Op::SelectRows(table, indices) => {
                let (_, d) = self.nodes[table.0].value.dims2().unwrap();
                let gt = &mut grads[table.0];
                for (row, &src) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt.data_mut()[src * d + j] += g.data()[row * d + j];
                    }
                }
            }
            Op::GatherCols(a, cols) => {
                let (_, width) = self.nodes[a.0].value.dims2().unwrap();
                let ga = &mut grads[a.0];
                for (i, &c) in cols.iter().enumerate() {
                    ga.data_mut()[i * width + c] += g.data()[i];
                }
            }
            Op::MulRowMask(a, mask) => {
                let (rows, cols) = g.dims2().unwrap();
                let mut delta = Tensor::zeros(g.shape());
                for i in 0..rows {
                    for j in 0..cols {
                        delta.data_mut()[i * cols + j] = g.data()[i * cols + j] * mask[i];
                    }
                }
                acc(grads, *a, delta);
            }
            Op::MulMask(a, mask) => {
                let delta = g.zip_map(mask, |gi, mi| gi * mi).unwrap();
                acc(grads, *a, delta);
            }
        }
    }

    /// Accumulate `g` (optionally weighted elementwise by `other`) into the
    /// gradient of `id`, summing when `id` was a scalar broadcast.
    fn acc_broadcast(
        &self,
        grads: &mut [Tensor],
        id: NodeId,
        g: &Tensor,
        k: f64,
        other: Option<&Tensor>,
    ) {
        let target_shape = self.nodes[id.0].value.shape().to_vec();
        if target_shape == g.shape() {
            match other {
                None => grads[id.0].add_scaled(&g.map(|x| x * k), 1.0).unwrap(),
                Some(o) => {
                    if o.shape() == g.shape() {
                        let delta = g.zip_map(o, |gi, oi| gi * oi * k).unwrap();
                        grads[id.0].add_scaled(&delta, 1.0).unwrap();
                    } else {
                        // other was the scalar operand
                        let s = o.data()[0];
                        grads[id.0].add_scaled(&g.map(|x| x * s * k), 1.0).unwrap();
                    }
                }
            }
        } else {
            // id is the scalar side of a broadcast
            let total: f64 = match other {
                None => g.data().iter().sum::<f64>() * k,
                Some(o) => g
                    .data()
                    .iter()
                    .zip(o.data())
                    .map(|(&gi, &oi)| gi * oi * k)
                    .sum(),
            };
            grads[id.0].data_mut()[0] += total;
        }
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

pub(crate) fn softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / total).collect()
}
