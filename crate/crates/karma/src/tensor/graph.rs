//! Reverse-mode autodiff over an eagerly evaluated op graph.
//!
//! Nodes are appended in topological order by construction (an op can only
//! reference ids that already exist), so backward is a single reverse sweep.
//! The engine handles rank-1 and rank-2 tensors; the only broadcasting rule
//! is bias-style row broadcast in `add`.

use super::kernels;
use super::{Tensor, TensorError};
use std::collections::{BTreeMap, HashMap};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Leaf { param: Option<String> },
    Add { lhs: NodeId, rhs: NodeId, broadcast_rhs: bool },
    Mul { lhs: NodeId, rhs: NodeId },
    MatMul { lhs: NodeId, rhs: NodeId },
    Gather { table: NodeId, indices: Vec<usize> },
    MeanPool { input: NodeId, axis: usize },
    Tanh { input: NodeId },
    Relu { input: NodeId },
    Sigmoid { input: NodeId },
    Softmax { input: NodeId, axis: usize },
    CrossEntropy { logits: NodeId, targets: Vec<usize> },
    Concat { inputs: Vec<NodeId>, axis: usize },
}

struct Node {
    op: Op,
    value: Tensor,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`]: one tensor per reached leaf,
/// addressable by node id or by parameter name.
#[derive(Debug)]
pub struct Gradients {
    by_leaf: HashMap<usize, Tensor>,
    named: BTreeMap<String, Tensor>,
}

impl Gradients {
    /// Gradient w.r.t. a leaf node, if the loss depends on it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor> {
        self.by_leaf.get(&id.0)
    }

    pub fn named(&self) -> &BTreeMap<String, Tensor> {
        &self.named
    }

    pub fn into_named(self) -> BTreeMap<String, Tensor> {
        self.named
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Inserts a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf { param: None }, value)
    }

    /// Inserts a trainable leaf whose gradient is reported under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> NodeId {
        self.push(
            Op::Leaf {
                param: Some(name.into()),
            },
            value,
        )
    }

    fn push(&mut self, op: Op, value: Tensor) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn checked(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<NodeId, TensorError> {
        value.assert_finite(name)?;
        Ok(self.push(op, value))
    }

    /// Elementwise sum. Also accepts a `(n x m) + (1 x m | m)` bias-style
    /// broadcast of `rhs` over the leading axis.
    pub fn add(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let (ld, rd) = (self.value(lhs).dims().to_vec(), self.value(rhs).dims().to_vec());
        let broadcast_rhs = if ld == rd {
            false
        } else if ld.len() == 2 && (rd == [1, ld[1]] || rd == [ld[1]]) {
            true
        } else {
            return Err(TensorError::ShapeMismatch {
                op: "add",
                lhs: ld,
                rhs: rd,
            });
        };
        let a = self.value(lhs).data();
        let b = self.value(rhs).data();
        let mut out = a.to_vec();
        if broadcast_rhs {
            let m = ld[1];
            for (i, o) in out.iter_mut().enumerate() {
                *o += b[i % m];
            }
        } else {
            for (o, &v) in out.iter_mut().zip(b.iter()) {
                *o += v;
            }
        }
        let value = Tensor { dims: ld, data: out };
        self.checked(Op::Add { lhs, rhs, broadcast_rhs }, value, "add")
    }

    /// Elementwise product; shapes must match exactly.
    pub fn multiply(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let (ld, rd) = (self.value(lhs).dims().to_vec(), self.value(rhs).dims().to_vec());
        if ld != rd {
            return Err(TensorError::ShapeMismatch {
                op: "multiply",
                lhs: ld,
                rhs: rd,
            });
        }
        let out: Vec<f32> = self
            .value(lhs)
            .data()
            .iter()
            .zip(self.value(rhs).data().iter())
            .map(|(&a, &b)| a * b)
            .collect();
        let value = Tensor { dims: ld, data: out };
        self.checked(Op::Mul { lhs, rhs }, value, "multiply")
    }

    /// `(n x k) * (k x m)` matrix product.
    pub fn matmul(&mut self, lhs: NodeId, rhs: NodeId) -> Result<NodeId, TensorError> {
        let (ld, rd) = (self.value(lhs).dims().to_vec(), self.value(rhs).dims().to_vec());
        if ld.len() != 2 || rd.len() != 2 || ld[1] != rd[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: ld,
                rhs: rd,
            });
        }
        let (n, k, m) = (ld[0], ld[1], rd[1]);
        let out = kernels::matmul(self.value(lhs).data(), self.value(rhs).data(), n, k, m);
        let value = Tensor {
            dims: vec![n, m],
            data: out,
        };
        self.checked(Op::MatMul { lhs, rhs }, value, "matmul")
    }

    /// Row lookup into a `(V x E)` table; result is `(len(indices) x E)`.
    pub fn embedding_gather(&mut self, table: NodeId, indices: &[usize]) -> Result<NodeId, TensorError> {
        let td = self.value(table).dims().to_vec();
        if td.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "embedding_gather",
                lhs: td,
                rhs: vec![indices.len()],
            });
        }
        let (v, e) = (td[0], td[1]);
        for &idx in indices {
            if idx >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding_gather",
                    index: idx,
                    size: v,
                });
            }
        }
        let data = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * e);
        for &idx in indices {
            out.extend_from_slice(&data[idx * e..(idx + 1) * e]);
        }
        let value = Tensor {
            dims: vec![indices.len(), e],
            data: out,
        };
        self.checked(
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            value,
            "embedding_gather",
        )
    }

    /// Mean over one axis, keeping it with size 1.
    pub fn mean_pool(&mut self, input: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        if axis >= dims.len() || dims[axis] == 0 {
            return Err(TensorError::BadAxis {
                op: "mean_pool",
                axis,
                dims,
            });
        }
        let data = self.value(input).data();
        let mut out_dims = dims.clone();
        out_dims[axis] = 1;
        let out = match (dims.len(), axis) {
            (1, 0) => vec![data.iter().sum::<f32>() / dims[0] as f32],
            (2, 0) => {
                let (n, m) = (dims[0], dims[1]);
                let mut acc = vec![0.0f32; m];
                for row in data.chunks_exact(m) {
                    for (a, &v) in acc.iter_mut().zip(row.iter()) {
                        *a += v;
                    }
                }
                acc.iter_mut().for_each(|a| *a /= n as f32);
                acc
            }
            (2, 1) => {
                let m = dims[1];
                data.chunks_exact(m)
                    .map(|row| row.iter().sum::<f32>() / m as f32)
                    .collect()
            }
            _ => {
                return Err(TensorError::BadAxis {
                    op: "mean_pool",
                    axis,
                    dims,
                })
            }
        };
        let value = Tensor {
            dims: out_dims,
            data: out,
        };
        self.checked(Op::MeanPool { input, axis }, value, "mean_pool")
    }

    pub fn tanh(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = Tensor {
            dims: self.value(input).dims().to_vec(),
            data: self.value(input).data().iter().map(|v| v.tanh()).collect(),
        };
        self.checked(Op::Tanh { input }, value, "tanh")
    }

    pub fn relu(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = Tensor {
            dims: self.value(input).dims().to_vec(),
            data: self.value(input).data().iter().map(|v| v.max(0.0)).collect(),
        };
        self.checked(Op::Relu { input }, value, "relu")
    }

    pub fn sigmoid(&mut self, input: NodeId) -> Result<NodeId, TensorError> {
        let value = Tensor {
            dims: self.value(input).dims().to_vec(),
            data: self
                .value(input)
                .data()
                .iter()
                .map(|&v| kernels::stable_sigmoid(v))
                .collect(),
        };
        self.checked(Op::Sigmoid { input }, value, "sigmoid")
    }

    /// Softmax along `axis` (rank 1 or 2).
    pub fn softmax(&mut self, input: NodeId, axis: usize) -> Result<NodeId, TensorError> {
        let dims = self.value(input).dims().to_vec();
        if axis >= dims.len() || dims.len() > 2 {
            return Err(TensorError::BadAxis {
                op: "softmax",
                axis,
                dims,
            });
        }
        let data = self.value(input).data();
        let mut out = vec![0.0f32; data.len()];
        for (start, stride, len) in lanes(&dims, axis) {
            let lane: Vec<f32> = (0..len).map(|i| data[start + i * stride]).collect();
            let mut soft = vec![0.0f32; len];
            kernels::softmax_row(&lane, &mut soft);
            for (i, v) in soft.into_iter().enumerate() {
                out[start + i * stride] = v;
            }
        }
        let value = Tensor { dims, data: out };
        self.checked(Op::Softmax { input, axis }, value, "softmax")
    }

    /// Per-row categorical cross entropy from raw logits.
    ///
    /// `logits` is `(C)` or `(n x C)`; `targets` holds one class index per
    /// row; the result is the rank-1 tensor of per-row losses.
    pub fn cross_entropy_with_logits(
        &mut self,
        logits: NodeId,
        targets: &[usize],
    ) -> Result<NodeId, TensorError> {
        let dims = self.value(logits).dims().to_vec();
        let (rows, classes) = match dims.len() {
            1 => (1usize, dims[0]),
            2 => (dims[0], dims[1]),
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op: "cross_entropy_with_logits",
                    lhs: dims,
                    rhs: vec![targets.len()],
                })
            }
        };
        if targets.len() != rows {
            return Err(TensorError::ShapeMismatch {
                op: "cross_entropy_with_logits",
                lhs: dims,
                rhs: vec![targets.len()],
            });
        }
        for &t in targets {
            if t >= classes {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy_with_logits",
                    index: t,
                    size: classes,
                });
            }
        }
        let data = self.value(logits).data();
        let mut out = Vec::with_capacity(rows);
        let mut lp = vec![0.0f32; classes];
        for (r, &t) in targets.iter().enumerate() {
            let row = &data[r * classes..(r + 1) * classes];
            kernels::log_softmax_row(row, &mut lp);
            out.push(-lp[t]);
        }
        let value = Tensor {
            dims: vec![rows],
            data: out,
        };
        self.checked(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            value,
            "cross_entropy_with_logits",
        )
    }

    /// Concatenation along `axis`; inputs must agree on every other axis.
    pub fn concat(&mut self, inputs: &[NodeId], axis: usize) -> Result<NodeId, TensorError> {
        let first = inputs.first().ok_or(TensorError::ShapeMismatch {
            op: "concat",
            lhs: vec![],
            rhs: vec![],
        })?;
        let base = self.value(*first).dims().to_vec();
        if axis >= base.len() || base.len() > 2 {
            return Err(TensorError::BadAxis {
                op: "concat",
                axis,
                dims: base,
            });
        }
        let mut axis_total = 0usize;
        for &id in inputs {
            let d = self.value(id).dims();
            if d.len() != base.len()
                || d.iter()
                    .zip(base.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: d.to_vec(),
                });
            }
            axis_total += d[axis];
        }
        let mut out_dims = base.clone();
        out_dims[axis] = axis_total;

        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = vec![0.0f32; outer * axis_total * inner];
        let mut offset = 0usize;
        for &id in inputs {
            let d = self.value(id).dims();
            let chunk = d[axis] * inner;
            let data = self.value(id).data();
            for o in 0..outer {
                let src = &data[o * chunk..(o + 1) * chunk];
                let dst_start = o * axis_total * inner + offset;
                out[dst_start..dst_start + chunk].copy_from_slice(src);
            }
            offset += chunk;
        }
        let value = Tensor {
            dims: out_dims,
            data: out,
        };
        self.checked(
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            value,
            "concat",
        )
    }

    /// Propagates d(loss)/d(leaf) for every leaf the scalar `loss` depends on.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients, TensorError> {
        let loss_val = self.value(loss);
        if loss_val.numel() != 1 {
            return Err(TensorError::NonScalarLoss {
                dims: loss_val.dims().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        let mut by_leaf = HashMap::new();
        let mut named = BTreeMap::new();

        for id in (0..=loss.0).rev() {
            let Some(grad) = grads[id].take() else { continue };
            if !grad.iter().all(|v| v.is_finite()) {
                return Err(TensorError::NonFinite { op: "backward" });
            }
            let node = &self.nodes[id];
            match &node.op {
                Op::Leaf { param } => {
                    let tensor = Tensor {
                        dims: node.value.dims().to_vec(),
                        data: grad,
                    };
                    if let Some(name) = param {
                        named.insert(name.clone(), tensor.clone());
                    }
                    by_leaf.insert(id, tensor);
                }
                Op::Add { lhs, rhs, broadcast_rhs } => {
                    accumulate(&mut grads, &self.nodes, *lhs, &grad);
                    if *broadcast_rhs {
                        let m = node.value.dims()[1];
                        let mut reduced = vec![0.0f32; self.nodes[rhs.0].value.numel()];
                        for (i, &g) in grad.iter().enumerate() {
                            reduced[i % m] += g;
                        }
                        accumulate(&mut grads, &self.nodes, *rhs, &reduced);
                    } else {
                        accumulate(&mut grads, &self.nodes, *rhs, &grad);
                    }
                }
                Op::Mul { lhs, rhs } => {
                    let a = self.nodes[lhs.0].value.data();
                    let b = self.nodes[rhs.0].value.data();
                    let da: Vec<f32> = grad.iter().zip(b.iter()).map(|(&g, &v)| g * v).collect();
                    let db: Vec<f32> = grad.iter().zip(a.iter()).map(|(&g, &v)| g * v).collect();
                    accumulate(&mut grads, &self.nodes, *lhs, &da);
                    accumulate(&mut grads, &self.nodes, *rhs, &db);
                }
                Op::MatMul { lhs, rhs } => {
                    let a = &self.nodes[lhs.0].value;
                    let b = &self.nodes[rhs.0].value;
                    let (n, k) = (a.dims()[0], a.dims()[1]);
                    let m = b.dims()[1];
                    let mut da = vec![0.0f32; n * k];
                    kernels::matmul_a_bt(&grad, b.data(), n, m, k, &mut da);
                    let mut db = vec![0.0f32; k * m];
                    kernels::matmul_at_b(a.data(), &grad, n, k, m, &mut db);
                    accumulate(&mut grads, &self.nodes, *lhs, &da);
                    accumulate(&mut grads, &self.nodes, *rhs, &db);
                }
                Op::Gather { table, indices } => {
                    let e = node.value.dims()[1];
                    let mut dt = vec![0.0f32; self.nodes[table.0].value.numel()];
                    for (r, &idx) in indices.iter().enumerate() {
                        let src = &grad[r * e..(r + 1) * e];
                        let dst = &mut dt[idx * e..(idx + 1) * e];
                        for (d, &g) in dst.iter_mut().zip(src.iter()) {
                            *d += g;
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *table, &dt);
                }
                Op::MeanPool { input, axis } => {
                    let in_dims = self.nodes[input.0].value.dims().to_vec();
                    let len = in_dims[*axis] as f32;
                    let mut dx = vec![0.0f32; self.nodes[input.0].value.numel()];
                    for (k, (start, stride, lane_len)) in lanes(&in_dims, *axis).into_iter().enumerate() {
                        let g = grad[k] / len;
                        for i in 0..lane_len {
                            dx[start + i * stride] += g;
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *input, &dx);
                }
                Op::Tanh { input } => {
                    let y = node.value.data();
                    let dx: Vec<f32> = grad
                        .iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, &self.nodes, *input, &dx);
                }
                Op::Relu { input } => {
                    let x = self.nodes[input.0].value.data();
                    let dx: Vec<f32> = grad
                        .iter()
                        .zip(x.iter())
                        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, &self.nodes, *input, &dx);
                }
                Op::Sigmoid { input } => {
                    let y = node.value.data();
                    let dx: Vec<f32> = grad
                        .iter()
                        .zip(y.iter())
                        .map(|(&g, &y)| g * y * (1.0 - y))
                        .collect();
                    accumulate(&mut grads, &self.nodes, *input, &dx);
                }
                Op::Softmax { input, axis } => {
                    let dims = node.value.dims().to_vec();
                    let y = node.value.data();
                    let mut dx = vec![0.0f32; y.len()];
                    for (start, stride, len) in lanes(&dims, *axis) {
                        let mut dot = 0.0f32;
                        for i in 0..len {
                            let p = start + i * stride;
                            dot += grad[p] * y[p];
                        }
                        for i in 0..len {
                            let p = start + i * stride;
                            dx[p] = y[p] * (grad[p] - dot);
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *input, &dx);
                }
                Op::CrossEntropy { logits, targets } => {
                    let ldims = self.nodes[logits.0].value.dims().to_vec();
                    let classes = *ldims.last().unwrap();
                    let data = self.nodes[logits.0].value.data();
                    let mut dl = vec![0.0f32; data.len()];
                    let mut p = vec![0.0f32; classes];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &data[r * classes..(r + 1) * classes];
                        kernels::softmax_row(row, &mut p);
                        let g = grad[r];
                        let drow = &mut dl[r * classes..(r + 1) * classes];
                        for (j, d) in drow.iter_mut().enumerate() {
                            let indicator = if j == t { 1.0 } else { 0.0 };
                            *d += g * (p[j] - indicator);
                        }
                    }
                    accumulate(&mut grads, &self.nodes, *logits, &dl);
                }
                Op::Concat { inputs, axis } => {
                    let out_dims = node.value.dims().to_vec();
                    let outer: usize = out_dims[..*axis].iter().product();
                    let inner: usize = out_dims[*axis + 1..].iter().product();
                    let axis_total = out_dims[*axis];
                    let mut offset = 0usize;
                    for &inp in inputs {
                        let d = self.nodes[inp.0].value.dims();
                        let chunk = d[*axis] * inner;
                        let mut dx = vec![0.0f32; self.nodes[inp.0].value.numel()];
                        for o in 0..outer {
                            let src_start = o * axis_total * inner + offset;
                            dx[o * chunk..(o + 1) * chunk]
                                .copy_from_slice(&grad[src_start..src_start + chunk]);
                        }
                        accumulate(&mut grads, &self.nodes, inp, &dx);
                        offset += chunk;
                    }
                }
            }
        }

        Ok(Gradients { by_leaf, named })
    }
}

fn accumulate(grads: &mut [Option<Vec<f32>>], nodes: &[Node], target: NodeId, delta: &[f32]) {
    let slot = &mut grads[target.0];
    match slot {
        Some(buf) => {
            for (b, &d) in buf.iter_mut().zip(delta.iter()) {
                *b += d;
            }
        }
        None => {
            debug_assert_eq!(nodes[target.0].value.numel(), delta.len());
            *slot = Some(delta.to_vec());
        }
    }
}

/// Lanes along `axis` as `(start, stride, len)` triples.
fn lanes(dims: &[usize], axis: usize) -> Vec<(usize, usize, usize)> {
    match (dims.len(), axis) {
        (1, 0) => vec![(0, 1, dims[0])],
        (2, 0) => (0..dims[1]).map(|j| (j, dims[1], dims[0])).collect(),
        (2, 1) => (0..dims[0]).map(|i| (i * dims[1], 1, dims[1])).collect(),
        _ => unreachable!("ops validate rank <= 2"),
    }
}
