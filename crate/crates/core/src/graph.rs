//! Append-only computation graph with reverse-mode differentiation.
//!
//! Every operation computes its value eagerly and appends a node. A node's
//! backward "executes" iff at least one of its inputs requires grad; such a node
//! saves exactly the tensors its backward consumes, and only for the inputs that
//! need a gradient. Each saved tensor is counted once in the ledger under its own
//! tag. Outputs inherit the graph's current scope tag.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::TensorError;
use crate::kernels;
use crate::ledger::MemoryLedger;
use crate::tensor::{NodeId, Precision, Tag, Tensor};

type Res<T> = Result<T, TensorError>;

/// How the right operand of a binary elementwise op lines up with the left.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs has one element
    ScalarRhs,
    /// lhs has one element
    ScalarLhs,
    /// rhs is `[n]` (or `[1, n]`), added to every row of an `[.., n]` lhs
    Row,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul,
    MatMulNt,
    Linear { bias: bool },
    Add(Broadcast),
    Sub(Broadcast),
    Mul(Broadcast),
    Scale(f64),
    Relu,
    Gelu,
    Sigmoid,
    SoftmaxRows,
    Mean { axes: Vec<usize> },
    LayerNorm { eps: f64 },
    CrossEntropy { targets: Arc<Vec<usize>> },
    BceLogits,
    Gather { index: Arc<Vec<usize>> },
    ConcatRows,
    ConcatCols,
    SliceCols { start: usize },
    Reshape,
    Tap,
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul => "matmul",
            Op::MatMulNt => "matmul_nt",
            Op::Linear { .. } => "linear",
            Op::Add(_) => "add",
            Op::Sub(_) => "sub",
            Op::Mul(_) => "mul",
            Op::Scale(_) => "scale",
            Op::Relu => "relu",
            Op::Gelu => "gelu",
            Op::Sigmoid => "sigmoid",
            Op::SoftmaxRows => "softmax_rows",
            Op::Mean { .. } => "reduce_mean",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy_logits",
            Op::BceLogits => "bce_logits",
            Op::Gather { .. } => "gather",
            Op::ConcatRows => "concat_rows",
            Op::ConcatCols => "concat_cols",
            Op::SliceCols { .. } => "slice_cols",
            Op::Reshape => "reshape",
            Op::Tap => "tap",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Saved {
    Input(usize),
    Output,
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
    saved: Vec<NodeId>,
}

/// Read-only view of a recorded node.
#[derive(Clone, Copy, Debug)]
pub struct NodeInfo<'a> {
    pub id: NodeId,
    pub op: &'static str,
    pub inputs: &'a [NodeId],
    pub saved: &'a [NodeId],
    pub shape: &'a [usize],
    pub tag: Tag,
    pub requires_grad: bool,
}

#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    retained: Vec<bool>,
    retained_bytes: [usize; 4],
    scope: Tag,
    precision: Precision,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Precision::F64)
    }
}

/// Gradients of every grad-requiring node reached backward from the loss.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: HashMap<NodeId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = NodeId> + '_ {
        self.grads.keys().copied()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.remove(&id)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn as_matrix(op: &'static str, t: &Tensor, other: &Tensor) -> Res<(usize, usize)> {
    if t.rank() != 2 {
        return Err(shape_err(op, t.shape(), other.shape()));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

impl Graph {
    pub fn new(precision: Precision) -> Self {
        Self {
            nodes: Vec::new(),
            retained: Vec::new(),
            retained_bytes: [0; 4],
            scope: Tag::Data,
            precision,
        }
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node and zeroes the ledger.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.retained.clear();
        self.retained_bytes = [0; 4];
    }

    /// Sets the tag given to subsequent op outputs; returns the previous one.
    pub fn set_scope(&mut self, tag: Tag) -> Tag {
        std::mem::replace(&mut self.scope, tag)
    }

    pub fn scope(&self) -> Tag {
        self.scope
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].value.requires_grad()
    }

    pub fn info(&self, id: NodeId) -> NodeInfo<'_> {
        let n = &self.nodes[id.0];
        NodeInfo {
            id,
            op: n.op.name(),
            inputs: &n.inputs,
            saved: &n.saved,
            shape: n.value.shape(),
            tag: n.value.tag(),
            requires_grad: n.value.requires_grad(),
        }
    }

    pub fn nodes(&self) -> impl Iterator<Item = NodeInfo<'_>> {
        (0..self.nodes.len()).map(|i| self.info(NodeId(i)))
    }

    pub fn is_retained(&self, id: NodeId) -> bool {
        self.retained[id.0]
    }

    pub fn retained_bytes(&self, tag: Tag) -> usize {
        self.retained_bytes[tag.index()]
    }

    pub fn ledger(&self) -> MemoryLedger {
        MemoryLedger::from_counts(self.retained_bytes, self.precision.width())
    }

    // ---- recording -------------------------------------------------------

    /// Registers a tensor as a leaf; it keeps its own tag and grad flag.
    pub fn leaf(&mut self, tensor: &Tensor) -> NodeId {
        let id = NodeId(self.nodes.len());
        let value = tensor.detached().with_node(id, tensor.requires_grad());
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value,
            saved: Vec::new(),
        });
        self.retained.push(false);
        id
    }

    /// Leaf holding `tensor`'s values under `tag`, never requiring grad.
    pub fn constant(&mut self, tensor: &Tensor, tag: Tag) -> NodeId {
        let t = Tensor::from_parts(tensor.shape().to_vec(), tensor.shared_data(), tag);
        self.leaf(&t)
    }

    fn record(
        &mut self,
        op: Op,
        inputs: Vec<NodeId>,
        shape: Vec<usize>,
        mut data: Vec<f64>,
        saves: &[(usize, Saved)],
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        let requires_grad = inputs.iter().any(|&i| self.requires_grad(i));
        let mut saved = Vec::new();
        if requires_grad {
            for &(needs, what) in saves {
                if !self.requires_grad(inputs[needs]) {
                    continue;
                }
                let sid = match what {
                    Saved::Input(k) => inputs[k],
                    Saved::Output => id,
                };
                if !saved.contains(&sid) {
                    saved.push(sid);
                }
            }
        }
        self.precision.round(&mut data);
        let value =
            Tensor::from_parts(shape, Arc::new(data), self.scope).with_node(id, requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved: saved.clone(),
        });
        self.retained.push(false);
        let width = self.precision.width();
        for sid in saved {
            if !self.retained[sid.0] {
                self.retained[sid.0] = true;
                let t = &self.nodes[sid.0].value;
                self.retained_bytes[t.tag().index()] += t.bytes(width);
            }
        }
        id
    }

    // ---- linear algebra --------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Res<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul", ta, tb)?;
        let (k2, n) = as_matrix("matmul", tb, ta)?;
        if k != k2 {
            return Err(shape_err("matmul", ta.shape(), tb.shape()));
        }
        let data = kernels::matmul(ta.data(), tb.data(), m, k, n);
        Ok(self.record(
            Op::MatMul,
            vec![a, b],
            vec![m, n],
            data,
            &[(0, Saved::Input(1)), (1, Saved::Input(0))],
        ))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Res<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = as_matrix("matmul_nt", ta, tb)?;
        let (n, k2) = as_matrix("matmul_nt", tb, ta)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", ta.shape(), tb.shape()));
        }
        let data = kernels::matmul_nt(ta.data(), tb.data(), m, k, n);
        Ok(self.record(
            Op::MatMulNt,
            vec![a, b],
            vec![m, n],
            data,
            &[(0, Saved::Input(1)), (1, Saved::Input(0))],
        ))
    }

    /// `x[m×k] · w[k×n] (+ b[n] per row)`
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Res<NodeId> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k) = as_matrix("linear", tx, tw)?;
        let (k2, n) = as_matrix("linear", tw, tx)?;
        if k != k2 {
            return Err(shape_err("linear", tx.shape(), tw.shape()));
        }
        let mut data = kernels::matmul(tx.data(), tw.data(), m, k, n);
        let mut inputs = vec![x, w];
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.numel() != n {
                return Err(shape_err("linear", tw.shape(), tb.shape()));
            }
            for row in data.chunks_mut(n) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
            inputs.push(b);
        }
        Ok(self.record(
            Op::Linear { bias: b.is_some() },
            inputs,
            vec![m, n],
            data,
            &[(0, Saved::Input(1)), (1, Saved::Input(0))],
        ))
    }

    // ---- elementwise -----------------------------------------------------

    fn broadcast_mode(&self, op: &'static str, a: NodeId, b: NodeId) -> Res<Broadcast> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            Ok(Broadcast::Same)
        } else if tb.numel() == 1 {
            Ok(Broadcast::ScalarRhs)
        } else if ta.numel() == 1 {
            Ok(Broadcast::ScalarLhs)
        } else if ta.rank() >= 2
            && tb.numel() == ta.cols()
            && (tb.rank() == 1 || (tb.rank() == 2 && tb.shape()[0] == 1))
        {
            Ok(Broadcast::Row)
        } else {
            Err(shape_err(op, ta.shape(), tb.shape()))
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
    ) -> Res<(Broadcast, Vec<usize>, Vec<f64>)> {
        let mode = self.broadcast_mode(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let (da, db) = (ta.data(), tb.data());
        let (shape, data) = match mode {
            Broadcast::Same => (
                ta.shape().to_vec(),
                da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect(),
            ),
            Broadcast::ScalarRhs => (
                ta.shape().to_vec(),
                da.iter().map(|&x| f(x, db[0])).collect(),
            ),
            Broadcast::ScalarLhs => (
                tb.shape().to_vec(),
                db.iter().map(|&y| f(da[0], y)).collect(),
            ),
            Broadcast::Row => {
                let n = db.len();
                (
                    ta.shape().to_vec(),
                    da.iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, db[i % n]))
                        .collect(),
                )
            }
        };
        Ok((mode, shape, data))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Res<NodeId> {
        let (mode, shape, data) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.record(Op::Add(mode), vec![a, b], shape, data, &[]))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Res<NodeId> {
        let (mode, shape, data) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.record(Op::Sub(mode), vec![a, b], shape, data, &[]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Res<NodeId> {
        let (mode, shape, data) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.record(
            Op::Mul(mode),
            vec![a, b],
            shape,
            data,
            &[(0, Saved::Input(1)), (1, Saved::Input(0))],
        ))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Res<NodeId> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| x * c).collect();
        let shape = t.shape().to_vec();
        Ok(self.record(Op::Scale(c), vec![a], shape, data, &[]))
    }

    fn unary(
        &mut self,
        op: Op,
        a: NodeId,
        f: impl Fn(f64) -> f64,
        save: Saved,
    ) -> Res<NodeId> {
        let t = self.value(a);
        let data = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        Ok(self.record(op, vec![a], shape, data, &[(0, save)]))
    }

    pub fn relu(&mut self, a: NodeId) -> Res<NodeId> {
        self.unary(Op::Relu, a, |x| x.max(0.0), Saved::Input(0))
    }

    /// Exact-erf GELU.
    pub fn gelu(&mut self, a: NodeId) -> Res<NodeId> {
        self.unary(Op::Gelu, a, kernels::gelu, Saved::Input(0))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> Res<NodeId> {
        self.unary(Op::Sigmoid, a, kernels::sigmoid, Saved::Output)
    }

    // ---- normalisation and reductions -----------------------------------

    pub fn softmax_rows(&mut self, x: NodeId) -> Res<NodeId> {
        let t = self.value(x);
        if t.numel() == 0 || t.cols() == 0 {
            return Err(TensorError::invalid("softmax_rows", "empty rows"));
        }
        if !t.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax_rows" });
        }
        let data = kernels::softmax_rows(t.data(), t.cols());
        let shape = t.shape().to_vec();
        Ok(self.record(
            Op::SoftmaxRows,
            vec![x],
            shape,
            data,
            &[(0, Saved::Output)],
        ))
    }

    /// Arithmetic mean over `axes`; reduced axes are removed (a full reduction
    /// yields shape `[1]`).
    pub fn reduce_mean(&mut self, x: NodeId, axes: &[usize]) -> Res<NodeId> {
        let shape = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
            return Err(TensorError::invalid(
                "reduce_mean",
                format!("invalid axes {axes:?} for shape {shape:?}"),
            ));
        }
        let extent: usize = sorted.iter().map(|&a| shape[a]).product();
        if extent == 0 || sorted.is_empty() {
            return Err(TensorError::invalid("reduce_mean", "empty reduction extent"));
        }
        let out_shape_full: Vec<usize> = shape
            .iter()
            .enumerate()
            .map(|(i, &d)| if sorted.contains(&i) { 1 } else { d })
            .collect();
        let out_numel: usize = out_shape_full.iter().product();
        let mut sums = vec![0.0; out_numel];
        let src = self.value(x).data();
        for (flat, &v) in src.iter().enumerate() {
            sums[reduced_index(flat, &shape, &out_shape_full)] += v;
        }
        let inv = 1.0 / extent as f64;
        for s in &mut sums {
            *s *= inv;
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !sorted.contains(i))
            .map(|(_, &d)| d)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        Ok(self.record(
            Op::Mean { axes: sorted },
            vec![x],
            out_shape,
            sums,
            &[],
        ))
    }

    /// Mean of every element, shape `[1]`.
    pub fn mean_all(&mut self, x: NodeId) -> Res<NodeId> {
        let axes: Vec<usize> = (0..self.shape(x).len()).collect();
        self.reduce_mean(x, &axes)
    }

    /// Per-row normalisation then affine.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Res<NodeId> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if n == 0 || tg.numel() != n || tb.numel() != n {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let mut data = vec![0.0; tx.numel()];
        for (src, dst) in tx.data().chunks(n).zip(data.chunks_mut(n)) {
            let (mean, rstd) = row_stats(src, eps);
            for j in 0..n {
                dst[j] = (src[j] - mean) * rstd * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        Ok(self.record(
            Op::LayerNorm { eps },
            vec![x, gamma, beta],
            shape,
            data,
            &[(0, Saved::Input(0)), (0, Saved::Input(1)), (1, Saved::Input(0))],
        ))
    }

    // ---- losses ----------------------------------------------------------

    /// Mean cross-entropy of `[m×C]` logits against class indices.
    pub fn cross_entropy_logits(&mut self, logits: NodeId, targets: &[usize]) -> Res<NodeId> {
        let t = self.value(logits);
        let c = t.cols();
        if t.rows() != targets.len() {
            return Err(shape_err("cross_entropy_logits", t.shape(), &[targets.len()]));
        }
        if let Some(&bad) = targets.iter().find(|&&y| y >= c) {
            return Err(TensorError::invalid(
                "cross_entropy_logits",
                format!("class index {bad} out of range for {c} classes"),
            ));
        }
        if !t.is_finite() {
            return Err(TensorError::NonFinite {
                op: "cross_entropy_logits",
            });
        }
        let mut total = 0.0;
        for (row, &y) in t.data().chunks(c).zip(targets) {
            total += log_sum_exp(row) - row[y];
        }
        let loss = total / targets.len() as f64;
        Ok(self.record(
            Op::CrossEntropy {
                targets: Arc::new(targets.to_vec()),
            },
            vec![logits],
            vec![1],
            vec![loss],
            &[(0, Saved::Input(0))],
        ))
    }

    /// Mean binary cross-entropy on logits; targets in [0, 1].
    pub fn bce_logits(&mut self, pred: NodeId, target: NodeId) -> Res<NodeId> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(shape_err("bce_logits", tp.shape(), tt.shape()));
        }
        if tt.data().iter().any(|&y| !(0.0..=1.0).contains(&y)) {
            return Err(TensorError::invalid("bce_logits", "targets must lie in [0, 1]"));
        }
        if !tp.is_finite() {
            return Err(TensorError::NonFinite { op: "bce_logits" });
        }
        let mut total = 0.0;
        for (&x, &y) in tp.data().iter().zip(tt.data()) {
            total += kernels::softplus(x) - y * x;
        }
        let loss = total / tp.numel() as f64;
        Ok(self.record(
            Op::BceLogits,
            vec![pred, target],
            vec![1],
            vec![loss],
            &[(0, Saved::Input(0)), (0, Saved::Input(1))],
        ))
    }

    // ---- structural ------------------------------------------------------

    /// `out[i] = x[index[i]]` with the given output shape.
    pub fn gather(&mut self, x: NodeId, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Res<NodeId> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(shape_err("gather", &shape, &[index.len()]));
        }
        if index.iter().any(|&i| i >= t.numel()) {
            return Err(TensorError::invalid("gather", "index out of bounds"));
        }
        let src = t.data();
        let data = index.iter().map(|&i| src[i]).collect();
        Ok(self.record(Op::Gather { index }, vec![x], shape, data, &[]))
    }

    /// Stacks 2-D inputs with equal column counts.
    pub fn concat_rows(&mut self, parts: &[NodeId]) -> Res<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_rows", "no inputs"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || t.cols() != cols {
                return Err(shape_err("concat_rows", self.shape(*first), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        Ok(self.record(Op::ConcatRows, parts.to_vec(), vec![rows, cols], data, &[]))
    }

    /// Joins 2-D inputs with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Res<NodeId> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::invalid("concat_cols", "no inputs"))?;
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || t.rows() != rows {
                return Err(shape_err("concat_cols", self.shape(*first), t.shape()));
            }
            widths.push(t.cols());
        }
        let total: usize = widths.iter().sum();
        let mut data = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for r in 0..rows {
                data[r * total + offset..r * total + offset + w]
                    .copy_from_slice(&src[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        Ok(self.record(Op::ConcatCols, parts.to_vec(), vec![rows, total], data, &[]))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Res<NodeId> {
        let t = self.value(x);
        let (rows, cols) = (t.rows(), t.cols());
        if t.rank() != 2 || start + len > cols || len == 0 {
            return Err(TensorError::invalid(
                "slice_cols",
                format!("columns {start}..{} of {:?}", start + len, t.shape()),
            ));
        }
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&t.data()[r * cols + start..r * cols + start + len]);
        }
        Ok(self.record(
            Op::SliceCols { start },
            vec![x],
            vec![rows, len],
            data,
            &[],
        ))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Res<NodeId> {
        let t = self.value(x);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(shape_err("reshape", t.shape(), shape));
        }
        let data = t.to_vec();
        Ok(self.record(Op::Reshape, vec![x], shape.to_vec(), data, &[]))
    }

    /// Identity that re-tags its input under the current scope. Used where frozen
    /// features cross into a trainable module; gradient still flows through it.
    pub fn tap(&mut self, x: NodeId) -> NodeId {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        let data = t.to_vec();
        self.record(Op::Tap, vec![x], shape, data, &[])
    }

    // ---- backward --------------------------------------------------------

    pub fn backward(&self, loss: NodeId) -> Res<Gradients> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(TensorError::NotScalar(lt.shape().to_vec()));
        }
        if !lt.requires_grad() {
            return Err(TensorError::Detached);
        }
        let mut pending: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        pending[loss.0] = Some(vec![1.0]);
        let mut out = HashMap::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.value.requires_grad() {
                continue;
            }
            self.propagate(node, &g, &mut pending);
            let t = Tensor::from_parts(node.value.shape().to_vec(), Arc::new(g), node.value.tag());
            out.insert(NodeId(i), t);
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, node: &Node, g: &[f64], pending: &mut [Option<Vec<f64>>]) {
        let needs = |k: usize| self.requires_grad(node.inputs[k]);
        let val = |k: usize| self.value(node.inputs[k]);
        let mut emit = |k: usize, delta: Vec<f64>| {
            let slot = &mut pending[node.inputs[k].0];
            match slot {
                Some(acc) => {
                    for (a, d) in acc.iter_mut().zip(&delta) {
                        *a += d;
                    }
                }
                None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul | Op::Linear { .. } => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                if needs(0) {
                    emit(0, kernels::matmul_nt(g, b.data(), m, n, k));
                }
                if needs(1) {
                    emit(1, kernels::matmul_tn(a.data(), g, m, k, n));
                }
                if matches!(node.op, Op::Linear { bias: true }) && needs(2) {
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (o, &v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    emit(2, gb);
                }
            }
            Op::MatMulNt => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[0];
                if needs(0) {
                    emit(0, kernels::matmul(g, b.data(), m, n, k));
                }
                if needs(1) {
                    emit(1, kernels::matmul_tn(g, a.data(), m, n, k));
                }
            }
            Op::Add(mode) | Op::Sub(mode) => {
                let sign = if matches!(node.op, Op::Sub(_)) { -1.0 } else { 1.0 };
                if needs(0) {
                    emit(0, reduce_to(g, *mode, true, val(0).numel()));
                }
                if needs(1) {
                    let mut d = reduce_to(g, *mode, false, val(1).numel());
                    if sign < 0.0 {
                        d.iter_mut().for_each(|v| *v = -*v);
                    }
                    emit(1, d);
                }
            }
            Op::Mul(mode) => {
                let (a, b) = (val(0).data(), val(1).data());
                let pick = |src: &[f64], i: usize, lhs: bool| -> f64 {
                    match (mode, lhs) {
                        (Broadcast::Same, _) => src[i],
                        (Broadcast::ScalarRhs, true) | (Broadcast::ScalarLhs, false) => src[i],
                        (Broadcast::ScalarRhs, false) | (Broadcast::ScalarLhs, true) => src[0],
                        (Broadcast::Row, true) => src[i],
                        (Broadcast::Row, false) => src[i % src.len()],
                    }
                };
                if needs(0) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, &gv)| gv * pick(b, i, false)).collect();
                    emit(0, reduce_to(&full, *mode, true, a.len()));
                }
                if needs(1) {
                    let full: Vec<f64> = g.iter().enumerate().map(|(i, &gv)| gv * pick(a, i, true)).collect();
                    emit(1, reduce_to(&full, *mode, false, b.len()));
                }
            }
            Op::Scale(c) => emit(0, g.iter().map(|v| v * c).collect()),
            Op::Relu => {
                let x = val(0).data();
                emit(0, g.iter().zip(x).map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 }).collect());
            }
            Op::Gelu => {
                let x = val(0).data();
                emit(0, g.iter().zip(x).map(|(&gv, &xv)| gv * kernels::gelu_grad(xv)).collect());
            }
            Op::Sigmoid => {
                let y = node.value.data();
                emit(0, g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (1.0 - yv)).collect());
            }
            Op::SoftmaxRows => {
                let y = node.value.data();
                let c = node.value.cols();
                let mut d = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(d.chunks_mut(c)) {
                    let s = kernels::dot(yr, gr);
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - s);
                    }
                }
                emit(0, d);
            }
            Op::Mean { axes } => {
                let in_shape = val(0).shape();
                let extent: usize = axes.iter().map(|&a| in_shape[a]).product();
                let full: Vec<usize> = in_shape
                    .iter()
                    .enumerate()
                    .map(|(i, &d)| if axes.contains(&i) { 1 } else { d })
                    .collect();
                let inv = 1.0 / extent as f64;
                let d = (0..val(0).numel())
                    .map(|flat| g[reduced_index(flat, in_shape, &full)] * inv)
                    .collect();
                emit(0, d);
            }
            Op::LayerNorm { eps } => {
                let (x, gamma) = (val(0), val(1));
                let n = x.cols();
                let mut dx = vec![0.0; x.numel()];
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for ((xr, gr), dxr) in x.data().chunks(n).zip(g.chunks(n)).zip(dx.chunks_mut(n)) {
                    let (mean, rstd) = row_stats(xr, *eps);
                    let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) * rstd).collect();
                    let dxhat: Vec<f64> = gr.iter().zip(gamma.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dx = kernels::dot(&dxhat, &xhat) / n as f64;
                    for j in 0..n {
                        dxr[j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                        dgamma[j] += gr[j] * xhat[j];
                        dbeta[j] += gr[j];
                    }
                }
                if needs(0) {
                    emit(0, dx);
                }
                if needs(1) {
                    emit(1, dgamma);
                }
                if needs(2) {
                    emit(2, dbeta);
                }
            }
            Op::CrossEntropy { targets } => {
                let x = val(0);
                let c = x.cols();
                let scale = g[0] / targets.len() as f64;
                let mut d = kernels::softmax_rows(x.data(), c);
                for (row, &y) in d.chunks_mut(c).zip(targets.iter()) {
                    row[y] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                emit(0, d);
            }
            Op::BceLogits => {
                let (x, y) = (val(0).data(), val(1).data());
                let scale = g[0] / x.len() as f64;
                if needs(0) {
                    emit(0, x.iter().zip(y).map(|(&xv, &yv)| scale * (kernels::sigmoid(xv) - yv)).collect());
                }
                if needs(1) {
                    emit(1, x.iter().map(|&xv| -scale * xv).collect());
                }
            }
            Op::Gather { index } => {
                let mut d = vec![0.0; val(0).numel()];
                for (&src, &gv) in index.iter().zip(g) {
                    d[src] += gv;
                }
                emit(0, d);
            }
            Op::ConcatRows => {
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let len = val(k).numel();
                    if needs(k) {
                        emit(k, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols => {
                let rows = node.value.rows();
                let total = node.value.cols();
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let w = val(k).cols();
                    if needs(k) {
                        let mut d = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            d.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                        }
                        emit(k, d);
                    }
                    offset += w;
                }
            }
            Op::SliceCols { start } => {
                let x = val(0);
                let (rows, cols) = (x.rows(), x.cols());
                let len = node.value.cols();
                let mut d = vec![0.0; rows * cols];
                for r in 0..rows {
                    d[r * cols + start..r * cols + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                emit(0, d);
            }
            Op::Reshape | Op::Tap => emit(0, g.to_vec()),
        }
    }
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|&v| libm::exp(v - max)).sum();
    max + libm::log(s)
}

/// Maps a flat index of `shape` onto the flat index of `reduced` (same rank,
/// reduced axes have extent 1).
fn reduced_index(mut flat: usize, shape: &[usize], reduced: &[usize]) -> usize {
    let mut out = 0;
    let mut stride = 1;
    for (&d, &r) in shape.iter().zip(reduced).rev() {
        let ix = flat % d;
        flat /= d;
        if r != 1 {
            out += ix * stride;
        }
        stride *= r;
    }
    out
}

/// Sums a full-shape gradient back onto an operand of `numel` elements.
fn reduce_to(g: &[f64], mode: Broadcast, lhs: bool, numel: usize) -> Vec<f64> {
    match (mode, lhs) {
        (Broadcast::Same, _) | (Broadcast::ScalarRhs, true) | (Broadcast::ScalarLhs, false) | (Broadcast::Row, true) => {
            g.to_vec()
        }
        (Broadcast::ScalarRhs, false) | (Broadcast::ScalarLhs, true) => vec![g.iter().sum()],
        (Broadcast::Row, false) => {
            let mut out = vec![0.0; numel];
            for row in g.chunks(numel) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            out
        }
    }
}
