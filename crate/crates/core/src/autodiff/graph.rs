//! Eager compute graph with reverse-mode differentiation.
//!
//! Nodes live in an arena and are addressed by [`NodeId`]. Every builder
//! method evaluates its output immediately, so intermediate values can be
//! inspected while the graph is still being constructed (the evidence loss
//! relies on this to pick argmax sentences between steps). `backward` replays
//! the tape in reverse creation order, which is always a valid topological
//! order, and caches one adjoint per node.

use crate::autodiff::array::{masked_softmax, DenseArray, LOG_FLOOR};
use crate::error::{Result, StmError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add,
    Mul,
    MatMul,
    Relu,
    Log,
    Exp,
    MaskedSoftmax,
    GatherRows { ids: Vec<usize> },
    Sum,
    Mean,
    Concat,
    StackRows,
    Transpose,
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: DenseArray,
    adjoint: Option<Vec<f64>>,
    param_slot: Option<usize>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &DenseArray {
        &self.nodes[id.0].value
    }

    /// Adjoint of `id` from the most recent `backward` call, if it was
    /// reached from the root.
    pub fn adjoint(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].adjoint.as_deref()
    }

    /// Switch pattern of every piecewise op in the tape, in creation order:
    /// one flag per relu input element (positive side) and per log input
    /// element (above the clamp floor). A finite-difference probe whose
    /// perturbed evaluations disagree with the unperturbed pattern has
    /// stepped across a kink, where a central difference measures the
    /// average of two one-sided slopes rather than the gradient.
    pub fn gate_signature(&self) -> Vec<bool> {
        let mut gates = Vec::new();
        for node in &self.nodes {
            match node.op {
                Op::Relu => {
                    gates.extend(self.value(node.inputs[0]).values().iter().map(|&x| x > 0.0));
                }
                Op::Log => {
                    gates.extend(
                        self.value(node.inputs[0]).values().iter().map(|&x| x >= LOG_FLOOR),
                    );
                }
                _ => {}
            }
        }
        gates
    }

    fn push(&mut self, op: Op, inputs: Vec<NodeId>, value: DenseArray) -> NodeId {
        self.nodes.push(Node { op, inputs, value, adjoint: None, param_slot: None });
        NodeId(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: DenseArray) -> NodeId {
        self.push(Op::Leaf, vec![], value)
    }

    /// A leaf carrying parameter slot `slot`; `param_grads` later reports its
    /// gradient under that slot.
    pub fn param(&mut self, slot: usize, value: DenseArray) -> NodeId {
        let id = self.push(Op::Leaf, vec![], value);
        self.nodes[id.0].param_slot = Some(slot);
        id
    }

    // ── elementwise ─────────────────────────────────────────────────────

    /// Elementwise sum; either side may be a scalar, which broadcasts.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), "add", |x, y| x + y)?;
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    /// Elementwise product; either side may be a scalar, which broadcasts.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = broadcast_zip(self.value(a), self.value(b), "mul", |x, y| x * y)?;
        Ok(self.push(Op::Mul, vec![a, b], value))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        let k = self.constant(DenseArray::scalar(c));
        self.mul(a, k)
    }

    pub fn relu(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let value = DenseArray::new(
            v.shape().to_vec(),
            v.values().iter().map(|&x| x.max(0.0)).collect(),
        )?;
        Ok(self.push(Op::Relu, vec![a], value))
    }

    /// Elementwise natural log; inputs below [`LOG_FLOOR`] are clamped to it
    /// and receive zero gradient.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let value = DenseArray::new(
            v.shape().to_vec(),
            v.values().iter().map(|&x| x.max(LOG_FLOOR).ln()).collect(),
        )?;
        Ok(self.push(Op::Log, vec![a], value))
    }

    pub fn exp(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        let value = DenseArray::new(
            v.shape().to_vec(),
            v.values().iter().map(|&x| x.exp()).collect(),
        )?;
        Ok(self.push(Op::Exp, vec![a], value))
    }

    // ── linear algebra ──────────────────────────────────────────────────

    /// Matrix product. Rank-1 operands are promoted to a row vector on the
    /// left and a column vector on the right, and the promoted axes are
    /// squeezed from the result, so `[k]x[k]` is a dot product yielding a
    /// scalar.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = matmul_value(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul, vec![a, b], value))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.shape().len() != 2 {
            return Err(StmError::Usage(format!(
                "transpose expects rank 2, got shape {:?}",
                v.shape()
            )));
        }
        let (r, c) = (v.shape()[0], v.shape()[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = v.values()[i * c + j];
            }
        }
        let value = DenseArray::new(vec![c, r], out)?;
        Ok(self.push(Op::Transpose, vec![a], value))
    }

    // ── attention and gathering ─────────────────────────────────────────

    /// Softmax over the last axis with an additive `{0, MASK_NEG}` mask that
    /// is treated as a constant: masked entries are exactly 0 in the output
    /// and no gradient flows through the mask.
    pub fn masked_softmax(&mut self, scores: NodeId, mask: DenseArray) -> Result<NodeId> {
        let value = masked_softmax(self.value(scores), &mask)?;
        Ok(self.push(Op::MaskedSoftmax, vec![scores], value))
    }

    /// Softmax over the last axis with no masking.
    pub fn softmax(&mut self, scores: NodeId) -> Result<NodeId> {
        let mask = DenseArray::zeros(self.value(scores).shape().to_vec());
        self.masked_softmax(scores, mask)
    }

    /// Gathers rows `ids` of a `[v, d]` table into an `[ids.len(), d]` array.
    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            return Err(StmError::Usage(format!(
                "gather_rows expects a rank-2 table, got shape {:?}",
                t.shape()
            )));
        }
        if ids.is_empty() {
            return Err(StmError::Usage("gather_rows with no row ids".into()));
        }
        let (v, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(StmError::Usage(format!(
                    "gather_rows id {id} out of range for table with {v} rows"
                )));
            }
            out.extend_from_slice(&t.values()[id * d..(id + 1) * d]);
        }
        let value = DenseArray::new(vec![ids.len(), d], out)?;
        Ok(self.push(Op::GatherRows { ids: ids.to_vec() }, vec![table], value))
    }

    // ── reductions and joins ────────────────────────────────────────────

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId> {
        let total: f64 = self.value(a).values().iter().sum();
        Ok(self.push(Op::Sum, vec![a], DenseArray::scalar(total)))
    }

    pub fn mean(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.is_empty() {
            return Err(StmError::Usage("mean of an empty array".into()));
        }
        let m = v.values().iter().sum::<f64>() / v.len() as f64;
        Ok(self.push(Op::Mean, vec![a], DenseArray::scalar(m)))
    }

    /// Joins rank-0/rank-1 parts into one rank-1 array.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(StmError::Usage("concat of no parts".into()));
        }
        let mut out = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() > 1 {
                return Err(StmError::Usage(format!(
                    "concat expects rank <= 1 parts, got shape {:?}",
                    v.shape()
                )));
            }
            out.extend_from_slice(v.values());
        }
        Ok(self.push(Op::Concat, parts.to_vec(), DenseArray::vector(out)))
    }

    /// Stacks equal-length rank-1 parts as the rows of a `[k, d]` array.
    pub fn stack_rows(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(StmError::Usage("stack_rows of no parts".into()));
        }
        let d = self.value(parts[0]).len();
        let mut out = Vec::with_capacity(parts.len() * d);
        for &p in parts {
            let v = self.value(p);
            if v.shape().len() != 1 || v.len() != d {
                return Err(StmError::Usage(format!(
                    "stack_rows expects rank-1 parts of length {d}, got shape {:?}",
                    v.shape()
                )));
            }
            out.extend_from_slice(v.values());
        }
        let value = DenseArray::new(vec![parts.len(), d], out)?;
        Ok(self.push(Op::StackRows, parts.to_vec(), value))
    }

    /// Dot product of two rank-1 arrays.
    pub fn dot(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let prod = self.mul(a, b)?;
        self.sum(prod)
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Reverse-mode sweep from a scalar root. Overwrites the adjoints from
    /// any previous sweep on this graph.
    pub fn backward(&mut self, root: NodeId) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(StmError::Usage(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }
        for (node, a) in self.nodes.iter_mut().zip(adj) {
            node.adjoint = a;
        }
        Ok(())
    }

    /// Gradients for parameter slots `0..n_slots` after `backward`; slots
    /// absent from the graph get zeros of the given shapes.
    pub fn param_grads(&self, shapes: &[Vec<usize>]) -> Vec<DenseArray> {
        let mut grads: Vec<DenseArray> =
            shapes.iter().map(|s| DenseArray::zeros(s.clone())).collect();
        for node in &self.nodes {
            let (Some(slot), Some(adj)) = (node.param_slot, node.adjoint.as_ref()) else {
                continue;
            };
            let g = grads[slot].values_mut();
            for (gi, ai) in g.iter_mut().zip(adj) {
                *gi += ai;
            }
        }
        grads
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let inputs = &node.inputs;
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                self.acc_broadcast(adj, a, g, None);
                self.acc_broadcast(adj, b, g, None);
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (av, bv) = (self.value(a), self.value(b));
                self.acc_broadcast(adj, a, g, Some(bv));
                self.acc_broadcast(adj, b, g, Some(av));
            }
            Op::MatMul => self.propagate_matmul(inputs[0], inputs[1], g, adj),
            Op::Relu => {
                let x = self.value(inputs[0]);
                acc(adj, inputs[0].0, x.len(), |dst| {
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x.values()) {
                        if xi > 0.0 {
                            *d += gi;
                        }
                    }
                });
            }
            Op::Log => {
                let x = self.value(inputs[0]);
                acc(adj, inputs[0].0, x.len(), |dst| {
                    for ((d, &gi), &xi) in dst.iter_mut().zip(g).zip(x.values()) {
                        if xi >= LOG_FLOOR {
                            *d += gi / xi;
                        }
                    }
                });
            }
            Op::Exp => {
                let y = &node.value;
                acc(adj, inputs[0].0, y.len(), |dst| {
                    for ((d, &gi), &yi) in dst.iter_mut().zip(g).zip(y.values()) {
                        *d += gi * yi;
                    }
                });
            }
            Op::MaskedSoftmax => {
                let y = &node.value;
                let (rows, cols) = y.rows_cols();
                acc(adj, inputs[0].0, y.len(), |dst| {
                    for r in 0..rows {
                        let o = r * cols;
                        let yr = &y.values()[o..o + cols];
                        let gr = &g[o..o + cols];
                        let s: f64 = yr.iter().zip(gr).map(|(&yi, &gi)| yi * gi).sum();
                        for j in 0..cols {
                            dst[o + j] += yr[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::GatherRows { ids } => {
                let t = self.value(inputs[0]);
                let d = t.shape()[1];
                acc(adj, inputs[0].0, t.len(), |dst| {
                    for (row, &id) in ids.iter().enumerate() {
                        let src = &g[row * d..(row + 1) * d];
                        let dstrow = &mut dst[id * d..(id + 1) * d];
                        for (d0, &s0) in dstrow.iter_mut().zip(src) {
                            *d0 += s0;
                        }
                    }
                });
            }
            Op::Sum => {
                let x = self.value(inputs[0]);
                acc(adj, inputs[0].0, x.len(), |dst| {
                    for d in dst.iter_mut() {
                        *d += g[0];
                    }
                });
            }
            Op::Mean => {
                let x = self.value(inputs[0]);
                let scale = g[0] / x.len() as f64;
                acc(adj, inputs[0].0, x.len(), |dst| {
                    for d in dst.iter_mut() {
                        *d += scale;
                    }
                });
            }
            Op::Concat => {
                let mut off = 0;
                for &p in inputs {
                    let len = self.value(p).len();
                    acc(adj, p.0, len, |dst| {
                        for (d, &s) in dst.iter_mut().zip(&g[off..off + len]) {
                            *d += s;
                        }
                    });
                    off += len;
                }
            }
            Op::StackRows => {
                let d = self.value(inputs[0]).len();
                for (row, &p) in inputs.iter().enumerate() {
                    acc(adj, p.0, d, |dst| {
                        for (d0, &s0) in dst.iter_mut().zip(&g[row * d..(row + 1) * d]) {
                            *d0 += s0;
                        }
                    });
                }
            }
            Op::Transpose => {
                let y = &node.value;
                let (r, c) = (y.shape()[0], y.shape()[1]);
                acc(adj, inputs[0].0, r * c, |dst| {
                    for i in 0..r {
                        for j in 0..c {
                            dst[j * r + i] += g[i * c + j];
                        }
                    }
                });
            }
        }
    }

    /// Accumulates the upstream adjoint into `input` for Add/Mul, where
    /// `other` is the co-operand's value for Mul and absent for Add. A
    /// broadcast scalar input receives the sum over all positions.
    fn acc_broadcast(
        &self,
        adj: &mut [Option<Vec<f64>>],
        input: NodeId,
        g: &[f64],
        other: Option<&DenseArray>,
    ) {
        let factor = |i: usize| match other {
            Some(o) if o.len() == 1 => o.values()[0],
            Some(o) => o.values()[i],
            None => 1.0,
        };
        let len = self.value(input).len();
        if len == 1 && g.len() > 1 {
            let total: f64 = g.iter().enumerate().map(|(i, &gi)| gi * factor(i)).sum();
            acc(adj, input.0, 1, |dst| dst[0] += total);
        } else {
            acc(adj, input.0, len, |dst| {
                for (i, (d, &gi)) in dst.iter_mut().zip(g).enumerate() {
                    *d += gi * factor(i);
                }
            });
        }
    }

    fn propagate_matmul(&self, a: NodeId, b: NodeId, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = promoted_dims(av, true);
        let (_, n) = promoted_dims(bv, false);
        // grad_a = g (m x n) * b^T (n x k); grad_b = a^T (k x m) * g (m x n)
        acc(adj, a.0, m * k, |dst| {
            for i in 0..m {
                for j in 0..n {
                    let gij = g[i * n + j];
                    for p in 0..k {
                        dst[i * k + p] += gij * bv.values()[p * n + j];
                    }
                }
            }
        });
        acc(adj, b.0, k * n, |dst| {
            for i in 0..m {
                for p in 0..k {
                    let aip = av.values()[i * k + p];
                    for j in 0..n {
                        dst[p * n + j] += aip * g[i * n + j];
                    }
                }
            }
        });
    }
}

fn acc(adj: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = adj[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

/// Rows/cols after promoting rank-1 to a row vector (left operand) or a
/// column vector (right operand).
fn promoted_dims(v: &DenseArray, left: bool) -> (usize, usize) {
    match v.shape() {
        [r, c] => (*r, *c),
        [n] if left => (1, *n),
        [n] => (*n, 1),
        _ => (1, 1),
    }
}

fn broadcast_zip(
    a: &DenseArray,
    b: &DenseArray,
    op: &str,
    f: impl Fn(f64, f64) -> f64,
) -> Result<DenseArray> {
    if a.shape() == b.shape() {
        let out = a.values().iter().zip(b.values()).map(|(&x, &y)| f(x, y)).collect();
        return DenseArray::new(a.shape().to_vec(), out);
    }
    let (a_scalar, b_scalar) = (a.len() == 1, b.len() == 1);
    if !a_scalar && !b_scalar {
        return Err(StmError::Usage(format!(
            "{op} shape mismatch: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    // The scalar side broadcasts across the other; when both hold a single
    // value the higher-rank shape wins.
    let keep_a = !a_scalar || (b_scalar && a.shape().len() >= b.shape().len());
    if keep_a {
        let y = b.values()[0];
        let out = a.values().iter().map(|&x| f(x, y)).collect();
        DenseArray::new(a.shape().to_vec(), out)
    } else {
        let x = a.values()[0];
        let out = b.values().iter().map(|&y| f(x, y)).collect();
        DenseArray::new(b.shape().to_vec(), out)
    }
}

fn matmul_value(a: &DenseArray, b: &DenseArray) -> Result<DenseArray> {
    if a.shape().is_empty() || b.shape().is_empty() {
        return Err(StmError::Usage(format!(
            "matmul operands must have rank >= 1, got {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let (m, ka) = promoted_dims(a, true);
    let (kb, n) = promoted_dims(b, false);
    if ka != kb {
        return Err(StmError::Usage(format!(
            "matmul inner dimension mismatch: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..ka {
            let aip = a.values()[i * ka + p];
            let brow = &b.values()[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bpj) in orow.iter_mut().zip(brow) {
                *o += aip * bpj;
            }
        }
    }
    let mut shape = Vec::new();
    if a.shape().len() == 2 {
        shape.push(m);
    }
    if b.shape().len() == 2 {
        shape.push(n);
    }
    DenseArray::new(shape, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::array::MASK_NEG;

    fn vec1(g: &mut Graph, v: &[f64]) -> NodeId {
        g.constant(DenseArray::vector(v.to_vec()))
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![1.0, 2.0]));
        let sq = g.mul(x, x).unwrap();
        let root = g.sum(sq).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_root_has_zero_input_grads() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![1.0, 2.0]));
        let root = g.constant(DenseArray::scalar(3.0));
        g.backward(root).unwrap();
        let grads = g.param_grads(&[vec![2]]);
        assert_eq!(grads[0].values(), &[0.0, 0.0]);
        let _ = x;
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = vec1(&mut g, &[1.0, 2.0]);
        assert!(matches!(g.backward(x), Err(StmError::Usage(_))));
    }

    #[test]
    fn matmul_matrix_vector() {
        let mut g = Graph::new();
        let w = g.constant(DenseArray::matrix(2, 2, vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let x = vec1(&mut g, &[3.0, 4.0]);
        let y = g.matmul(w, x).unwrap();
        assert_eq!(g.value(y).shape(), &[2]);
        assert_eq!(g.value(y).values(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_vector_vector_is_dot() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0, 3.0]);
        let b = vec1(&mut g, &[4.0, 5.0, 6.0]);
        let y = g.matmul(a, b).unwrap();
        assert!(g.value(y).is_scalar());
        assert_eq!(g.value(y).item().unwrap(), 32.0);
    }

    #[test]
    fn matmul_inner_mismatch_is_usage_error() {
        let mut g = Graph::new();
        let a = vec1(&mut g, &[1.0, 2.0]);
        let b = vec1(&mut g, &[1.0, 2.0, 3.0]);
        assert!(matches!(g.matmul(a, b), Err(StmError::Usage(_))));
    }

    #[test]
    fn matmul_gradients_match_hand_computation() {
        // y = a . (W x), dW = a g x^T via chain; checked against hand values
        let mut g = Graph::new();
        let w = g.param(0, DenseArray::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let x = g.param(1, DenseArray::vector(vec![5.0, 6.0]));
        let wx = g.matmul(w, x).unwrap();
        let root = g.sum(wx).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(w).unwrap(), &[5.0, 6.0, 5.0, 6.0]);
        assert_eq!(g.adjoint(x).unwrap(), &[4.0, 6.0]);
    }

    #[test]
    fn scalar_broadcast_add_and_mul() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![1.0, 2.0, 3.0]));
        let b = g.param(1, DenseArray::scalar(10.0));
        let shifted = g.add(x, b).unwrap();
        assert_eq!(g.value(shifted).values(), &[11.0, 12.0, 13.0]);
        let scaled = g.mul(shifted, b).unwrap();
        let root = g.sum(scaled).unwrap();
        g.backward(root).unwrap();
        // d/db [sum((x_i + b) * b)] = sum(x_i) + 2 * 3 * b
        assert_eq!(g.adjoint(b).unwrap(), &[66.0]);
        assert_eq!(g.adjoint(x).unwrap(), &[10.0, 10.0, 10.0]);
    }

    #[test]
    fn relu_blocks_gradient_below_zero() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![-1.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).values(), &[0.0, 2.0]);
        let root = g.sum(y).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn log_exp_roundtrip_and_grads() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![0.5, 2.0]));
        let e = g.exp(x).unwrap();
        let l = g.log(e).unwrap();
        let root = g.sum(l).unwrap();
        assert!((g.value(l).values()[0] - 0.5).abs() < 1e-12);
        g.backward(root).unwrap();
        assert!((g.adjoint(x).unwrap()[0] - 1.0).abs() < 1e-12);
        assert!((g.adjoint(x).unwrap()[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn log_clamps_below_floor_with_zero_grad() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![0.0]));
        let l = g.log(x).unwrap();
        assert!((g.value(l).values()[0] - LOG_FLOOR.ln()).abs() < 1e-9);
        let root = g.sum(l).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[0.0]);
    }

    #[test]
    fn masked_softmax_grad_ignores_masked_entry() {
        let mut g = Graph::new();
        let s = g.param(0, DenseArray::vector(vec![1.0, 2.0, 3.0]));
        let mask = DenseArray::vector(vec![0.0, MASK_NEG, 0.0]);
        let y = g.masked_softmax(s, mask).unwrap();
        let picked = vec1(&mut g, &[1.0, 0.0, 0.0]);
        let prod = g.mul(y, picked).unwrap();
        let root = g.sum(prod).unwrap();
        g.backward(root).unwrap();
        let grad = g.adjoint(s).unwrap();
        let y0 = g.value(y).values()[0];
        assert!((grad[0] - y0 * (1.0 - y0)).abs() < 1e-12);
        assert_eq!(grad[1], 0.0);
        assert!((grad[2] + y0 * g.value(y).values()[2]).abs() < 1e-12);
    }

    #[test]
    fn gather_rows_scatters_gradient() {
        let mut g = Graph::new();
        let table = g.param(0, DenseArray::matrix(3, 2, vec![0.0; 6]).unwrap());
        let rows = g.gather_rows(table, &[2, 0, 2]).unwrap();
        assert_eq!(g.value(rows).shape(), &[3, 2]);
        let root = g.sum(rows).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(table).unwrap(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn gather_rows_out_of_range_is_usage_error() {
        let mut g = Graph::new();
        let table = g.constant(DenseArray::matrix(3, 2, vec![0.0; 6]).unwrap());
        assert!(matches!(g.gather_rows(table, &[3]), Err(StmError::Usage(_))));
    }

    #[test]
    fn concat_and_stack_roundtrip_gradients() {
        let mut g = Graph::new();
        let a = g.param(0, DenseArray::vector(vec![1.0, 2.0]));
        let b = g.param(1, DenseArray::vector(vec![3.0, 4.0]));
        let joined = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(joined).values(), &[1.0, 2.0, 3.0, 4.0]);
        let stacked = g.stack_rows(&[a, b]).unwrap();
        assert_eq!(g.value(stacked).shape(), &[2, 2]);
        let weights = vec1(&mut g, &[1.0, 10.0]);
        let pooled = g.matmul(weights, stacked).unwrap();
        let root = g.sum(pooled).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(a).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.adjoint(b).unwrap(), &[10.0, 10.0]);
    }

    #[test]
    fn transpose_forward_and_grad() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let t = g.transpose(x).unwrap();
        assert_eq!(g.value(t).shape(), &[3, 2]);
        assert_eq!(g.value(t).values(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        let picker = g.constant(DenseArray::matrix(3, 2, vec![1.0, 0.0, 0.0, 0.0, 0.0, 7.0]).unwrap());
        let prod = g.mul(t, picker).unwrap();
        let root = g.sum(prod).unwrap();
        g.backward(root).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[1.0, 0.0, 0.0, 0.0, 0.0, 7.0]);
    }

    #[test]
    fn mean_gradient_divides_by_len() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::vector(vec![1.0, 3.0, 5.0, 7.0]));
        let m = g.mean(x).unwrap();
        assert_eq!(g.value(m).item().unwrap(), 4.0);
        g.backward(m).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn shared_node_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.param(0, DenseArray::scalar(3.0));
        let sq = g.mul(x, x).unwrap();
        let tot = g.add(sq, x).unwrap();
        g.backward(tot).unwrap();
        assert_eq!(g.adjoint(x).unwrap(), &[7.0]);
    }

    #[test]
    fn identical_builds_are_bit_identical() {
        let build = || {
            let mut g = Graph::new();
            let x = g.param(0, DenseArray::vector(vec![0.3, -1.7, 2.9]));
            let e = g.exp(x).unwrap();
            let sm = g.softmax(e).unwrap();
            let l = g.log(sm).unwrap();
            let root = g.mean(l).unwrap();
            g.backward(root).unwrap();
            (g.value(root).item().unwrap(), g.adjoint(x).unwrap().to_vec())
        };
        let (v1, g1) = build();
        let (v2, g2) = build();
        assert_eq!(v1.to_bits(), v2.to_bits());
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
