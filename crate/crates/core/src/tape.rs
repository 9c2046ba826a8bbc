//! Recorded computation graphs with reverse-mode differentiation and a
//! forward tangent (directional-derivative) pass.
//!
//! A [`ComputationRecord`] is built once per forward computation: nodes are
//! appended in topological order, `evaluate` caches every intermediate, and
//! `backward` replays the node list in reverse. The tangent pass propagates a
//! parameter-space direction through the cached forward values; it is what a
//! dense curvature assembly uses for exact Jacobian-vector products.

use crate::error::{CoreError, Result};
use crate::params::{ParamLayout, ParameterVector};
use crate::tensor::{self, Tensor};

pub type NodeId = usize;

/// Operation performed by one node. Inputs are earlier node ids.
#[derive(Debug, Clone)]
pub enum Op {
    /// Placeholder bound to `inputs[slot]` at evaluation time.
    Input { slot: usize },
    /// Parameter segment from the bound [`ParameterVector`].
    Param { segment: usize },
    /// Row gather: out[r] = table[indices[r]].
    Gather { table: NodeId, indices: Vec<usize> },
    /// y = x·Wᵀ + b with x [t,din], w [dout,din], b [dout].
    /// `tag` identifies the model layer for curvature statistics.
    Linear {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
        tag: Option<u32>,
    },
    Relu { input: NodeId },
    /// Elementwise sum of two same-shape nodes.
    Add { lhs: NodeId, rhs: NodeId },
    /// Single-head causal attention over q, k, v of shape [t,d].
    CausalAttention {
        query: NodeId,
        key: NodeId,
        value: NodeId,
        scale: f64,
    },
    /// Row-wise softmax.
    Softmax { input: NodeId },
    /// Mean of the selected rows; output shape [1, d].
    MeanRows { input: NodeId, rows: Vec<usize> },
    /// Scalar ⟨flattened input, weights⟩ against fixed weights.
    DotConst { input: NodeId, weights: Vec<f64> },
    /// Mean cross-entropy over the rows with Some(target); output scalar.
    MaskedCrossEntropy {
        logits: NodeId,
        targets: Vec<Option<usize>>,
    },
}

impl Op {
    fn input_ids(&self) -> Vec<NodeId> {
        match self {
            Op::Input { .. } | Op::Param { .. } => vec![],
            Op::Gather { table, .. } => vec![*table],
            Op::Linear {
                input, weight, bias, ..
            } => vec![*input, *weight, *bias],
            Op::Relu { input } => vec![*input],
            Op::Add { lhs, rhs } => vec![*lhs, *rhs],
            Op::CausalAttention {
                query, key, value, ..
            } => vec![*query, *key, *value],
            Op::Softmax { input } => vec![*input],
            Op::MeanRows { input, .. } => vec![*input],
            Op::DotConst { input, .. } => vec![*input],
            Op::MaskedCrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug, Clone)]
enum Aux {
    None,
    /// Post-softmax attention weights [t,t].
    Attention(Vec<f64>),
    /// Softmax probabilities at target rows (zero elsewhere) [t,v].
    CrossEntropy(Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    aux: Aux,
}

/// Gradients per node, produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn node(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node.get(id).and_then(|g| g.as_ref())
    }

    /// Collect Param-node gradients into a parameter vector (zeros for
    /// segments the record never touched).
    pub fn to_param_vector(&self, record: &ComputationRecord, layout: &ParamLayout) -> ParameterVector {
        let mut out = ParameterVector::zeros(layout.clone());
        for (id, node) in record.nodes.iter().enumerate() {
            if let Op::Param { segment } = node.op {
                if let Some(g) = self.node(id) {
                    let dst = out.segment_mut(segment);
                    for (d, s) in dst.data_mut().iter_mut().zip(g.data()) {
                        *d += s;
                    }
                }
            }
        }
        out
    }
}

/// A recorded forward computation: node list in topological order with
/// cached forward values.
#[derive(Debug, Clone, Default)]
pub struct ComputationRecord {
    nodes: Vec<Node>,
    evaluated: bool,
}

impl ComputationRecord {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Append a node; its inputs must already exist (keeps the list acyclic
    /// and topologically ordered by construction).
    pub fn push(&mut self, op: Op) -> NodeId {
        for dep in op.input_ids() {
            assert!(dep < self.nodes.len(), "node input {dep} not yet defined");
        }
        self.nodes.push(Node {
            op,
            value: None,
            aux: Aux::None,
        });
        self.evaluated = false;
        self.nodes.len() - 1
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    /// Cached forward value; panics if `evaluate` has not run.
    pub fn value(&self, id: NodeId) -> &Tensor {
        self.nodes[id]
            .value
            .as_ref()
            .expect("node value requested before evaluate")
    }

    /// Ids of Linear nodes carrying the given tag.
    pub fn linear_nodes_tagged(&self) -> Vec<(u32, NodeId)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(id, n)| match n.op {
                Op::Linear { tag: Some(t), .. } => Some((t, id)),
                _ => None,
            })
            .collect()
    }

    /// Input activations of a Linear node (the x in y = x·Wᵀ + b).
    pub fn linear_input(&self, id: NodeId) -> &Tensor {
        match self.nodes[id].op {
            Op::Linear { input, .. } => self.value(input),
            _ => panic!("node {id} is not a Linear op"),
        }
    }

    /// Run the forward pass, caching all intermediates.
    pub fn evaluate(&mut self, params: &ParameterVector, inputs: &[Tensor]) -> Result<()> {
        for id in 0..self.nodes.len() {
            let value = self.compute_node(id, params, inputs)?;
            if !value.is_finite() {
                return Err(CoreError::NonFinite { node: id });
            }
            self.nodes[id].value = Some(value);
        }
        self.evaluated = true;
        Ok(())
    }

    fn compute_node(&mut self, id: NodeId, params: &ParameterVector, inputs: &[Tensor]) -> Result<Tensor> {
        let op = self.nodes[id].op.clone();
        let value = match &op {
            Op::Input { slot } => inputs
                .get(*slot)
                .cloned()
                .ok_or(CoreError::UnboundInput { slot: *slot })?,
            Op::Param { segment } => params.segment(*segment).clone(),
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let d = t.cols();
                let rows = t.rows();
                let mut out = Vec::with_capacity(indices.len() * d);
                for &ix in indices {
                    if ix >= rows {
                        return Err(CoreError::ShapeMismatch {
                            context: format!("gather index {ix} at node {id}"),
                            expected: vec![rows],
                            got: vec![ix],
                        });
                    }
                    out.extend_from_slice(t.row(ix));
                }
                Tensor::new(vec![indices.len(), d], out)?
            }
            Op::Linear {
                input, weight, bias, ..
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let b = self.value(*bias);
                let (t, din) = (x.rows(), x.cols());
                let (dout, wdin) = (w.rows(), w.cols());
                if din != wdin || b.numel() != dout {
                    return Err(CoreError::ShapeMismatch {
                        context: format!("linear node {id}"),
                        expected: vec![dout, din],
                        got: vec![w.rows(), w.cols(), b.numel()],
                    });
                }
                let y = tensor::linear_forward(x.data(), w.data(), b.data(), t, din, dout);
                Tensor::new(vec![t, dout], y)?
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                Tensor::new(x.shape().to_vec(), tensor::relu(x.data()))?
            }
            Op::Add { lhs, rhs } => {
                let a = self.value(*lhs);
                let b = self.value(*rhs);
                if a.shape() != b.shape() {
                    return Err(CoreError::ShapeMismatch {
                        context: format!("add node {id}"),
                        expected: a.shape().to_vec(),
                        got: b.shape().to_vec(),
                    });
                }
                let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                Tensor::new(a.shape().to_vec(), data)?
            }
            Op::CausalAttention {
                query,
                key,
                value,
                scale,
            } => {
                let q = self.value(*query);
                let k = self.value(*key);
                let v = self.value(*value);
                let (t, d) = (q.rows(), q.cols());
                let (ctx, weights) = tensor::causal_attention(q.data(), k.data(), v.data(), t, d, *scale);
                self.nodes[id].aux = Aux::Attention(weights);
                Tensor::new(vec![t, d], ctx)?
            }
            Op::Softmax { input } => {
                let x = self.value(*input);
                let p = tensor::softmax_rows(x.data(), x.rows(), x.cols());
                Tensor::new(x.shape().to_vec(), p)?
            }
            Op::MeanRows { input, rows } => {
                let x = self.value(*input);
                let d = x.cols();
                let mut out = vec![0.0; d];
                for &r in rows {
                    for (o, v) in out.iter_mut().zip(x.row(r)) {
                        *o += v;
                    }
                }
                let inv = 1.0 / rows.len() as f64;
                for o in out.iter_mut() {
                    *o *= inv;
                }
                Tensor::new(vec![1, d], out)?
            }
            Op::DotConst { input, weights } => {
                let x = self.value(*input);
                if x.numel() != weights.len() {
                    return Err(CoreError::ShapeMismatch {
                        context: format!("dot node {id}"),
                        expected: vec![weights.len()],
                        got: vec![x.numel()],
                    });
                }
                Tensor::scalar(tensor::dot(x.data(), weights))
            }
            Op::MaskedCrossEntropy { logits, targets } => {
                let x = self.value(*logits);
                let (t, v) = (x.rows(), x.cols());
                if targets.len() != t {
                    return Err(CoreError::ShapeMismatch {
                        context: format!("cross-entropy node {id}"),
                        expected: vec![t],
                        got: vec![targets.len()],
                    });
                }
                let count = targets.iter().filter(|t| t.is_some()).count();
                if count == 0 {
                    return Err(CoreError::EmptyDataset {
                        context: "cross-entropy has no target rows".into(),
                    });
                }
                let lse = tensor::logsumexp_rows(x.data(), t, v);
                let mut probs = vec![0.0; t * v];
                let mut loss = 0.0;
                for (r, target) in targets.iter().enumerate() {
                    if let Some(y) = target {
                        if *y >= v {
                            return Err(CoreError::TokenOutOfRange { token: *y, vocab: v });
                        }
                        loss += lse[r] - x.row(r)[*y];
                        let prow = tensor::softmax_rows(x.row(r), 1, v);
                        probs[r * v..(r + 1) * v].copy_from_slice(&prow);
                    }
                }
                self.nodes[id].aux = Aux::CrossEntropy(probs);
                Tensor::scalar(loss / count as f64)
            }
        };
        Ok(value)
    }

    /// Reverse pass from the final node.
    pub fn backward(&self, seed: &Tensor) -> Result<Gradients> {
        self.backward_from(self.nodes.len() - 1, seed)
    }

    /// Reverse pass seeded at an arbitrary node.
    pub fn backward_from(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if !self.evaluated {
            return Err(CoreError::BackwardBeforeForward);
        }
        let out_shape = self.value(output).shape();
        if seed.shape() != out_shape {
            return Err(CoreError::ShapeMismatch {
                context: format!("backward seed at node {output}"),
                expected: out_shape.to_vec(),
                got: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output] = Some(seed.clone());

        for id in (0..=output).rev() {
            let Some(dy) = grads[id].take() else { continue };
            self.backprop_node(id, &dy, &mut grads);
            grads[id] = Some(dy);
        }
        Ok(Gradients { by_node: grads })
    }

    fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, shape: &[usize], add: &[f64]) {
        let slot = grads[id].get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
        for (d, s) in slot.data_mut().iter_mut().zip(add) {
            *d += s;
        }
    }

    fn backprop_node(&self, id: NodeId, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &self.nodes[id].op {
            Op::Input { .. } | Op::Param { .. } => {}
            Op::Gather { table, indices } => {
                let t = self.value(*table);
                let d = t.cols();
                let mut dt = vec![0.0; t.numel()];
                for (r, &ix) in indices.iter().enumerate() {
                    for j in 0..d {
                        dt[ix * d + j] += dy.data()[r * d + j];
                    }
                }
                Self::accumulate(grads, *table, t.shape(), &dt);
            }
            Op::Linear {
                input, weight, bias, ..
            } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let (t, din) = (x.rows(), x.cols());
                let dout = w.rows();
                // dx = dy·W ; dW = dyᵀ·x ; db = Σ_t dy
                let dx = tensor::matmul(dy.data(), w.data(), t, dout, din);
                Self::accumulate(grads, *input, x.shape(), &dx);
                let dw = tensor::matmul_at(dy.data(), x.data(), t, dout, din);
                Self::accumulate(grads, *weight, w.shape(), &dw);
                let mut db = vec![0.0; dout];
                for r in 0..t {
                    for j in 0..dout {
                        db[j] += dy.data()[r * dout + j];
                    }
                }
                Self::accumulate(grads, *bias, &[dout], &db);
            }
            Op::Relu { input } => {
                let x = self.value(*input);
                let dx: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
                    .collect();
                Self::accumulate(grads, *input, x.shape(), &dx);
            }
            Op::Add { lhs, rhs } => {
                let shape = self.value(*lhs).shape();
                Self::accumulate(grads, *lhs, shape, dy.data());
                Self::accumulate(grads, *rhs, shape, dy.data());
            }
            Op::CausalAttention {
                query,
                key,
                value,
                scale,
            } => {
                let q = self.value(*query);
                let k = self.value(*key);
                let v = self.value(*value);
                let (t, d) = (q.rows(), q.cols());
                let Aux::Attention(weights) = &self.nodes[id].aux else {
                    panic!("attention aux missing");
                };
                // dV = Aᵀ·dC ; dA = dC·Vᵀ ; dS = softmax backward per row
                let dv = tensor::matmul_at(weights, dy.data(), t, t, d);
                let da = tensor::matmul_bt(dy.data(), v.data(), t, d, t);
                let mut ds = vec![0.0; t * t];
                for r in 0..t {
                    let arow = &weights[r * t..(r + 1) * t];
                    let darow = &da[r * t..(r + 1) * t];
                    let inner: f64 = (0..=r).map(|s| arow[s] * darow[s]).sum();
                    for s in 0..=r {
                        ds[r * t + s] = arow[s] * (darow[s] - inner);
                    }
                }
                // S = scale·Q·Kᵀ ⇒ dQ = scale·dS·K ; dK = scale·dSᵀ·Q
                let mut dq = tensor::matmul(&ds, k.data(), t, t, d);
                for g in dq.iter_mut() {
                    *g *= scale;
                }
                let mut dk = tensor::matmul_at(&ds, q.data(), t, t, d);
                for g in dk.iter_mut() {
                    *g *= scale;
                }
                Self::accumulate(grads, *query, q.shape(), &dq);
                Self::accumulate(grads, *key, k.shape(), &dk);
                Self::accumulate(grads, *value, v.shape(), &dv);
            }
            Op::Softmax { input } => {
                let p = self.value(id);
                let (rows, cols) = (p.rows(), p.cols());
                let mut dx = vec![0.0; rows * cols];
                for r in 0..rows {
                    let prow = p.row(r);
                    let dyrow = &dy.data()[r * cols..(r + 1) * cols];
                    let inner = tensor::dot(prow, dyrow);
                    for j in 0..cols {
                        dx[r * cols + j] = prow[j] * (dyrow[j] - inner);
                    }
                }
                Self::accumulate(grads, *input, p.shape(), &dx);
            }
            Op::MeanRows { input, rows } => {
                let x = self.value(*input);
                let d = x.cols();
                let mut dx = vec![0.0; x.numel()];
                let inv = 1.0 / rows.len() as f64;
                for &r in rows {
                    for j in 0..d {
                        dx[r * d + j] += dy.data()[j] * inv;
                    }
                }
                Self::accumulate(grads, *input, x.shape(), &dx);
            }
            Op::DotConst { input, weights } => {
                let x = self.value(*input);
                let s = dy.item();
                let dx: Vec<f64> = weights.iter().map(|w| w * s).collect();
                Self::accumulate(grads, *input, x.shape(), &dx);
            }
            Op::MaskedCrossEntropy { logits, targets } => {
                let x = self.value(*logits);
                let (t, v) = (x.rows(), x.cols());
                let Aux::CrossEntropy(probs) = &self.nodes[id].aux else {
                    panic!("cross-entropy aux missing");
                };
                let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                let coeff = dy.item() / count;
                let mut dx = vec![0.0; t * v];
                for (r, target) in targets.iter().enumerate() {
                    if let Some(y) = target {
                        for j in 0..v {
                            dx[r * v + j] = coeff * probs[r * v + j];
                        }
                        dx[r * v + y] -= coeff;
                    }
                }
                Self::accumulate(grads, *logits, x.shape(), &dx);
            }
        }
    }

    /// Forward tangent pass: directional derivative of every node value along
    /// a parameter-space direction (and optional input tangents).
    pub fn tangent(
        &self,
        param_dir: Option<&ParameterVector>,
        input_dirs: &[Option<Tensor>],
    ) -> Result<Vec<Tensor>> {
        if !self.evaluated {
            return Err(CoreError::BackwardBeforeForward);
        }
        let mut tangents: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for id in 0..self.nodes.len() {
            let value = self.value(id);
            let tan = match &self.nodes[id].op {
                Op::Input { slot } => match input_dirs.get(*slot).and_then(|t| t.as_ref()) {
                    Some(t) => t.clone(),
                    None => Tensor::zeros(value.shape().to_vec()),
                },
                Op::Param { segment } => match param_dir {
                    Some(p) => p.segment(*segment).clone(),
                    None => Tensor::zeros(value.shape().to_vec()),
                },
                Op::Gather { table, indices } => {
                    let tt = &tangents[*table];
                    let d = tt.cols();
                    let mut out = Vec::with_capacity(indices.len() * d);
                    for &ix in indices {
                        out.extend_from_slice(tt.row(ix));
                    }
                    Tensor::new(vec![indices.len(), d], out)?
                }
                Op::Linear {
                    input, weight, bias, ..
                } => {
                    let x = self.value(*input);
                    let w = self.value(*weight);
                    let (t, din) = (x.rows(), x.cols());
                    let dout = w.rows();
                    let xt = &tangents[*input];
                    let wt = &tangents[*weight];
                    let bt = &tangents[*bias];
                    let mut y = tensor::matmul_bt(xt.data(), w.data(), t, din, dout);
                    let xw = tensor::matmul_bt(x.data(), wt.data(), t, din, dout);
                    for (a, b) in y.iter_mut().zip(&xw) {
                        *a += b;
                    }
                    for r in 0..t {
                        for j in 0..dout {
                            y[r * dout + j] += bt.data()[j];
                        }
                    }
                    Tensor::new(vec![t, dout], y)?
                }
                Op::Relu { input } => {
                    let x = self.value(*input);
                    let xt = &tangents[*input];
                    let data: Vec<f64> = x
                        .data()
                        .iter()
                        .zip(xt.data())
                        .map(|(&xv, &tv)| if xv > 0.0 { tv } else { 0.0 })
                        .collect();
                    Tensor::new(x.shape().to_vec(), data)?
                }
                Op::Add { lhs, rhs } => {
                    let a = &tangents[*lhs];
                    let b = &tangents[*rhs];
                    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
                    Tensor::new(a.shape().to_vec(), data)?
                }
                Op::CausalAttention {
                    query,
                    key,
                    value,
                    scale,
                } => {
                    let q = self.value(*query);
                    let k = self.value(*key);
                    let v = self.value(*value);
                    let (t, d) = (q.rows(), q.cols());
                    let Aux::Attention(weights) = &self.nodes[id].aux else {
                        panic!("attention aux missing");
                    };
                    let qt = &tangents[*query];
                    let kt = &tangents[*key];
                    let vt = &tangents[*value];
                    // St = scale·(Qt·Kᵀ + Q·Ktᵀ) on the causal triangle
                    let s1 = tensor::matmul_bt(qt.data(), k.data(), t, d, t);
                    let s2 = tensor::matmul_bt(q.data(), kt.data(), t, d, t);
                    let mut at = vec![0.0; t * t];
                    for r in 0..t {
                        let arow = &weights[r * t..(r + 1) * t];
                        let mut inner = 0.0;
                        for s in 0..=r {
                            inner += arow[s] * scale * (s1[r * t + s] + s2[r * t + s]);
                        }
                        for s in 0..=r {
                            let st = scale * (s1[r * t + s] + s2[r * t + s]);
                            at[r * t + s] = arow[s] * (st - inner);
                        }
                    }
                    let mut ct = tensor::matmul(&at, v.data(), t, t, d);
                    let c2 = tensor::matmul(weights, vt.data(), t, t, d);
                    for (a, b) in ct.iter_mut().zip(&c2) {
                        *a += b;
                    }
                    Tensor::new(vec![t, d], ct)?
                }
                Op::Softmax { input } => {
                    let p = self.value(id);
                    let xt = &tangents[*input];
                    let (rows, cols) = (p.rows(), p.cols());
                    let mut out = vec![0.0; rows * cols];
                    for r in 0..rows {
                        let prow = p.row(r);
                        let trow = &xt.data()[r * cols..(r + 1) * cols];
                        let inner = tensor::dot(prow, trow);
                        for j in 0..cols {
                            out[r * cols + j] = prow[j] * (trow[j] - inner);
                        }
                    }
                    Tensor::new(p.shape().to_vec(), out)?
                }
                Op::MeanRows { input, rows } => {
                    let xt = &tangents[*input];
                    let d = xt.cols();
                    let mut out = vec![0.0; d];
                    for &r in rows {
                        for (o, v) in out.iter_mut().zip(xt.row(r)) {
                            *o += v;
                        }
                    }
                    let inv = 1.0 / rows.len() as f64;
                    for o in out.iter_mut() {
                        *o *= inv;
                    }
                    Tensor::new(vec![1, d], out)?
                }
                Op::DotConst { input, weights } => {
                    Tensor::scalar(tensor::dot(tangents[*input].data(), weights))
                }
                Op::MaskedCrossEntropy { logits, targets } => {
                    let xt = &tangents[*logits];
                    let v = self.value(*logits).cols();
                    let Aux::CrossEntropy(probs) = &self.nodes[id].aux else {
                        panic!("cross-entropy aux missing");
                    };
                    let count = targets.iter().filter(|t| t.is_some()).count() as f64;
                    let mut acc = 0.0;
                    for (r, target) in targets.iter().enumerate() {
                        if let Some(y) = target {
                            let prow = &probs[r * v..(r + 1) * v];
                            let trow = &xt.data()[r * v..(r + 1) * v];
                            acc += tensor::dot(prow, trow) - trow[*y];
                        }
                    }
                    Tensor::scalar(acc / count)
                }
            };
            tangents.push(tan);
        }
        Ok(tangents)
    }
}
