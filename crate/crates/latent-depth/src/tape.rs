//! Reverse-mode automatic differentiation over a Wengert tape.
//!
//! The tape records every primitive application in topological order. A
//! backward pass replays the record in reverse, applying each primitive's
//! vector-Jacobian product. `replay` recomputes the whole record from
//! (possibly overridden) leaf values, which is what the finite-difference
//! oracle perturbs.
//!
//! Only the primitives the gated transformer needs are provided; there is no
//! implicit broadcasting. Shape mismatches are contract violations and panic
//! with the primitive name and offending shapes.

use std::collections::HashMap;
use std::sync::Arc;

use crate::tensor::Tensor;

pub type NodeId = usize;

/// Role of a leaf node. Parameters receive optimizer updates, inputs are
/// perturbable activations (gates, probe targets), constants are neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Param,
    Input,
    Const,
}

/// Primitive applications. Shape metadata is derived from input shapes at
/// application time; anything needed to replay deterministically (token ids,
/// masks, frozen noise) is stored in the op itself.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf(LeafKind),
    /// (m,k) x (k,n) -> (m,n)
    Matmul,
    /// (g,m,k) x (g,k,n) -> (g,m,n); with `transpose_b`, rhs is (g,n,k).
    BatchMatmul { transpose_b: bool },
    /// Elementwise sum of two same-shape tensors.
    Add,
    /// (rows,cols) + (cols,) broadcast over rows.
    AddRowBroadcast,
    /// Multiply by a compile-time constant.
    Scale(f64),
    /// inputs: [x, gate]; gate has shape [1]. out = gate * x.
    GateScale,
    Relu,
    /// Softmax over the last axis.
    Softmax,
    /// inputs: [x (rows,cols), gamma (cols,), beta (cols,)]; normalizes the
    /// last axis with the given epsilon.
    LayerNorm { eps: f64 },
    /// inputs: [table (vocab, dim)]; gathers `ids` rows.
    EmbedLookup { ids: Arc<Vec<usize>> },
    /// inputs: [logits (rows, vocab)]; mean of -log softmax(logits)[target]
    /// over rows where `active` is true. Inactive (pad) rows contribute
    /// nothing to value or gradient.
    CrossEntropyMean {
        targets: Arc<Vec<usize>>,
        active: Arc<Vec<bool>>,
    },
    /// Concatenate along axis 0; trailing axes must agree.
    ConcatRows,
    /// out[i] = fill where mask[i], else x[i]. Gradient is zero at masked
    /// entries.
    MaskFill { mask: Arc<Vec<bool>>, fill: f64 },
    /// (batch*seq, heads*head_dim) -> (batch*heads, seq, head_dim)
    SplitHeads {
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// Inverse permutation of SplitHeads.
    MergeHeads {
        batch: usize,
        seq: usize,
        heads: usize,
        head_dim: usize,
    },
    /// (L,2) logit pairs -> (L,) selection probabilities sigma(a1 - a0).
    PairSigmoid,
    /// (L,2) logit pairs -> (L,) relaxed Bernoulli gates
    /// sigma(((a1+e1) - (a0+e0)) / tau) with frozen Gumbel noise `e`.
    /// Saturated pairs round to exactly 0 or 1 at f64, which keeps the
    /// saturated latent model bitwise-equal to the static one (the gradient
    /// there is exactly zero, consistent with the flat finite difference).
    GumbelGate { noise: Arc<Vec<f64>>, tau: f64 },
    /// (L,) posterior probabilities -> scalar sum of Bernoulli-Bernoulli KL
    /// terms against fixed prior probabilities. Both sides clamped to
    /// [1e-6, 1-1e-6].
    BernoulliKlSum { prior: Arc<Vec<f64>> },
    /// Sum of all entries -> [1].
    SumAll,
    /// x[index] of a rank-1 tensor -> [1].
    IndexScalar { index: usize },
    /// |x - target| of a [1] tensor -> [1]; subgradient 0 at the kink.
    AbsDiff { target: f64 },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Matmul => "matmul",
            Op::BatchMatmul { .. } => "batch_matmul",
            Op::Add => "add",
            Op::AddRowBroadcast => "add_row_broadcast",
            Op::Scale(_) => "scale",
            Op::GateScale => "gate_scale",
            Op::Relu => "relu",
            Op::Softmax => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::EmbedLookup { .. } => "embed_lookup",
            Op::CrossEntropyMean { .. } => "cross_entropy_mean",
            Op::ConcatRows => "concat_rows",
            Op::MaskFill { .. } => "mask_fill",
            Op::SplitHeads { .. } => "split_heads",
            Op::MergeHeads { .. } => "merge_heads",
            Op::PairSigmoid => "pair_sigmoid",
            Op::GumbelGate { .. } => "gumbel_gate",
            Op::BernoulliKlSum { .. } => "bernoulli_kl_sum",
            Op::SumAll => "sum_all",
            Op::IndexScalar { .. } => "index_scalar",
            Op::AbsDiff { .. } => "abs_diff",
        }
    }
}

/// One recorded primitive application.
#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
    pub value: Tensor,
}

/// The computation record: nodes in topological order (inputs always precede
/// consumers, by construction).
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients keyed by node id, produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to node `id`, or None if the loss does not
    /// depend on it.
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads[id].as_deref()
    }

    /// Gradient of a leaf as a tensor; zeros when the loss is independent of
    /// the leaf.
    pub fn leaf_grad(&self, tape: &Tape, id: NodeId) -> Tensor {
        let shape = tape.value(id).shape().to_vec();
        match &self.grads[id] {
            Some(g) => Tensor::new(shape, g.clone()),
            None => Tensor::zeros(shape),
        }
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

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn leaf(&mut self, kind: LeafKind, value: Tensor) -> NodeId {
        self.push(Node {
            op: Op::Leaf(kind),
            inputs: vec![],
            value,
        })
    }

    pub fn param(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Param, value)
    }

    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Input, value)
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(LeafKind::Const, value)
    }

    fn push(&mut self, node: Node) -> NodeId {
        self.nodes.push(node);
        self.nodes.len() - 1
    }

    /// Apply a primitive to already-recorded nodes, record the result, and
    /// return its id. Panics on shape contract violations.
    pub fn apply(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        for &i in inputs {
            assert!(i < self.nodes.len(), "{}: input node {} not on tape", op.name(), i);
        }
        let values: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let value = eval(&op, &values);
        self.push(Node {
            op,
            inputs: inputs.to_vec(),
            value,
        })
    }

    /// Reverse-mode pass from a scalar loss node. Returns gradients for every
    /// node the loss depends on.
    pub fn backward(&self, loss: NodeId) -> Gradients {
        assert_eq!(
            self.nodes[loss].value.numel(),
            1,
            "backward: loss must be scalar, node {} has shape {:?}",
            loss,
            self.nodes[loss].value.shape()
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            let Some(dout) = grads[id].take() else { continue };
            {
                let node = &self.nodes[id];
                if !node.inputs.is_empty() {
                    let in_vals: Vec<&Tensor> =
                        node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
                    let din = vjp(&node.op, &in_vals, &node.value, &dout);
                    for (slot, grad) in node.inputs.iter().zip(din.into_iter()) {
                        accumulate(&mut grads[*slot], grad);
                    }
                }
            }
            grads[id] = Some(dout);
        }
        Gradients { grads }
    }

    /// Recompute every node value from the recorded ops, substituting
    /// `overrides` for the corresponding leaf values. With no overrides this
    /// reproduces the recorded values bit-for-bit.
    pub fn replay(&self, overrides: &HashMap<NodeId, Tensor>) -> Vec<Tensor> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let v = if node.inputs.is_empty() {
                match overrides.get(&id) {
                    Some(t) => {
                        assert_eq!(
                            t.shape(),
                            node.value.shape(),
                            "replay: override for node {} has shape {:?}, leaf has {:?}",
                            id,
                            t.shape(),
                            node.value.shape()
                        );
                        t.clone()
                    }
                    None => node.value.clone(),
                }
            } else {
                let ins: Vec<&Tensor> = node.inputs.iter().map(|&i| &values[i]).collect();
                eval(&node.op, &ins)
            };
            values.push(v);
        }
        values
    }

    /// Replay with a single-coordinate perturbation of one leaf and return
    /// the value of `target` (typically the loss). Used by finite-difference
    /// audits.
    pub fn replay_perturbed(&self, leaf: NodeId, coord: usize, delta: f64, target: NodeId) -> f64 {
        let mut t = self.nodes[leaf].value.clone();
        t.data_mut()[coord] += delta;
        let mut overrides = HashMap::new();
        overrides.insert(leaf, t);
        let values = self.replay(&overrides);
        values[target].item()
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, grad: Vec<f64>) {
    match slot {
        Some(acc) => {
            for (a, g) in acc.iter_mut().zip(grad.iter()) {
                *a += g;
            }
        }
        None => *slot = Some(grad),
    }
}

// ---------------------------------------------------------------------------
// Forward evaluation
// ---------------------------------------------------------------------------

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    // i-k-j order keeps the inner loop contiguous in both b and out.
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * brow[j];
            }
        }
    }
}

/// out += a^T @ b where a is (m,k) and b is (m,n); result (k,n).
fn matmul_at_b(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// out += a @ b^T where a is (m,k) and b is (n,k); result (m,n).
fn matmul_a_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            out[i * n + j] += acc;
        }
    }
}

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("rank >= 1");
    let rows = shape.iter().product::<usize>() / cols;
    (rows, cols)
}

fn softmax_rows(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = &mut out[r * cols..(r + 1) * cols];
        let mut sum = 0.0;
        for (o, v) in orow.iter_mut().zip(row.iter()) {
            *o = (v - m).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const KL_CLAMP: f64 = 1e-6;

fn clamp_prob(p: f64, eps: f64) -> f64 {
    p.clamp(eps, 1.0 - eps)
}

fn eval(op: &Op, ins: &[&Tensor]) -> Tensor {
    match op {
        Op::Leaf(_) => panic!("leaf: eval called on leaf"),
        Op::Matmul => {
            assert_eq!(ins.len(), 2, "matmul: expects 2 inputs");
            let (a, b) = (ins[0], ins[1]);
            assert!(
                a.shape().len() == 2 && b.shape().len() == 2 && a.dim(1) == b.dim(0),
                "matmul: incompatible shapes {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            let mut out = vec![0.0; m * n];
            matmul(a.data(), b.data(), m, k, n, &mut out);
            Tensor::new(vec![m, n], out)
        }
        Op::BatchMatmul { transpose_b } => {
            assert_eq!(ins.len(), 2, "batch_matmul: expects 2 inputs");
            let (a, b) = (ins[0], ins[1]);
            assert!(
                a.shape().len() == 3 && b.shape().len() == 3 && a.dim(0) == b.dim(0),
                "batch_matmul: incompatible shapes {:?} x {:?}",
                a.shape(),
                b.shape()
            );
            let (g, m, k) = (a.dim(0), a.dim(1), a.dim(2));
            let n = if *transpose_b { b.dim(1) } else { b.dim(2) };
            let bk = if *transpose_b { b.dim(2) } else { b.dim(1) };
            assert_eq!(
                k,
                bk,
                "batch_matmul: inner dims disagree for {:?} x {:?} (transpose_b={})",
                a.shape(),
                b.shape(),
                transpose_b
            );
            let mut out = vec![0.0; g * m * n];
            for gi in 0..g {
                let asl = &a.data()[gi * m * k..(gi + 1) * m * k];
                let b_off = gi * b.dim(1) * b.dim(2);
                let bsl = &b.data()[b_off..b_off + b.dim(1) * b.dim(2)];
                let osl = &mut out[gi * m * n..(gi + 1) * m * n];
                if *transpose_b {
                    matmul_a_bt(asl, bsl, m, k, n, osl);
                } else {
                    matmul(asl, bsl, m, k, n, osl);
                }
            }
            Tensor::new(vec![g, m, n], out)
        }
        Op::Add => {
            assert_eq!(ins.len(), 2, "add: expects 2 inputs");
            assert_eq!(
                ins[0].shape(),
                ins[1].shape(),
                "add: shape mismatch {:?} vs {:?}",
                ins[0].shape(),
                ins[1].shape()
            );
            let data = ins[0]
                .data()
                .iter()
                .zip(ins[1].data().iter())
                .map(|(a, b)| a + b)
                .collect();
            Tensor::new(ins[0].shape().to_vec(), data)
        }
        Op::AddRowBroadcast => {
            assert_eq!(ins.len(), 2, "add_row_broadcast: expects 2 inputs");
            let (x, b) = (ins[0], ins[1]);
            assert!(
                x.shape().len() == 2 && b.shape().len() == 1 && x.dim(1) == b.dim(0),
                "add_row_broadcast: shapes {:?} + {:?}",
                x.shape(),
                b.shape()
            );
            let (rows, cols) = (x.dim(0), x.dim(1));
            let mut data = x.data().to_vec();
            for r in 0..rows {
                for c in 0..cols {
                    data[r * cols + c] += b.data()[c];
                }
            }
            Tensor::new(vec![rows, cols], data)
        }
        Op::Scale(c) => {
            assert_eq!(ins.len(), 1, "scale: expects 1 input");
            let data = ins[0].data().iter().map(|v| c * v).collect();
            Tensor::new(ins[0].shape().to_vec(), data)
        }
        Op::GateScale => {
            assert_eq!(ins.len(), 2, "gate_scale: expects [x, gate]");
            assert_eq!(
                ins[1].numel(),
                1,
                "gate_scale: gate must be scalar, got {:?}",
                ins[1].shape()
            );
            let z = ins[1].data()[0];
            let data = ins[0].data().iter().map(|v| z * v).collect();
            Tensor::new(ins[0].shape().to_vec(), data)
        }
        Op::Relu => {
            assert_eq!(ins.len(), 1, "relu: expects 1 input");
            let data = ins[0].data().iter().map(|v| v.max(0.0)).collect();
            Tensor::new(ins[0].shape().to_vec(), data)
        }
        Op::Softmax => {
            assert_eq!(ins.len(), 1, "softmax: expects 1 input");
            let (rows, cols) = last_axis(ins[0].shape());
            Tensor::new(ins[0].shape().to_vec(), softmax_rows(ins[0].data(), rows, cols))
        }
        Op::LayerNorm { eps } => {
            assert_eq!(ins.len(), 3, "layer_norm: expects [x, gamma, beta]");
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            let (rows, cols) = last_axis(x.shape());
            assert!(
                gamma.shape() == [cols] && beta.shape() == [cols],
                "layer_norm: affine shapes {:?}/{:?} do not match width {}",
                gamma.shape(),
                beta.shape(),
                cols
            );
            let mut data = vec![0.0; x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cols as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for c in 0..cols {
                    let xhat = (row[c] - mean) * inv;
                    data[r * cols + c] = gamma.data()[c] * xhat + beta.data()[c];
                }
            }
            Tensor::new(x.shape().to_vec(), data)
        }
        Op::EmbedLookup { ids } => {
            assert_eq!(ins.len(), 1, "embed_lookup: expects [table]");
            let table = ins[0];
            assert_eq!(
                table.shape().len(),
                2,
                "embed_lookup: table shape {:?}",
                table.shape()
            );
            let (vocab, dim) = (table.dim(0), table.dim(1));
            let mut data = Vec::with_capacity(ids.len() * dim);
            for &id in ids.iter() {
                assert!(
                    id < vocab,
                    "embed_lookup: token id {} out of vocabulary {}",
                    id,
                    vocab
                );
                data.extend_from_slice(&table.data()[id * dim..(id + 1) * dim]);
            }
            Tensor::new(vec![ids.len(), dim], data)
        }
        Op::CrossEntropyMean { targets, active } => {
            assert_eq!(ins.len(), 1, "cross_entropy_mean: expects [logits]");
            let logits = ins[0];
            assert_eq!(
                logits.shape().len(),
                2,
                "cross_entropy_mean: logits shape {:?}",
                logits.shape()
            );
            let (rows, vocab) = (logits.dim(0), logits.dim(1));
            assert!(
                targets.len() == rows && active.len() == rows,
                "cross_entropy_mean: {} rows, {} targets, {} active flags",
                rows,
                targets.len(),
                active.len()
            );
            let n_active = active.iter().filter(|a| **a).count();
            assert!(n_active > 0, "cross_entropy_mean: all target positions are padding");
            let mut total = 0.0;
            for r in 0..rows {
                if !active[r] {
                    continue;
                }
                let t = targets[r];
                assert!(
                    t < vocab,
                    "cross_entropy_mean: target id {} out of vocabulary {}",
                    t,
                    vocab
                );
                let row = &logits.data()[r * vocab..(r + 1) * vocab];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[t];
            }
            Tensor::scalar(total / n_active as f64)
        }
        Op::ConcatRows => {
            assert!(!ins.is_empty(), "concat_rows: expects at least 1 input");
            let trailing = &ins[0].shape()[1..];
            let mut rows = 0;
            for t in ins {
                assert_eq!(
                    &t.shape()[1..],
                    trailing,
                    "concat_rows: trailing dims {:?} vs {:?}",
                    &t.shape()[1..],
                    trailing
                );
                rows += t.dim(0);
            }
            let mut data = Vec::new();
            for t in ins {
                data.extend_from_slice(t.data());
            }
            let mut shape = vec![rows];
            shape.extend_from_slice(trailing);
            Tensor::new(shape, data)
        }
        Op::MaskFill { mask, fill } => {
            assert_eq!(ins.len(), 1, "mask_fill: expects 1 input");
            assert_eq!(
                mask.len(),
                ins[0].numel(),
                "mask_fill: mask length {} vs {} values",
                mask.len(),
                ins[0].numel()
            );
            let data = ins[0]
                .data()
                .iter()
                .zip(mask.iter())
                .map(|(v, m)| if *m { *fill } else { *v })
                .collect();
            Tensor::new(ins[0].shape().to_vec(), data)
        }
        Op::SplitHeads {
            batch,
            seq,
            heads,
            head_dim,
        } => {
            assert_eq!(ins.len(), 1, "split_heads: expects 1 input");
            let x = ins[0];
            assert!(
                x.shape() == [batch * seq, heads * head_dim],
                "split_heads: shape {:?} vs batch={} seq={} heads={} head_dim={}",
                x.shape(),
                batch,
                seq,
                heads,
                head_dim
            );
            let (b, s, h, d) = (*batch, *seq, *heads, *head_dim);
            let mut data = vec![0.0; x.numel()];
            for bi in 0..b {
                for si in 0..s {
                    for hi in 0..h {
                        let src = ((bi * s + si) * h + hi) * d;
                        let dst = (((bi * h + hi) * s) + si) * d;
                        data[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
                    }
                }
            }
            Tensor::new(vec![b * h, s, d], data)
        }
        Op::MergeHeads {
            batch,
            seq,
            heads,
            head_dim,
        } => {
            assert_eq!(ins.len(), 1, "merge_heads: expects 1 input");
            let x = ins[0];
            assert!(
                x.shape() == [batch * heads, *seq, *head_dim],
                "merge_heads: shape {:?} vs batch={} seq={} heads={} head_dim={}",
                x.shape(),
                batch,
                seq,
                heads,
                head_dim
            );
            let (b, s, h, d) = (*batch, *seq, *heads, *head_dim);
            let mut data = vec![0.0; x.numel()];
            for bi in 0..b {
                for si in 0..s {
                    for hi in 0..h {
                        let src = (((bi * h + hi) * s) + si) * d;
                        let dst = ((bi * s + si) * h + hi) * d;
                        data[dst..dst + d].copy_from_slice(&x.data()[src..src + d]);
                    }
                }
            }
            Tensor::new(vec![b * s, h * d], data)
        }
        Op::PairSigmoid => {
            assert_eq!(ins.len(), 1, "pair_sigmoid: expects 1 input");
            let x = ins[0];
            assert!(
                x.shape().len() == 2 && x.dim(1) == 2,
                "pair_sigmoid: expects (L,2) logit pairs, got {:?}",
                x.shape()
            );
            let l = x.dim(0);
            let data = (0..l)
                .map(|i| sigmoid(x.data()[i * 2 + 1] - x.data()[i * 2]))
                .collect();
            Tensor::new(vec![l], data)
        }
        Op::GumbelGate { noise, tau } => {
            assert_eq!(ins.len(), 1, "gumbel_gate: expects 1 input");
            let x = ins[0];
            assert!(
                x.shape().len() == 2 && x.dim(1) == 2,
                "gumbel_gate: expects (L,2) logit pairs, got {:?}",
                x.shape()
            );
            assert!(*tau > 0.0, "gumbel_gate: temperature must be positive, got {}", tau);
            assert_eq!(
                noise.len(),
                x.numel(),
                "gumbel_gate: noise length {} vs {} logits",
                noise.len(),
                x.numel()
            );
            let l = x.dim(0);
            let data = (0..l)
                .map(|i| {
                    let a0 = x.data()[i * 2] + noise[i * 2];
                    let a1 = x.data()[i * 2 + 1] + noise[i * 2 + 1];
                    sigmoid((a1 - a0) / tau)
                })
                .collect();
            Tensor::new(vec![l], data)
        }
        Op::BernoulliKlSum { prior } => {
            assert_eq!(ins.len(), 1, "bernoulli_kl_sum: expects 1 input");
            let x = ins[0];
            assert!(
                x.shape().len() == 1 && x.dim(0) == prior.len(),
                "bernoulli_kl_sum: {} probabilities vs {} priors",
                x.numel(),
                prior.len()
            );
            let mut total = 0.0;
            for (pi, p) in x.data().iter().zip(prior.iter()) {
                let q = clamp_prob(*pi, KL_CLAMP);
                let p = clamp_prob(*p, KL_CLAMP);
                total += q * (q / p).ln() + (1.0 - q) * ((1.0 - q) / (1.0 - p)).ln();
            }
            Tensor::scalar(total)
        }
        Op::SumAll => {
            assert_eq!(ins.len(), 1, "sum_all: expects 1 input");
            Tensor::scalar(ins[0].data().iter().sum())
        }
        Op::IndexScalar { index } => {
            assert_eq!(ins.len(), 1, "index_scalar: expects 1 input");
            assert!(
                *index < ins[0].numel(),
                "index_scalar: index {} out of bounds for {:?}",
                index,
                ins[0].shape()
            );
            Tensor::scalar(ins[0].data()[*index])
        }
        Op::AbsDiff { target } => {
            assert_eq!(ins.len(), 1, "abs_diff: expects 1 input");
            assert_eq!(
                ins[0].numel(),
                1,
                "abs_diff: expects scalar input, got {:?}",
                ins[0].shape()
            );
            Tensor::scalar((ins[0].data()[0] - target).abs())
        }
    }
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products
// ---------------------------------------------------------------------------

fn vjp(op: &Op, ins: &[&Tensor], out: &Tensor, dout: &[f64]) -> Vec<Vec<f64>> {
    match op {
        Op::Leaf(_) => vec![],
        Op::Matmul => {
            let (a, b) = (ins[0], ins[1]);
            let (m, k, n) = (a.dim(0), a.dim(1), b.dim(1));
            let mut da = vec![0.0; m * k];
            let mut db = vec![0.0; k * n];
            // dA = dOut @ B^T ; dB = A^T @ dOut
            matmul_a_bt(dout, b.data(), m, n, k, &mut da);
            matmul_at_b(a.data(), dout, m, k, n, &mut db);
            vec![da, db]
        }
        Op::BatchMatmul { transpose_b } => {
            let (a, b) = (ins[0], ins[1]);
            let (g, m, k) = (a.dim(0), a.dim(1), a.dim(2));
            let n = out.dim(2);
            let mut da = vec![0.0; a.numel()];
            let mut db = vec![0.0; b.numel()];
            for gi in 0..g {
                let asl = &a.data()[gi * m * k..(gi + 1) * m * k];
                let b_off = gi * b.dim(1) * b.dim(2);
                let bsl = &b.data()[b_off..b_off + b.dim(1) * b.dim(2)];
                let dsl = &dout[gi * m * n..(gi + 1) * m * n];
                let dasl = &mut da[gi * m * k..(gi + 1) * m * k];
                if *transpose_b {
                    // out = A @ B^T, B is (n,k): dA = dOut @ B ; dB = dOut^T @ A
                    matmul(dsl, bsl, m, n, k, dasl);
                    let dbsl = &mut db[b_off..b_off + n * k];
                    matmul_at_b(dsl, asl, m, n, k, dbsl);
                } else {
                    // dA = dOut @ B^T ; dB = A^T @ dOut
                    matmul_a_bt(dsl, bsl, m, n, k, dasl);
                    let dbsl = &mut db[b_off..b_off + k * n];
                    matmul_at_b(asl, dsl, m, k, n, dbsl);
                }
            }
            vec![da, db]
        }
        Op::Add => vec![dout.to_vec(), dout.to_vec()],
        Op::AddRowBroadcast => {
            let (rows, cols) = (ins[0].dim(0), ins[0].dim(1));
            let mut db = vec![0.0; cols];
            for r in 0..rows {
                for c in 0..cols {
                    db[c] += dout[r * cols + c];
                }
            }
            vec![dout.to_vec(), db]
        }
        Op::Scale(c) => vec![dout.iter().map(|d| c * d).collect()],
        Op::GateScale => {
            let z = ins[1].data()[0];
            let dx = dout.iter().map(|d| z * d).collect();
            let dz = dout
                .iter()
                .zip(ins[0].data().iter())
                .map(|(d, x)| d * x)
                .sum();
            vec![dx, vec![dz]]
        }
        Op::Relu => {
            let dx = dout
                .iter()
                .zip(ins[0].data().iter())
                .map(|(d, x)| if *x > 0.0 { *d } else { 0.0 })
                .collect();
            vec![dx]
        }
        Op::Softmax => {
            let (rows, cols) = last_axis(out.shape());
            let y = out.data();
            let mut dx = vec![0.0; y.len()];
            for r in 0..rows {
                let yr = &y[r * cols..(r + 1) * cols];
                let dr = &dout[r * cols..(r + 1) * cols];
                let dot: f64 = yr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    dx[r * cols + c] = yr[c] * (dr[c] - dot);
                }
            }
            vec![dx]
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (ins[0], ins[1]);
            let (rows, cols) = last_axis(x.shape());
            let cf = cols as f64;
            let mut dx = vec![0.0; x.numel()];
            let mut dgamma = vec![0.0; cols];
            let mut dbeta = vec![0.0; cols];
            for r in 0..rows {
                let row = &x.data()[r * cols..(r + 1) * cols];
                let drow = &dout[r * cols..(r + 1) * cols];
                let mean = row.iter().sum::<f64>() / cf;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cf;
                let inv = 1.0 / (var + eps).sqrt();
                // dxhat = dout * gamma; reuse xhat for the affine grads.
                let mut sum_dxhat = 0.0;
                let mut sum_dxhat_xhat = 0.0;
                let mut xhat = vec![0.0; cols];
                let mut dxhat = vec![0.0; cols];
                for c in 0..cols {
                    xhat[c] = (row[c] - mean) * inv;
                    dxhat[c] = drow[c] * gamma.data()[c];
                    sum_dxhat += dxhat[c];
                    sum_dxhat_xhat += dxhat[c] * xhat[c];
                    dgamma[c] += drow[c] * xhat[c];
                    dbeta[c] += drow[c];
                }
                for c in 0..cols {
                    dx[r * cols + c] =
                        inv * (dxhat[c] - sum_dxhat / cf - xhat[c] * sum_dxhat_xhat / cf);
                }
            }
            vec![dx, dgamma, dbeta]
        }
        Op::EmbedLookup { ids } => {
            let table = ins[0];
            let dim = table.dim(1);
            let mut dt = vec![0.0; table.numel()];
            for (row, &id) in ids.iter().enumerate() {
                for c in 0..dim {
                    dt[id * dim + c] += dout[row * dim + c];
                }
            }
            vec![dt]
        }
        Op::CrossEntropyMean { targets, active } => {
            let logits = ins[0];
            let (rows, vocab) = (logits.dim(0), logits.dim(1));
            let n_active = active.iter().filter(|a| **a).count() as f64;
            let scale = dout[0] / n_active;
            let mut dl = vec![0.0; logits.numel()];
            for r in 0..rows {
                if !active[r] {
                    continue;
                }
                let row = &logits.data()[r * vocab..(r + 1) * vocab];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut exps: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for e in exps.iter_mut() {
                    *e /= sum;
                }
                for c in 0..vocab {
                    let ind = if c == targets[r] { 1.0 } else { 0.0 };
                    dl[r * vocab + c] = scale * (exps[c] - ind);
                }
            }
            vec![dl]
        }
        Op::ConcatRows => {
            let mut grads = Vec::with_capacity(ins.len());
            let mut offset = 0;
            for t in ins {
                let n = t.numel();
                grads.push(dout[offset..offset + n].to_vec());
                offset += n;
            }
            grads
        }
        Op::MaskFill { mask, .. } => {
            let dx = dout
                .iter()
                .zip(mask.iter())
                .map(|(d, m)| if *m { 0.0 } else { *d })
                .collect();
            vec![dx]
        }
        Op::SplitHeads {
            batch,
            seq,
            heads,
            head_dim,
        } => {
            let (b, s, h, d) = (*batch, *seq, *heads, *head_dim);
            let mut dx = vec![0.0; dout.len()];
            for bi in 0..b {
                for si in 0..s {
                    for hi in 0..h {
                        let src = ((bi * s + si) * h + hi) * d;
                        let dst = (((bi * h + hi) * s) + si) * d;
                        dx[src..src + d].copy_from_slice(&dout[dst..dst + d]);
                    }
                }
            }
            vec![dx]
        }
        Op::MergeHeads {
            batch,
            seq,
            heads,
            head_dim,
        } => {
            let (b, s, h, d) = (*batch, *seq, *heads, *head_dim);
            let mut dx = vec![0.0; dout.len()];
            for bi in 0..b {
                for si in 0..s {
                    for hi in 0..h {
                        let src = (((bi * h + hi) * s) + si) * d;
                        let dst = ((bi * s + si) * h + hi) * d;
                        dx[src..src + d].copy_from_slice(&dout[dst..dst + d]);
                    }
                }
            }
            vec![dx]
        }
        Op::PairSigmoid => {
            let x = ins[0];
            let l = x.dim(0);
            let mut dx = vec![0.0; x.numel()];
            for i in 0..l {
                let pi = out.data()[i];
                let g = dout[i] * pi * (1.0 - pi);
                dx[i * 2 + 1] = g;
                dx[i * 2] = -g;
            }
            vec![dx]
        }
        Op::GumbelGate { tau, .. } => {
            let x = ins[0];
            let l = x.dim(0);
            let mut dx = vec![0.0; x.numel()];
            for i in 0..l {
                let z = out.data()[i];
                let g = dout[i] * z * (1.0 - z) / tau;
                dx[i * 2 + 1] = g;
                dx[i * 2] = -g;
            }
            vec![dx]
        }
        Op::BernoulliKlSum { prior } => {
            let x = ins[0];
            let mut dx = vec![0.0; x.numel()];
            for (i, (pi, p)) in x.data().iter().zip(prior.iter()).enumerate() {
                // Zero where the clamp is active: the clamped composite is
                // locally constant there.
                if *pi <= KL_CLAMP || *pi >= 1.0 - KL_CLAMP {
                    continue;
                }
                let q = *pi;
                let p = clamp_prob(*p, KL_CLAMP);
                dx[i] = dout[0] * ((q / p).ln() - ((1.0 - q) / (1.0 - p)).ln());
            }
            vec![dx]
        }
        Op::SumAll => vec![vec![dout[0]; ins[0].numel()]],
        Op::IndexScalar { index } => {
            let mut dx = vec![0.0; ins[0].numel()];
            dx[*index] = dout[0];
            vec![dx]
        }
        Op::AbsDiff { target } => {
            let diff = ins[0].data()[0] - target;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            vec![vec![dout[0] * sign]]
        }
    }
}

// ---------------------------------------------------------------------------
// Finite-difference oracle
// ---------------------------------------------------------------------------

/// Central-difference gradient estimate of a scalar function, one coordinate
/// at a time: (f(x + eps e_i) - f(x - eps e_i)) / (2 eps).
pub fn finite_difference_gradient<F: Fn(&Tensor) -> f64>(f: F, x: &Tensor, eps: f64) -> Tensor {
    assert!(eps > 0.0, "finite_difference_gradient: eps must be positive");
    let mut grad = vec![0.0; x.numel()];
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        grad[i] = (plus - minus) / (2.0 * eps);
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error with an absolute floor for near-zero entries; the standard
/// acceptance test for analytic-vs-numeric gradient agreement.
pub fn gradient_mismatch(analytic: f64, numeric: f64, abs_floor: f64) -> f64 {
    let abs = (analytic - numeric).abs();
    if abs <= abs_floor {
        return 0.0;
    }
    abs / analytic.abs().max(numeric.abs()).max(abs_floor)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fd_check_leaf(tape: &Tape, leaf: NodeId, loss: NodeId, grads: &Gradients, tol: f64) {
        let analytic = grads.leaf_grad(tape, leaf);
        let eps = 1e-5;
        for i in 0..analytic.numel() {
            let plus = tape.replay_perturbed(leaf, i, eps, loss);
            let minus = tape.replay_perturbed(leaf, i, -eps, loss);
            let numeric = (plus - minus) / (2.0 * eps);
            let err = gradient_mismatch(analytic.data()[i], numeric, 1e-7);
            assert!(
                err <= tol,
                "coord {}: analytic {} vs numeric {} (err {})",
                i,
                analytic.data()[i],
                numeric,
                err
            );
        }
    }

    #[test]
    fn softmax_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::vector(vec![0.0, 0.0, 0.0]));
        let y = tape.apply(Op::Softmax, &[x]);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn layer_norm_constant_row_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 4, vec![3.0; 4]));
        let gamma = tape.constant(Tensor::vector(vec![1.0; 4]));
        let beta = tape.constant(Tensor::vector(vec![0.0; 4]));
        let y = tape.apply(Op::LayerNorm { eps: 1e-5 }, &[x, gamma, beta]);
        // Zero variance is handled by epsilon; output is 0 up to that tolerance.
        assert!(tape.value(y).max_abs() < 1e-6);
    }

    #[test]
    fn matmul_of_ones() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![1.0; 6]));
        let b = tape.input(Tensor::matrix(3, 2, vec![1.0; 6]));
        let y = tape.apply(Op::Matmul, &[a, b]);
        assert_eq!(tape.value(y).shape(), &[2, 2]);
        for v in tape.value(y).data() {
            assert_eq!(*v, 3.0);
        }
    }

    #[test]
    #[should_panic(expected = "matmul: incompatible shapes")]
    fn matmul_shape_mismatch_names_primitive() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::matrix(2, 3, vec![1.0; 6]));
        let b = tape.input(Tensor::matrix(2, 2, vec![1.0; 4]));
        tape.apply(Op::Matmul, &[a, b]);
    }

    #[test]
    fn square_gradient() {
        // loss = x . x at x = 3 -> gradient 6
        let mut tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let x2 = tape.apply(Op::GateScale, &[x, x]);
        let grads = tape.backward(x2);
        assert_eq!(grads.leaf_grad(&tape, x).data(), &[6.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let x = tape.param(Tensor::scalar(2.0));
        let loss = tape.apply(Op::GateScale, &[x, x]);
        let grads = tape.backward(loss);
        assert_eq!(grads.leaf_grad(&tape, w).data(), &[0.0, 0.0]);
        assert!(grads.get(w).is_none());
    }

    #[test]
    #[should_panic(expected = "loss must be scalar")]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.apply(Op::Relu, &[x]);
        tape.backward(y);
    }

    #[test]
    fn cross_entropy_uniform_logits_gradient() {
        // Uniform logits over 4 classes, true class 0, single active row:
        // grad = softmax - onehot = (-0.75, 0.25, 0.25, 0.25).
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::matrix(1, 4, vec![0.0; 4]));
        let loss = tape.apply(
            Op::CrossEntropyMean {
                targets: Arc::new(vec![0]),
                active: Arc::new(vec![true]),
            },
            &[logits],
        );
        let grads = tape.backward(loss);
        let g = grads.leaf_grad(&tape, logits);
        let expected = [-0.75, 0.25, 0.25, 0.25];
        for (a, e) in g.data().iter().zip(expected.iter()) {
            assert!((a - e).abs() < 1e-12, "got {:?}", g.data());
        }
        fd_check_leaf(&tape, logits, loss, &grads, 1e-4);
    }

    #[test]
    fn fd_of_square_function() {
        let f = |t: &Tensor| t.data()[0] * t.data()[0];
        let g = finite_difference_gradient(f, &Tensor::scalar(3.0), 1e-5);
        assert!((g.data()[0] - 6.0).abs() < 1e-8);
    }

    #[test]
    fn fd_of_constant_function() {
        let f = |_: &Tensor| 7.5;
        let g = finite_difference_gradient(f, &Tensor::vector(vec![1.0, -2.0, 0.5]), 1e-5);
        assert_eq!(g.data(), &[0.0, 0.0, 0.0]);
    }

    /// Every primitive's analytic gradient against central differences on a
    /// small composite graph exercising that primitive.
    #[test]
    fn per_primitive_gradients_match_finite_differences() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 3, vec![0.5, -1.2, 0.3, 2.0, 0.1, -0.7]));
        let b = tape.param(Tensor::matrix(3, 2, vec![1.1, -0.4, 0.2, 0.9, -1.5, 0.6]));
        let mm = tape.apply(Op::Matmul, &[a, b]);
        let bias = tape.param(Tensor::vector(vec![0.05, -0.1]));
        let biased = tape.apply(Op::AddRowBroadcast, &[mm, bias]);
        let act = tape.apply(Op::Relu, &[biased]);
        let gamma = tape.param(Tensor::vector(vec![1.2, 0.8]));
        let beta = tape.param(Tensor::vector(vec![0.1, -0.2]));
        let normed = tape.apply(Op::LayerNorm { eps: 1e-5 }, &[act, gamma, beta]);
        let soft = tape.apply(Op::Softmax, &[normed]);
        let gate = tape.param(Tensor::scalar(0.37));
        let gated = tape.apply(Op::GateScale, &[soft, gate]);
        let scaled = tape.apply(Op::Scale(1.7), &[gated]);
        let summed = tape.apply(Op::Add, &[scaled, mm]);
        let masked = tape.apply(
            Op::MaskFill {
                mask: Arc::new(vec![false, true, false, false]),
                fill: -2.0,
            },
            &[summed],
        );
        let loss = tape.apply(Op::SumAll, &[masked]);

        let grads = tape.backward(loss);
        for leaf in [a, b, bias, gamma, beta, gate] {
            fd_check_leaf(&tape, leaf, loss, &grads, 1e-4);
        }
    }

    #[test]
    fn attention_shaped_gradients_match_finite_differences() {
        // (batch=1, seq=2, heads=2, head_dim=2) attention-like pipeline.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(
            2,
            4,
            vec![0.3, -0.8, 1.2, 0.4, -0.5, 0.9, 0.2, -1.1],
        ));
        let q = tape.apply(
            Op::SplitHeads {
                batch: 1,
                seq: 2,
                heads: 2,
                head_dim: 2,
            },
            &[x],
        );
        let scores = tape.apply(Op::BatchMatmul { transpose_b: true }, &[q, q]);
        let masked = tape.apply(
            Op::MaskFill {
                mask: Arc::new(vec![false, true, false, false, false, true, false, false]),
                fill: -1e9,
            },
            &[scores],
        );
        let attn = tape.apply(Op::Softmax, &[masked]);
        let ctx = tape.apply(Op::BatchMatmul { transpose_b: false }, &[attn, q]);
        let merged = tape.apply(
            Op::MergeHeads {
                batch: 1,
                seq: 2,
                heads: 2,
                head_dim: 2,
            },
            &[ctx],
        );
        let loss = tape.apply(
            Op::CrossEntropyMean {
                targets: Arc::new(vec![1, 3]),
                active: Arc::new(vec![true, true]),
            },
            &[merged],
        );
        let grads = tape.backward(loss);
        fd_check_leaf(&tape, x, loss, &grads, 1e-4);
    }

    #[test]
    fn gate_pipeline_gradients_match_finite_differences() {
        let mut tape = Tape::new();
        let alpha = tape.param(Tensor::matrix(3, 2, vec![0.0, 0.4, -0.3, 0.2, 1.0, -1.0]));
        let pi = tape.apply(Op::PairSigmoid, &[alpha]);
        let pi_routed = alpha_free(&mut tape, pi);
        let kl = tape.apply(
            Op::BernoulliKlSum {
                prior: Arc::new(vec![0.5, 0.5, 0.5]),
            },
            &[pi_routed],
        );
        let z = tape.apply(
            Op::GumbelGate {
                noise: Arc::new(vec![0.1, -0.2, 0.5, 0.3, -0.8, 0.05]),
                tau: 0.7,
            },
            &[alpha],
        );
        let zsum = tape.apply(Op::SumAll, &[z]);
        let depth = tape.apply(Op::AbsDiff { target: 2.0 }, &[zsum]);
        let z0 = tape.apply(Op::IndexScalar { index: 0 }, &[z]);
        let mix = tape.apply(Op::Add, &[depth, z0]);
        let loss = tape.apply(Op::Add, &[mix, kl]);
        let grads = tape.backward(loss);
        fd_check_leaf(&tape, alpha, loss, &grads, 1e-4);
    }

    // Identity helper so the KL test consumes `pi` through a node boundary.
    fn alpha_free(tape: &mut Tape, pi: NodeId) -> NodeId {
        tape.apply(Op::Scale(1.0), &[pi])
    }

    #[test]
    fn embed_and_concat_gradients() {
        let mut tape = Tape::new();
        let table = tape.param(Tensor::matrix(4, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8]));
        let e = tape.apply(
            Op::EmbedLookup {
                ids: Arc::new(vec![2, 0, 2]),
            },
            &[table],
        );
        let e2 = tape.apply(Op::Scale(2.0), &[e]);
        let cat = tape.apply(Op::ConcatRows, &[e, e2]);
        let loss = tape.apply(Op::SumAll, &[cat]);
        let grads = tape.backward(loss);
        // Row 2 used twice in e (x1) and twice in e2 (x2) -> 2*1 + 2*2 = 6.
        let g = grads.leaf_grad(&tape, table);
        assert_eq!(g.data()[2 * 2], 6.0);
        assert_eq!(g.data()[0], 3.0);
        assert_eq!(g.data()[1 * 2], 0.0);
        fd_check_leaf(&tape, table, loss, &grads, 1e-4);
    }

    #[test]
    fn replay_reproduces_values_bitwise() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::matrix(2, 2, vec![0.3, -1.0, 2.5, 0.7]));
        let s = tape.apply(Op::Softmax, &[a]);
        let l = tape.apply(Op::SumAll, &[s]);
        let values = tape.replay(&HashMap::new());
        assert_eq!(values[s], *tape.value(s));
        assert_eq!(values[l], *tape.value(l));
    }

    #[test]
    fn gradient_linearity() {
        // Gradient of (l1 + l2) equals gradient of l1 plus gradient of l2.
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![0.4, -0.9, 1.3]));
        let r = tape.apply(Op::Relu, &[x]);
        let l1 = tape.apply(Op::SumAll, &[r]);
        let sm = tape.apply(Op::Softmax, &[x]);
        let l2 = tape.apply(Op::IndexScalar { index: 1 }, &[sm]);
        let both = tape.apply(Op::Add, &[l1, l2]);

        let g_both = tape.backward(both).leaf_grad(&tape, x);
        let g1 = tape.backward(l1).leaf_grad(&tape, x);
        let g2 = tape.backward(l2).leaf_grad(&tape, x);
        for i in 0..3 {
            let sum = g1.data()[i] + g2.data()[i];
            assert!((g_both.data()[i] - sum).abs() <= 1e-12);
        }
    }

    #[test]
    fn all_pad_targets_rejected() {
        let mut tape = Tape::new();
        let logits = tape.param(Tensor::matrix(2, 3, vec![0.0; 6]));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            tape.apply(
                Op::CrossEntropyMean {
                    targets: Arc::new(vec![0, 0]),
                    active: Arc::new(vec![false, false]),
                },
                &[logits],
            )
        }));
        assert!(result.is_err());
    }
}
