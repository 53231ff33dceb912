//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each kernel call appends one node holding its output value and the data
//! its backward rule needs. Nodes are only ever appended, so the tape is in
//! topological order by construction and `backward` is a single reverse sweep.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, Exec};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch layout for the fused multi-head attention kernel.
///
/// Queries are `[batch·q_len, d]`, keys and values `[batch·k_len, d]`.
#[derive(Clone, Debug)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub causal: bool,
    /// `batch·k_len` flags; `false` keys are never attended to.
    pub key_valid: Vec<bool>,
}

impl AttentionLayout {
    pub fn allowed(&self, b: usize, i: usize, j: usize) -> bool {
        self.key_valid[b * self.k_len + j] && (!self.causal || j <= i)
    }
}

/// Deliberately broken backward rules, used to prove the gradient checker
/// catches real defects.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// ReLU passes gradient through negative inputs too.
    ReluLeak,
    /// Softmax backward drops the normalization term.
    SoftmaxNoCenter,
}

enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Transpose(Var),
    Sum(Var),
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: Arc<AttentionLayout>,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    needs_grad: bool,
    op: Op,
}

/// Gradients of a scalar root with respect to every differentiable leaf.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    by_leaf: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.by_leaf.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor)> {
        self.by_leaf.iter().map(|(v, t)| (*v, t))
    }

    pub fn len(&self) -> usize {
        self.by_leaf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_leaf.is_empty()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    fault: Option<Fault>,
}

fn exec_for(work: usize) -> Exec {
    Exec::default_for(work)
}

/// Splits `shape` around `axis` into (outer, axis extent, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: Fault) -> Self {
        Tape {
            nodes: Vec::new(),
            fault: Some(fault),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.shape()
    }

    /// Records a leaf. It is differentiable iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            needs_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.nodes.push(Node {
            value: tensor,
            needs_grad: false,
            op: Op::Constant,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], op: Op) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            needs_grad,
            op: if needs_grad { op } else { Op::Constant },
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, kernel: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::shape(kernel, format!("expected rank 2, got {s:?}"))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![0.0; m * n];
        kernels::matmul(
            exec_for(m * k * n),
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), &[a, b], Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims2("matmul_nt", a)?;
        let (k, n2) = self.dims2("matmul_nt", b)?;
        if n != n2 {
            return Err(Error::shape(
                "matmul_nt",
                format!("[{m}, {n}] x [{k}, {n2}]^T"),
            ));
        }
        let mut out = vec![0.0; m * k];
        kernels::matmul_nt(
            exec_for(m * k * n),
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            n,
            k,
        );
        Ok(self.push(Tensor::from_parts(vec![m, k], out), &[a, b], Op::MatMulNt(a, b)))
    }

    fn same_shape(&self, kernel: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                kernel,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::Add(a, b)))
    }

    /// Adds a `[n]` bias to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.shape(bias) != [n] {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", self.shape(a), self.shape(bias)),
            ));
        }
        let bv = self.value(bias).data();
        let mut out = self.value(a).to_vec();
        for row in out.chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(bv) {
                *o += b;
            }
        }
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, bias], Op::AddBias(a, bias)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Tensor::from_parts(shape, out), &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).data().iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), &[a], Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), &[a], Op::Relu(a))
    }

    pub fn softmax_lastdim(&mut self, a: Var) -> Var {
        let n = self.value(a).cols();
        let mut out = self.value(a).to_vec();
        out.chunks_mut(n).for_each(kernels::softmax_row);
        let shape = self.shape(a).to_vec();
        self.push(Tensor::from_parts(shape, out), &[a], Op::Softmax(a))
    }

    pub fn layer_norm_lastdim(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let n = self.value(x).cols();
        if self.shape(gain) != [n] || self.shape(bias) != [n] {
            return Err(Error::shape(
                "layer_norm_lastdim",
                format!(
                    "input {:?}, gain {:?}, bias {:?}",
                    self.shape(x),
                    self.shape(gain),
                    self.shape(bias)
                ),
            ));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.len() / n;
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = Vec::with_capacity(rows);
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let span = r * n..(r + 1) * n;
            rstd.push(kernels::normalize_row(&xv[span.clone()], &mut xhat[span.clone()]));
            for ((o, &h), (&gg, &bb)) in out[span.clone()]
                .iter_mut()
                .zip(&xhat[span])
                .zip(g.iter().zip(b))
            {
                *o = h * gg + bb;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Tensor::from_parts(shape, out),
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2("embedding_lookup", table)?;
        if ids.is_empty() {
            return Err(Error::shape("embedding_lookup", "no indices"));
        }
        let tv = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::EmbeddingIndex { index: id, vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for shape {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::shape(
                    "concat",
                    format!("{s:?} vs {base:?} along axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let ext = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            Tensor::from_parts(shape, out),
            parts,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape(
                "slice",
                format!("[{start}, {}) on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * ext * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(
            Tensor::from_parts(new_shape, out),
            &[x],
            Op::Slice { x, axis, start },
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2("transpose", a)?;
        let d = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = d[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], out), &[a], Op::Transpose(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), &[a], Op::Sum(a))
    }

    /// Inverted dropout: zeroes entries with probability `rate` and scales the
    /// survivors by `1/(1-rate)`.
    pub fn dropout<R: Rng>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let out = self
            .value(x)
            .data()
            .iter()
            .zip(&mask)
            .map(|(a, m)| a * m)
            .collect();
        let shape = self.shape(x).to_vec();
        self.push(Tensor::from_parts(shape, out), &[x], Op::Dropout { x, mask })
    }

    /// Scaled dot-product multi-head attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: Arc<AttentionLayout>) -> Result<Var> {
        let (qr, d) = self.dims2("attention", q)?;
        let (kr, dk) = self.dims2("attention", k)?;
        let lay = &*layout;
        if qr != lay.batch * lay.q_len
            || kr != lay.batch * lay.k_len
            || dk != d
            || self.shape(v) != self.shape(k)
            || lay.heads == 0
            || d % lay.heads != 0
            || lay.key_valid.len() != lay.batch * lay.k_len
        {
            return Err(Error::shape(
                "attention",
                format!(
                    "q {:?}, k {:?}, v {:?}, batch {} q_len {} k_len {} heads {}",
                    self.shape(q),
                    self.shape(k),
                    self.shape(v),
                    lay.batch,
                    lay.q_len,
                    lay.k_len,
                    lay.heads
                ),
            ));
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![0.0; qr * d];
        let mut probs = vec![0.0; lay.batch * lay.heads * lay.q_len * lay.k_len];
        let per_out = lay.q_len * d;
        let per_prob = lay.heads * lay.q_len * lay.k_len;
        let work = lay.batch * lay.heads * lay.q_len * lay.k_len * d;
        let body = |b: usize, out_b: &mut [f64], probs_b: &mut [f64]| {
            attention_forward_batch(lay, d, b, qv, kv, vv, out_b, probs_b)
        };
        zip_rows(exec_for(work), &mut out, per_out, &mut probs, per_prob, body);
        Ok(self.push(
            Tensor::from_parts(vec![qr, d], out),
            &[q, k, v],
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// Mean of `-log softmax(logits)[t, target_t]` over positions where
    /// `loss_mask` is set. Unmasked positions get exactly zero gradient.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        loss_mask: &[bool],
    ) -> Result<Var> {
        let (t, vocab) = self.dims2("cross_entropy_masked", logits)?;
        if targets.len() != t || loss_mask.len() != t {
            return Err(Error::shape(
                "cross_entropy_masked",
                format!(
                    "logits [{t}, {vocab}], {} targets, {} mask entries",
                    targets.len(),
                    loss_mask.len()
                ),
            ));
        }
        let count = loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyLossMask);
        }
        let lv = self.value(logits).data();
        let mut probs = vec![0.0; t * vocab];
        let mut total = 0.0;
        for (r, (&target, &m)) in targets.iter().zip(loss_mask).enumerate() {
            if !m {
                continue;
            }
            if target >= vocab {
                return Err(Error::TargetIndex { target, vocab });
            }
            let row = &lv[r * vocab..(r + 1) * vocab];
            total += kernels::log_sum_exp(row) - row[target];
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            p.copy_from_slice(row);
            kernels::softmax_row(p);
        }
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: loss_mask.to_vec(),
                probs,
                count,
            },
        ))
    }

    /// Reverse sweep from a scalar `root`. Returns a gradient for every
    /// differentiable leaf (zeros for leaves the root does not depend on).
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = &self.nodes[root.0].value;
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        let mut by_leaf = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                let data = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                by_leaf.insert(Var(i), Tensor::from_parts(node.value.shape().to_vec(), data));
            }
        }
        Ok(Gradients { by_leaf })
    }

    fn grad_buf<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; node.value.numel()]))
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: &[f64]) {
        if let Some(buf) = self.grad_buf(grads, v) {
            for (b, c) in buf.iter_mut().zip(contrib) {
                *b += c;
            }
        }
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let exec = exec_for(m * k * n);
                if needs(*a) {
                    let mut da = vec![0.0; m * k];
                    kernels::matmul_nt(exec, g, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(exec, self.value(*a).data(), g, &mut db, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let k = self.shape(*b)[0];
                let exec = exec_for(m * k * n);
                if needs(*a) {
                    let mut da = vec![0.0; m * n];
                    kernels::matmul(exec, g, self.value(*b).data(), &mut da, m, k, n);
                    self.accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let mut db = vec![0.0; k * n];
                    kernels::matmul_tn(exec, g, self.value(*a).data(), &mut db, m, k, n);
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g);
                self.accumulate(grads, *b, g);
            }
            Op::AddBias(a, bias) => {
                self.accumulate(grads, *a, g);
                if let Some(buf) = self.grad_buf(grads, *bias) {
                    let n = buf.len();
                    for row in g.chunks(n) {
                        for (b, x) in buf.iter_mut().zip(row) {
                            *b += x;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(*a) {
                    let da: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *a, &da);
                }
                if needs(*b) {
                    let db: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                    self.accumulate(grads, *b, &db);
                }
            }
            Op::Scale(a, s) => {
                let da: Vec<f64> = g.iter().map(|x| x * s).collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Relu(a) => {
                let leak = self.fault == Some(Fault::ReluLeak);
                let da: Vec<f64> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &inp)| if inp > 0.0 || leak { x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, &da);
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let n = node.value.cols();
                let center = self.fault != Some(Fault::SoftmaxNoCenter);
                let mut da = vec![0.0; y.len()];
                for ((dr, yr), gr) in da.chunks_mut(n).zip(y.chunks(n)).zip(g.chunks(n)) {
                    let s = if center { kernels::dot(yr, gr) } else { 0.0 };
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - s);
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let n = node.value.cols();
                let gv = self.value(*gain).data();
                if needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for (hr, gr) in xhat.chunks(n).zip(g.chunks(n)) {
                        for ((d, h), gg) in dg.iter_mut().zip(hr).zip(gr) {
                            *d += h * gg;
                        }
                    }
                    self.accumulate(grads, *gain, &dg);
                }
                if needs(*bias) {
                    let mut db = vec![0.0; n];
                    for gr in g.chunks(n) {
                        for (d, gg) in db.iter_mut().zip(gr) {
                            *d += gg;
                        }
                    }
                    self.accumulate(grads, *bias, &db);
                }
                if needs(*x) {
                    let nf = n as f64;
                    let mut dx = vec![0.0; g.len()];
                    let mut dh = vec![0.0; n];
                    for (r, ((dr, hr), gr)) in dx
                        .chunks_mut(n)
                        .zip(xhat.chunks(n))
                        .zip(g.chunks(n))
                        .enumerate()
                    {
                        for ((d, gg), ga) in dh.iter_mut().zip(gr).zip(gv) {
                            *d = gg * ga;
                        }
                        let mean_dh = dh.iter().sum::<f64>() / nf;
                        let mean_dh_h = kernels::dot(&dh, hr) / nf;
                        for ((d, &h), &dhh) in dr.iter_mut().zip(hr).zip(&dh) {
                            *d = rstd[r] * (dhh - mean_dh - h * mean_dh_h);
                        }
                    }
                    self.accumulate(grads, *x, &dx);
                }
            }
            Op::Embedding { table, ids } => {
                if let Some(buf) = self.grad_buf(grads, *table) {
                    let d = node.value.cols();
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (b, x) in buf[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *b += x;
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ext = self.shape(p)[*axis];
                    if let Some(buf) = self.grad_buf(grads, p) {
                        for o in 0..outer {
                            let src = o * total * inner + offset * inner;
                            let dst = o * ext * inner;
                            for (b, x) in buf[dst..dst + ext * inner]
                                .iter_mut()
                                .zip(&g[src..src + ext * inner])
                            {
                                *b += x;
                            }
                        }
                    }
                    offset += ext;
                }
            }
            Op::Slice { x, axis, start } => {
                let len = node.value.shape()[*axis];
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                if let Some(buf) = self.grad_buf(grads, *x) {
                    for o in 0..outer {
                        let dst = o * ext * inner + start * inner;
                        for (b, v) in buf[dst..dst + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *b += v;
                        }
                    }
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(grads, *a, &da);
            }
            Op::Sum(a) => {
                let da = vec![g[0]; self.value(*a).numel()];
                self.accumulate(grads, *a, &da);
            }
            Op::Dropout { x, mask } => {
                let dx: Vec<f64> = g.iter().zip(mask).map(|(a, m)| a * m).collect();
                self.accumulate(grads, *x, &dx);
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => {
                let lay = &**layout;
                let d = node.value.cols();
                let mut dq = vec![0.0; lay.batch * lay.q_len * d];
                let mut dk = vec![0.0; lay.batch * lay.k_len * d];
                let mut dv = vec![0.0; lay.batch * lay.k_len * d];
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let work = lay.batch * lay.heads * lay.q_len * lay.k_len * d;
                attention_backward(
                    exec_for(work),
                    lay,
                    d,
                    (qv, kv, vv),
                    probs,
                    g,
                    (&mut dq, &mut dk, &mut dv),
                );
                self.accumulate(grads, *q, &dq);
                self.accumulate(grads, *k, &dk);
                self.accumulate(grads, *v, &dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                let vocab = self.value(*logits).cols();
                let scale = g[0] / *count as f64;
                if let Some(buf) = self.grad_buf(grads, *logits) {
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut buf[r * vocab..(r + 1) * vocab];
                        for (b, p) in row.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *b += scale * p;
                        }
                        row[t] -= scale;
                    }
                }
            }
        }
    }
}

/// Runs `f(i, a_chunk, b_chunk)` over matching chunks of two buffers.
fn zip_rows<F>(exec: Exec, a: &mut [f64], a_len: usize, b: &mut [f64], b_len: usize, f: F)
where
    F: Fn(usize, &mut [f64], &mut [f64]) + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            a.par_chunks_mut(a_len)
                .zip(b.par_chunks_mut(b_len))
                .enumerate()
                .for_each(|(i, (x, y))| f(i, x, y));
        }
        _ => a
            .chunks_mut(a_len)
            .zip(b.chunks_mut(b_len))
            .enumerate()
            .for_each(|(i, (x, y))| f(i, x, y)),
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_forward_batch(
    l: &AttentionLayout,
    d: usize,
    b: usize,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    out: &mut [f64],
    probs: &mut [f64],
) {
    let hd = d / l.heads;
    let scale = 1.0 / (hd as f64).sqrt();
    for h in 0..l.heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l.q_len {
            let qrow = &q[(b * l.q_len + i) * d..][cols.clone()];
            let p = &mut probs[(h * l.q_len + i) * l.k_len..][..l.k_len];
            for (j, pj) in p.iter_mut().enumerate() {
                *pj = if l.allowed(b, i, j) {
                    kernels::dot(qrow, &k[(b * l.k_len + j) * d..][cols.clone()]) * scale
                } else {
                    f64::NEG_INFINITY
                };
            }
            kernels::softmax_row(p);
            let orow = &mut out[i * d..][cols.clone()];
            for (j, &pj) in p.iter().enumerate() {
                if pj == 0.0 {
                    continue;
                }
                for (o, &vv) in orow.iter_mut().zip(&v[(b * l.k_len + j) * d..][cols.clone()]) {
                    *o += pj * vv;
                }
            }
        }
    }
}

fn attention_backward(
    exec: Exec,
    l: &AttentionLayout,
    d: usize,
    (q, k, v): (&[f64], &[f64], &[f64]),
    probs: &[f64],
    g: &[f64],
    (dq, dk, dv): (&mut [f64], &mut [f64], &mut [f64]),
) {
    let body = |b: usize, dq_b: &mut [f64], dk_b: &mut [f64], dv_b: &mut [f64]| {
        let hd = d / l.heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dp = vec![0.0; l.k_len];
        for h in 0..l.heads {
            let cols = h * hd..(h + 1) * hd;
            for i in 0..l.q_len {
                let p = &probs[((b * l.heads + h) * l.q_len + i) * l.k_len..][..l.k_len];
                let grow = &g[(b * l.q_len + i) * d..][cols.clone()];
                for (j, dpj) in dp.iter_mut().enumerate() {
                    *dpj = if p[j] != 0.0 {
                        kernels::dot(grow, &v[(b * l.k_len + j) * d..][cols.clone()])
                    } else {
                        0.0
                    };
                }
                let centered = kernels::dot(p, &dp);
                let qrow = &q[(b * l.q_len + i) * d..][cols.clone()];
                for j in 0..l.k_len {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let dvrow = &mut dv_b[j * d..][cols.clone()];
                    for (o, &gg) in dvrow.iter_mut().zip(grow) {
                        *o += p[j] * gg;
                    }
                    let ds = p[j] * (dp[j] - centered) * scale;
                    let krow = &k[(b * l.k_len + j) * d..][cols.clone()];
                    for (o, &kk) in dq_b[i * d..][cols.clone()].iter_mut().zip(krow) {
                        *o += ds * kk;
                    }
                    for (o, &qq) in dk_b[j * d..][cols.clone()].iter_mut().zip(qrow) {
                        *o += ds * qq;
                    }
                }
            }
        }
    };
    let (ql, kl) = (l.q_len * d, l.k_len * d);
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            dq.par_chunks_mut(ql)
                .zip(dk.par_chunks_mut(kl))
                .zip(dv.par_chunks_mut(kl))
                .enumerate()
                .for_each(|(b, ((x, y), z))| body(b, x, y, z));
        }
        _ => dq
            .chunks_mut(ql)
            .zip(dk.chunks_mut(kl))
            .zip(dv.chunks_mut(kl))
            .enumerate()
            .for_each(|(b, ((x, y), z))| body(b, x, y, z)),
    }
}
