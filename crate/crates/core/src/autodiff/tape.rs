use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{Real, Tensor};

use super::ops::{attention_backward, gelu_grad, AttentionDims};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    MatMulNt {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    MulRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        c: Real,
    },
    Gelu {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Abs {
        x: Var,
    },
    Sqrt {
        x: Var,
    },
    Reshape {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<Real>,
        inv_std: Vec<Real>,
    },
    Softmax {
        x: Var,
    },
    LogSoftmax {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        smoothing: Real,
        used: usize,
        probs: Vec<Real>,
    },
    KlDiv {
        log_q: Var,
        target: Vec<Real>,
        rows: Vec<bool>,
        used: usize,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        inner: usize,
        lens: Vec<usize>,
    },
    Slice {
        x: Var,
        outer: usize,
        inner: usize,
        axis_len: usize,
        start: usize,
        len: usize,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttentionDims,
        probs: Vec<Real>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) retain: bool,
}

/// Ordered record of operations; the arena that owns every intermediate value.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
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

    /// Drops every recorded node. Outstanding [`Var`]s become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    /// Records a leaf. Its gradient is populated by [`Tape::backward`] when
    /// `tensor.requires_grad` is set.
    pub fn leaf(&mut self, mut tensor: Tensor) -> Var {
        tensor.zero_grad();
        self.push_node(tensor, Op::Leaf)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[Real] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf or retained node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[Real]> {
        self.nodes[v.0].value.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad
    }

    /// Keeps the gradient of an intermediate node after backward. The node is
    /// marked as requiring grad, so call this before recording its consumers.
    pub fn retain_grad(&mut self, v: Var) {
        self.nodes[v.0].retain = true;
        self.nodes[v.0].value.requires_grad = true;
    }

    /// Resets every stored gradient to `None`.
    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.value.zero_grad();
        }
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, data: Vec<Real>, op: Op) -> Var {
        let requires_grad = op_inputs(&op).iter().any(|v| self.requires_grad(*v));
        let mut value = Tensor::new(shape, data).expect("op produced inconsistent shape");
        value.requires_grad = requires_grad;
        self.push_node(value, op)
    }

    fn push_node(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            retain: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse-mode sweep from a scalar `loss`.
    ///
    /// Gradients are added to whatever a previous call left behind; call
    /// [`Tape::zero_grads`] to start fresh.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.numel() != 1 {
            return Err(Error::NonScalarLoss(loss_node.value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<Real>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].value.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut adj);
            let node = &mut self.nodes[i];
            if node.retain || matches!(node.op, Op::Leaf) {
                node.value.accumulate_grad(&g);
            }
        }
        for node in &mut self.nodes {
            if matches!(node.op, Op::Leaf)
                && node.value.requires_grad
                && node.value.grad().is_none()
            {
                let zeros = vec![0.0; node.value.numel()];
                node.value.accumulate_grad(&zeros);
            }
        }
        Ok(())
    }

    fn send(&self, adj: &mut [Option<Vec<Real>>], to: Var, g: Vec<Real>) {
        if !self.requires_grad(to) {
            return;
        }
        match &mut adj[to.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &[Real], adj: &mut [Option<Vec<Real>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    self.send(adj, a, kernels::matmul_nt(g, self.data(b), m, n, k));
                }
                if self.requires_grad(b) {
                    self.send(adj, b, kernels::matmul_tn(self.data(a), g, k, m, n));
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if self.requires_grad(a) {
                    self.send(adj, a, kernels::matmul_nn(g, self.data(b), m, n, k));
                }
                if self.requires_grad(b) {
                    self.send(adj, b, kernels::matmul_tn(g, self.data(a), n, m, k));
                }
            }
            &Op::Add { a, b } => {
                self.send(adj, a, g.to_vec());
                self.send(adj, b, g.to_vec());
            }
            &Op::Sub { a, b } => {
                self.send(adj, a, g.to_vec());
                self.send(adj, b, g.iter().map(|x| -x).collect());
            }
            &Op::Mul { a, b } => {
                let (av, bv) = (self.data(a), self.data(b));
                self.send(adj, a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                self.send(adj, b, g.iter().zip(av).map(|(g, a)| g * a).collect());
            }
            &Op::AddRow { x, row } => {
                self.send(adj, x, g.to_vec());
                if self.requires_grad(row) {
                    let c = self.value(row).numel();
                    let mut acc = vec![0.0; c];
                    for gr in g.chunks_exact(c.max(1)) {
                        acc.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
                    }
                    self.send(adj, row, acc);
                }
            }
            &Op::MulRow { x, row } => {
                let rv = self.data(row);
                let c = rv.len();
                if self.requires_grad(x) {
                    let gx = g
                        .chunks_exact(c.max(1))
                        .flat_map(|gr| gr.iter().zip(rv).map(|(g, r)| g * r))
                        .collect();
                    self.send(adj, x, gx);
                }
                if self.requires_grad(row) {
                    let mut acc = vec![0.0; c];
                    for (gr, xr) in g
                        .chunks_exact(c.max(1))
                        .zip(self.data(x).chunks_exact(c.max(1)))
                    {
                        for j in 0..c {
                            acc[j] += gr[j] * xr[j];
                        }
                    }
                    self.send(adj, row, acc);
                }
            }
            &Op::Scale { x, c } => self.send(adj, x, g.iter().map(|g| g * c).collect()),
            &Op::Gelu { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &x)| g * gelu_grad(x))
                    .collect();
                self.send(adj, x, gx);
            }
            &Op::Sigmoid { x } => {
                let gx = g.iter().zip(out).map(|(g, s)| g * s * (1.0 - s)).collect();
                self.send(adj, x, gx);
            }
            &Op::Abs { x } => {
                let gx = g
                    .iter()
                    .zip(self.data(x))
                    .map(|(g, &x)| {
                        if x > 0.0 {
                            *g
                        } else if x < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect();
                self.send(adj, x, gx);
            }
            &Op::Sqrt { x } => {
                let gx = g.iter().zip(out).map(|(g, s)| g / (2.0 * s)).collect();
                self.send(adj, x, gx);
            }
            &Op::Reshape { x } => self.send(adj, x, g.to_vec()),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.data(*gamma);
                let c = gv.len();
                if self.requires_grad(*gamma) || self.requires_grad(*beta) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, xr) in g.chunks_exact(c.max(1)).zip(xhat.chunks_exact(c.max(1))) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.send(adj, *gamma, dg);
                    self.send(adj, *beta, db);
                }
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; g.len()];
                    let cf = c as Real;
                    for (r, ((gr, xr), dr)) in g
                        .chunks_exact(c.max(1))
                        .zip(xhat.chunks_exact(c.max(1)))
                        .zip(dx.chunks_exact_mut(c.max(1)))
                        .enumerate()
                    {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                        }
                        mean_d /= cf;
                        mean_dx /= cf;
                        for j in 0..c {
                            let d = gr[j] * gv[j];
                            dr[j] = inv_std[r] * (d - mean_d - xr[j] * mean_dx);
                        }
                    }
                    self.send(adj, *x, dx);
                }
            }
            &Op::Softmax { x } => {
                let c = self.value(x).cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(c.max(1))
                    .zip(out.chunks_exact(c.max(1)))
                    .zip(dx.chunks_exact_mut(c.max(1)))
                {
                    let dot: Real = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(adj, x, dx);
            }
            &Op::LogSoftmax { x } => {
                let c = self.value(x).cols();
                let mut dx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g
                    .chunks_exact(c.max(1))
                    .zip(out.chunks_exact(c.max(1)))
                    .zip(dx.chunks_exact_mut(c.max(1)))
                {
                    let gsum: Real = gr.iter().sum();
                    for j in 0..c {
                        dr[j] = gr[j] - yr[j].exp() * gsum;
                    }
                }
                self.send(adj, x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                smoothing,
                used,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let scale = g[0] / *used as Real;
                let uniform = smoothing / v as Real;
                let mut dx = vec![0.0; probs.len()];
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    let (pr, dr) = (&probs[r * v..(r + 1) * v], &mut dx[r * v..(r + 1) * v]);
                    for j in 0..v {
                        let q = uniform + if j == t { 1.0 - smoothing } else { 0.0 };
                        dr[j] = scale * (pr[j] - q);
                    }
                }
                self.send(adj, *logits, dx);
            }
            Op::KlDiv {
                log_q,
                target,
                rows,
                used,
            } => {
                let c = self.value(*log_q).cols();
                let scale = g[0] / *used as Real;
                let mut dx = vec![0.0; target.len()];
                for (r, keep) in rows.iter().enumerate() {
                    if *keep {
                        for j in r * c..(r + 1) * c {
                            dx[j] = -scale * target[j];
                        }
                    }
                }
                self.send(adj, *log_q, dx);
            }
            Op::Concat {
                parts,
                outer,
                inner,
                lens,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (p, &len) in parts.iter().zip(lens) {
                    if self.requires_grad(*p) {
                        let mut gp = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gp.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.send(adj, *p, gp);
                    }
                    offset += len;
                }
            }
            &Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            } => {
                let mut gx = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.send(adj, x, gx);
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                self.send(adj, x, vec![g[0]; n]);
            }
            &Op::Mean { x } => {
                let n = self.value(x).numel();
                self.send(adj, x, vec![g[0] / n as Real; n]);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut gt = vec![0.0; tv.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt[id * d..(id + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(a, b)| *a += b);
                }
                self.send(adj, *table, gt);
            }
            Op::CausalAttention {
                q,
                k,
                v,
                dims,
                probs,
            } => {
                let (dq, dk, dv) = attention_backward(
                    *dims,
                    self.data(*q),
                    self.data(*k),
                    self.data(*v),
                    probs,
                    g,
                );
                self.send(adj, *q, dq);
                self.send(adj, *k, dk);
                self.send(adj, *v, dv);
            }
        }
    }
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. }
        | Op::MatMulNt { a, b, .. }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b } => vec![*a, *b],
        Op::AddRow { x, row } | Op::MulRow { x, row } => vec![*x, *row],
        Op::Scale { x, .. }
        | Op::Gelu { x }
        | Op::Sigmoid { x }
        | Op::Abs { x }
        | Op::Sqrt { x }
        | Op::Reshape { x }
        | Op::Softmax { x }
        | Op::LogSoftmax { x }
        | Op::Slice { x, .. }
        | Op::Sum { x }
        | Op::Mean { x } => vec![*x],
        Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::CrossEntropy { logits, .. } => vec![*logits],
        Op::KlDiv { log_q, .. } => vec![*log_q],
        Op::Concat { parts, .. } => parts.clone(),
        Op::Embedding { table, .. } => vec![*table],
        Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
    }
}
