//! Forward definitions of the differentiable primitives.

use crate::error::{Error, Result};
use crate::kernels;
use crate::tensor::{erf, Real, Tensor};

use super::tape::{Op, Tape, Var};
use super::LN_EPS;

const FRAC_1_SQRT_2: Real = std::f64::consts::FRAC_1_SQRT_2 as Real;
const FRAC_1_SQRT_2PI: Real = 0.398_942_280_401_432_7;

/// Exact erf-based GELU.
pub fn gelu(x: Real) -> Real {
    0.5 * x * (1.0 + erf(x * FRAC_1_SQRT_2))
}

pub(crate) fn gelu_grad(x: Real) -> Real {
    let cdf = 0.5 * (1.0 + erf(x * FRAC_1_SQRT_2));
    let pdf = FRAC_1_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn sigmoid(x: Real) -> Real {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `ln Σ exp(x)`.
pub fn log_sum_exp(row: &[Real]) -> Real {
    let max = row.iter().copied().fold(Real::NEG_INFINITY, Real::max);
    if max == Real::NEG_INFINITY {
        return max;
    }
    max + row.iter().map(|x| (x - max).exp()).sum::<Real>().ln()
}

/// Row-wise softmax of a `[rows, cols]` buffer, outside any tape.
pub fn softmax_rows(x: &[Real], cols: usize) -> Vec<Real> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(cols.max(1)) {
        let lse = log_sum_exp(row);
        out.extend(row.iter().map(|v| (v - lse).exp()));
    }
    out
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionDims {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttentionDims {
    fn width(&self) -> usize {
        self.heads * self.head_dim
    }
    fn scale(&self) -> Real {
        1.0 / (self.head_dim as Real).sqrt()
    }
    fn at(&self, b: usize, t: usize, h: usize) -> usize {
        (b * self.seq + t) * self.width() + h * self.head_dim
    }
}

fn dot(a: &[Real], b: &[Real]) -> Real {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn attention_forward(
    dims: AttentionDims,
    q: &[Real],
    k: &[Real],
    v: &[Real],
) -> (Vec<Real>, Vec<Real>) {
    let (t_len, hd) = (dims.seq, dims.head_dim);
    let scale = dims.scale();
    let blocks = kernels::map_indexed(dims.batch * dims.heads, |bh| {
        let (b, h) = (bh / dims.heads, bh % dims.heads);
        let mut probs = vec![0.0; t_len * t_len];
        let mut out = vec![0.0; t_len * hd];
        for t in 0..t_len {
            let qt = &q[dims.at(b, t, h)..][..hd];
            let row = &mut probs[t * t_len..(t + 1) * t_len];
            for s in 0..=t {
                row[s] = dot(qt, &k[dims.at(b, s, h)..][..hd]) * scale;
            }
            let lse = log_sum_exp(&row[..=t]);
            for p in &mut row[..=t] {
                *p = (*p - lse).exp();
            }
            let ot = &mut out[t * hd..(t + 1) * hd];
            for s in 0..=t {
                let p = row[s];
                for (o, &vv) in ot.iter_mut().zip(&v[dims.at(b, s, h)..][..hd]) {
                    *o += p * vv;
                }
            }
        }
        (probs, out)
    });
    let mut probs = Vec::with_capacity(dims.batch * dims.heads * t_len * t_len);
    let mut out = vec![0.0; q.len()];
    for (bh, (p, o)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / dims.heads, bh % dims.heads);
        probs.extend(p);
        for t in 0..t_len {
            out[dims.at(b, t, h)..][..hd].copy_from_slice(&o[t * hd..(t + 1) * hd]);
        }
    }
    (out, probs)
}

pub(crate) fn attention_backward(
    dims: AttentionDims,
    q: &[Real],
    k: &[Real],
    v: &[Real],
    probs: &[Real],
    g: &[Real],
) -> (Vec<Real>, Vec<Real>, Vec<Real>) {
    let (t_len, hd) = (dims.seq, dims.head_dim);
    let scale = dims.scale();
    let blocks = kernels::map_indexed(dims.batch * dims.heads, |bh| {
        let (b, h) = (bh / dims.heads, bh % dims.heads);
        let p_block = &probs[bh * t_len * t_len..(bh + 1) * t_len * t_len];
        let mut dq = vec![0.0; t_len * hd];
        let mut dk = vec![0.0; t_len * hd];
        let mut dv = vec![0.0; t_len * hd];
        let mut dp = vec![0.0; t_len];
        for t in 0..t_len {
            let gt = &g[dims.at(b, t, h)..][..hd];
            let pt = &p_block[t * t_len..(t + 1) * t_len];
            let mut acc = 0.0;
            for s in 0..=t {
                dp[s] = dot(gt, &v[dims.at(b, s, h)..][..hd]);
                acc += pt[s] * dp[s];
                for (d, &gg) in dv[s * hd..(s + 1) * hd].iter_mut().zip(gt) {
                    *d += pt[s] * gg;
                }
            }
            let qt = &q[dims.at(b, t, h)..][..hd];
            for s in 0..=t {
                let ds = pt[s] * (dp[s] - acc) * scale;
                if ds == 0.0 {
                    continue;
                }
                let ks = &k[dims.at(b, s, h)..][..hd];
                for j in 0..hd {
                    dq[t * hd + j] += ds * ks[j];
                    dk[s * hd + j] += ds * qt[j];
                }
            }
        }
        (dq, dk, dv)
    });
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    for (bh, (bq, bk, bv)) in blocks.into_iter().enumerate() {
        let (b, h) = (bh / dims.heads, bh % dims.heads);
        for t in 0..t_len {
            let at = dims.at(b, t, h);
            dq[at..at + hd].copy_from_slice(&bq[t * hd..(t + 1) * hd]);
            dk[at..at + hd].copy_from_slice(&bk[t * hd..(t + 1) * hd]);
            dv[at..at + hd].copy_from_slice(&bv[t * hd..(t + 1) * hd]);
        }
    }
    (dq, dk, dv)
}

impl Tape {
    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix_dims(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(usize, usize, usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok((sa[0], sa[1], sb[0], sb[1]))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = self.matrix_dims("matmul", a, b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![m, k],
                right: vec![k2, n],
            });
        }
        let out = kernels::matmul_nn(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// `a[m,k] · b[n,k]ᵀ`, the layout of a linear layer with `[out, in]` weights.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n, k2) = self.matrix_dims("matmul_nt", a, b)?;
        if k != k2 {
            return Err(Error::ShapeMismatch {
                op: "matmul_nt",
                left: vec![m, k],
                right: vec![n, k2],
            });
        }
        let out = kernels::matmul_nt(self.data(a), self.data(b), m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt { a, b, m, k, n }))
    }

    fn zip_with(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(Real, Real) -> Real,
    ) -> Result<(Vec<usize>, Vec<Real>)> {
        self.same_shape(op, a, b)?;
        let out = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(shape, out, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(shape, out, Op::Sub { a, b }))
    }

    /// Element-wise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, out) = self.zip_with("mul", a, b, |x, y| x * y)?;
        Ok(self.push(shape, out, Op::Mul { a, b }))
    }

    fn row_check(&self, op: &'static str, x: Var, row: Var) -> Result<usize> {
        let c = self.value(x).cols();
        if self.shape(row).len() != 1 || self.shape(row)[0] != c {
            return Err(Error::ShapeMismatch {
                op,
                left: self.shape(x).to_vec(),
                right: self.shape(row).to_vec(),
            });
        }
        Ok(c)
    }

    /// Adds a vector to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check("add_row", x, row)?;
        let rv = self.data(row);
        let out = self
            .data(x)
            .chunks_exact(c.max(1))
            .flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a + b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::AddRow { x, row }))
    }

    /// Multiplies every row (last axis) of `x` element-wise by a vector.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let c = self.row_check("mul_row", x, row)?;
        let rv = self.data(row);
        let out = self
            .data(x)
            .chunks_exact(c.max(1))
            .flat_map(|xr| xr.iter().zip(rv).map(|(a, b)| a * b))
            .collect();
        Ok(self.push(self.shape(x).to_vec(), out, Op::MulRow { x, row }))
    }

    pub fn scale(&mut self, x: Var, c: Real) -> Var {
        let out = self.data(x).iter().map(|v| v * c).collect();
        self.push(self.shape(x).to_vec(), out, Op::Scale { x, c })
    }

    fn unary(&mut self, x: Var, f: impl Fn(Real) -> Real, op: Op) -> Var {
        let out = self.data(x).iter().map(|&v| f(v)).collect();
        self.push(self.shape(x).to_vec(), out, op)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, gelu, Op::Gelu { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid { x })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Real::abs, Op::Abs { x })
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Real::sqrt, Op::Sqrt { x })
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.data(x).to_vec();
        Ok(self.push(shape.to_vec(), data, Op::Reshape { x }))
    }

    /// Layer normalization over the last axis followed by `gamma`/`beta` affine terms.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = self.row_check("layer_norm", x, gamma)?;
        self.row_check("layer_norm", x, beta)?;
        let (gv, bv) = (self.data(gamma), self.data(beta));
        let xv = self.data(x);
        let rows = xv.len() / c;
        let mut xhat = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.chunks_exact(c.max(1)) {
            let mean = row.iter().sum::<Real>() / c as Real;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / c as Real;
            let r = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(r);
            for j in 0..c {
                let h = (row[j] - mean) * r;
                xhat.push(h);
                out.push(h * gv[j] + bv[j]);
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = softmax_rows(self.data(x), self.value(x).cols());
        self.push(self.shape(x).to_vec(), out, Op::Softmax { x })
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = self.value(x).cols();
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.data(x).chunks_exact(c.max(1)) {
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|v| v - lse));
        }
        self.push(self.shape(x).to_vec(), out, Op::LogSoftmax { x })
    }

    /// Mean cross-entropy of `[rows, vocab]` logits against per-row targets.
    ///
    /// Rows whose target is `None` are ignored. With smoothing `eps` the
    /// target distribution is `(1 - eps)·onehot + eps/vocab`.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[Option<usize>],
        smoothing: Real,
    ) -> Result<Var> {
        let v = self.value(logits).cols();
        let rows = self.value(logits).rows();
        if targets.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                left: self.shape(logits).to_vec(),
                right: vec![targets.len()],
            });
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(
                "cross_entropy",
                format!("label smoothing {smoothing} outside [0, 1)"),
            ));
        }
        let used = targets.iter().filter(|t| t.is_some()).count();
        if used == 0 {
            return Err(Error::invalid("cross_entropy", "every position is ignored"));
        }
        let uniform = smoothing / v as Real;
        let mut probs = vec![0.0; rows * v];
        let mut total = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= v {
                return Err(Error::invalid(
                    "cross_entropy",
                    format!("target {t} >= vocab {v}"),
                ));
            }
            let row = &self.data(logits)[r * v..(r + 1) * v];
            let lse = log_sum_exp(row);
            let mut loss = 0.0;
            for j in 0..v {
                let logp = row[j] - lse;
                probs[r * v + j] = logp.exp();
                let q = uniform + if j == t { 1.0 - smoothing } else { 0.0 };
                if q != 0.0 {
                    loss -= q * logp;
                }
            }
            total += loss;
        }
        let value = total / used as Real;
        Ok(self.push(
            vec![],
            vec![value],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                smoothing,
                used,
                probs,
            },
        ))
    }

    /// Mean over selected rows of `KL(target ‖ q)` where `log_q` holds
    /// log-probabilities and `target` probabilities of the same shape.
    ///
    /// `target` is a constant; no gradient reaches whatever produced it.
    pub fn kl_div(&mut self, log_q: Var, target: &Tensor, rows: Option<&[bool]>) -> Result<Var> {
        if target.shape() != self.shape(log_q) {
            return Err(Error::ShapeMismatch {
                op: "kl_div",
                left: self.shape(log_q).to_vec(),
                right: target.shape().to_vec(),
            });
        }
        let c = self.value(log_q).cols();
        let n_rows = self.value(log_q).rows();
        let rows: Vec<bool> = match rows {
            Some(r) if r.len() == n_rows => r.to_vec(),
            Some(r) => {
                return Err(Error::ShapeMismatch {
                    op: "kl_div",
                    left: self.shape(log_q).to_vec(),
                    right: vec![r.len()],
                })
            }
            None => vec![true; n_rows],
        };
        let used = rows.iter().filter(|r| **r).count();
        if used == 0 {
            return Err(Error::invalid("kl_div", "no rows selected"));
        }
        let lq = self.data(log_q);
        let mut total = 0.0;
        for (r, keep) in rows.iter().enumerate() {
            if !keep {
                continue;
            }
            for j in r * c..(r + 1) * c {
                let p = target.data()[j];
                if p > 0.0 {
                    total += p * (p.ln() - lq[j]);
                }
            }
        }
        let value = total / used as Real;
        Ok(self.push(
            vec![],
            vec![value],
            Op::KlDiv {
                log_q,
                target: target.data().to_vec(),
                rows,
                used,
            },
        ))
    }

    fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
        let outer = shape[..axis].iter().product();
        let inner = shape[axis + 1..].iter().product();
        (outer, shape[axis], inner)
    }

    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(
                "concat",
                format!("axis {axis} out of range for {base:?}"),
            ));
        }
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            let agrees = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !agrees {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let (outer, _, inner) = Self::axis_split(&base, axis);
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &len) in parts.iter().zip(&lens) {
                let src = self.data(*p);
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                parts: parts.to_vec(),
                outer,
                inner,
                lens,
            },
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::invalid(
                "slice",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, axis_len, inner) = Self::axis_split(&shape, axis);
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * axis_len + start) * inner;
            out.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(
            new_shape,
            out,
            Op::Slice {
                x,
                outer,
                inner,
                axis_len,
                start,
                len,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(vec![], vec![s], Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.data(x).iter().sum::<Real>() / n as Real;
        self.push(vec![], vec![s], Op::Mean { x })
    }

    /// Gathers rows of a `[vocab, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be 2-D, got {shape:?}"),
            ));
        }
        let (rows, d) = (shape[0], shape[1]);
        let tv = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::TokenOutOfRange {
                    token: id,
                    vocab: rows,
                });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        Ok(self.push(
            vec![ids.len(), d],
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Multi-head causal self-attention on `[batch·seq, width]` projections.
    ///
    /// Position `t` attends to positions `0..=t` of the same sequence.
    pub fn causal_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
    ) -> Result<Var> {
        self.same_shape("causal_attention", q, k)?;
        self.same_shape("causal_attention", q, v)?;
        let shape = self.shape(q).to_vec();
        if shape.len() != 2 || shape[0] != batch * seq || heads == 0 || shape[1] % heads != 0 {
            return Err(Error::invalid(
                "causal_attention",
                format!(
                    "shape {shape:?} incompatible with batch {batch}, seq {seq}, heads {heads}"
                ),
            ));
        }
        let dims = AttentionDims {
            batch,
            seq,
            heads,
            head_dim: shape[1] / heads,
        };
        let (out, probs) = attention_forward(dims, self.data(q), self.data(k), self.data(v));
        Ok(self.push(
            shape,
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                dims,
                probs,
            },
        ))
    }
}
