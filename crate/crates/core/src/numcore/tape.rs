//! Recording tape for reverse-mode differentiation.
//!
//! Every op appends one node holding its output value and enough saved state
//! to run its backward rule. Nodes only reference earlier nodes, so the tape
//! is topologically ordered by construction and `backward` is a single
//! reverse sweep.

use super::gemm::{axpy, dot, sgemm, Strides};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Score written into masked attention positions before the softmax.
pub const MASKED_SCORE: f32 = -1e9;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddRow(Var, Var),
    MatMul(Var, Var),
    BatchMatMul(Var, Var),
    Transpose(Var),
    SwapMid(Var),
    Reshape(Var),
    Gelu(Var),
    Softmax {
        x: Var,
        temperature: f32,
    },
    RmsNorm {
        x: Var,
        weight: Var,
        inv_rms: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f32>,
        count: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    CausalMask(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Attention {
        q: Var,
        keys: Vec<Var>,
        values: Vec<Var>,
        heads: usize,
        probs: Vec<f32>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to the leaves that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn split_last(shape: &[usize]) -> (usize, usize) {
    let last = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / last.max(1);
    (rows, last)
}

fn accumulate(grads: &mut [Option<Vec<f32>>], v: Var, delta: Vec<f32>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(g, d)| *g += d),
        slot @ None => *slot = Some(delta),
    }
}

/// Gradient buffer of `v`, zero-filled on first use, for in-place
/// accumulation.
fn grad_slot(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut [f32] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn gelu_parts(x: f32) -> (f32, f32) {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    const K: f32 = 0.044_715;
    let u = C * (x + K * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * K * x * x);
    (y, dy)
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record an input. Gradients flow to it iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_requires_grad(false))
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if value.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::param(format!("scale factor {c} is not finite")));
        }
        let data = self.data(a).iter().map(|x| x * c).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("scale", value, Op::Scale(a, c), &[a])
    }

    /// Add a `[n]` vector to every row of `x[..., n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = split_last(self.shape(x));
        if self.shape(bias) != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.data(bias);
        let data = self
            .data(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        let value = Tensor::from_parts(self.shape(x).to_vec(), data);
        self.push("add_row", value, Op::AddRow(x, bias), &[x, bias])
    }

    /// `a[..., k] · b[k, n] -> [..., n]`; leading dims of `a` are batch rows.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() < 2 || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = split_last(sa);
        let n = sb[1];
        let mut out = vec![0.0; m * n];
        sgemm(
            m,
            k,
            n,
            1.0,
            self.data(a),
            Strides::rows(k),
            self.data(b),
            Strides::rows(n),
            0.0,
            &mut out,
            Strides::rows(n),
        );
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = n;
        self.push("matmul", Tensor::from_parts(shape, out), Op::MatMul(a, b), &[a, b])
    }

    /// `a[B, m, k] · b[B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dimension {
                op: "bmm",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (batch, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.data(a), self.data(b));
        for i in 0..batch {
            sgemm(
                m,
                k,
                n,
                1.0,
                &ad[i * m * k..],
                Strides::rows(k),
                &bd[i * k * n..],
                Strides::rows(n),
                0.0,
                &mut out[i * m * n..],
                Strides::rows(n),
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        self.push("bmm", value, Op::BatchMatMul(a, b), &[a, b])
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() < 2 {
            return Err(Error::Dimension {
                op: "transpose",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s.iter().product::<usize>() / (r * c);
        let src = self.data(a);
        let mut out = vec![0.0; src.len()];
        for b in 0..batch {
            let base = b * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = src[base + i * c + j];
                }
            }
        }
        let mut shape = s.to_vec();
        let n = shape.len();
        shape.swap(n - 2, n - 1);
        self.push("transpose", Tensor::from_parts(shape, out), Op::Transpose(a), &[a])
    }

    /// `[p, q, r, s] -> [p, r, q, s]`, used to move heads next to the batch axis.
    pub fn swap_mid(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::Dimension {
                op: "swap_mid",
                lhs: s.to_vec(),
                rhs: vec![4],
            });
        }
        let (p, q, r, w) = (s[0], s[1], s[2], s[3]);
        let out = swap_mid_data(self.data(a), p, q, r, w);
        let value = Tensor::from_parts(vec![p, r, q, w], out);
        self.push("swap_mid", value, Op::SwapMid(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).numel() || shape.contains(&0) {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let value = Tensor::from_parts(shape.to_vec(), self.data(a).to_vec());
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.data(a).iter().map(|&x| gelu_parts(x).0).collect();
        let value = Tensor::from_parts(self.shape(a).to_vec(), data);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// Softmax over the last axis of `x / temperature`.
    pub fn softmax(&mut self, x: Var, temperature: f32) -> Result<Var> {
        let out = softmax_rows(self.value(x), temperature)?;
        self.push("softmax", out, Op::Softmax { x, temperature }, &[x])
    }

    pub fn rmsnorm(&mut self, x: Var, weight: Var, eps: f32) -> Result<Var> {
        let (rows, d) = split_last(self.shape(x));
        if self.shape(weight) != [d] {
            return Err(Error::Dimension {
                op: "rmsnorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(weight).to_vec(),
            });
        }
        let (xd, w) = (self.data(x), self.data(weight));
        let mut out = vec![0.0; rows * d];
        let mut inv_rms = Vec::with_capacity(rows);
        for (row, dst) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + eps).sqrt();
            inv_rms.push(inv);
            for ((o, v), g) in dst.iter_mut().zip(row).zip(w) {
                *o = v * inv * g;
            }
        }
        let value = Tensor::from_parts(self.shape(x).to_vec(), out);
        let op = Op::RmsNorm { x, weight, inv_rms };
        self.push("rmsnorm", value, op, &[x, weight])
    }

    /// Mean negative log-likelihood of `targets` over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, vocab) = split_last(self.shape(logits));
        if targets.len() != rows || mask.len() != rows {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len(), mask.len()],
            });
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::param("cross_entropy: every position is masked"));
        }
        let ld = self.data(logits);
        let mut probs = vec![0.0; rows * vocab];
        let mut total = 0.0f64;
        for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
            if !m {
                continue;
            }
            if t >= vocab {
                return Err(Error::param(format!(
                    "cross_entropy: target {t} at row {r} out of range for vocabulary {vocab}"
                )));
            }
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let p = &mut probs[r * vocab..(r + 1) * vocab];
            let mut sum = 0.0f32;
            for (p, &x) in p.iter_mut().zip(row) {
                *p = (x - max).exp();
                sum += *p;
            }
            p.iter_mut().for_each(|p| *p /= sum);
            total += f64::from(max + sum.ln() - row[t]);
        }
        let loss = (total / count as f64) as f32;
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        self.push("cross_entropy", Tensor::scalar(loss), op, &[logits])
    }

    /// Row lookup: `table[V, d]` indexed by `ids`, output shape `lead ++ [d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize], lead: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        if st.len() != 2 || lead.iter().product::<usize>() != ids.len() {
            return Err(Error::Dimension {
                op: "gather",
                lhs: st.to_vec(),
                rhs: lead.to_vec(),
            });
        }
        let (v, d) = (st[0], st[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::param(format!("gather: index {bad} out of range for {v} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let mut shape = lead.to_vec();
        shape.push(d);
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push("gather", Tensor::from_parts(shape, out), op, &[table])
    }

    /// Mask attention scores `[..., tq, tk]` so query `i` only sees keys
    /// `j <= i + (tk - tq)`; the queries are the last `tq` positions.
    pub fn causal_mask(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() < 2 || s[s.len() - 1] < s[s.len() - 2] {
            return Err(Error::Dimension {
                op: "causal_mask",
                lhs: s.to_vec(),
                rhs: vec![],
            });
        }
        let (tq, tk) = (s[s.len() - 2], s[s.len() - 1]);
        let offset = tk - tq;
        let mut out = self.data(x).to_vec();
        for block in out.chunks_exact_mut(tq * tk) {
            for i in 0..tq {
                block[i * tk + i + offset + 1..(i + 1) * tk].fill(MASKED_SCORE);
            }
        }
        let value = Tensor::from_parts(s.to_vec(), out);
        self.push("causal_mask", value, Op::CausalMask(x), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::param("concat: no inputs"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::param(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let op = Op::Concat {
            parts: parts.to_vec(),
            axis,
        };
        self.push("concat", Tensor::from_parts(shape, out), op, parts)
    }

    /// Concatenate `[b, t_i, d]` tensors along the sequence axis.
    pub fn concat_seq(&mut self, parts: &[Var]) -> Result<Var> {
        self.concat(parts, 1)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(Error::param(format!(
                "slice: range {start}..{} invalid for axis {axis} of {s:?}",
                start + len
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let src = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * s[axis] + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let op = Op::Slice { x, axis, start };
        self.push("slice", Tensor::from_parts(shape, out), op, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: f64 = self.data(x).iter().map(|&v| f64::from(v)).sum();
        self.push("sum", Tensor::scalar(total as f32), Op::Sum(x), &[x])
    }

    /// Multi-head causal attention over a key/value cache held as a list of
    /// `[b, t_c, d]` chunks. Queries `q[b, tq, d]` are the last `tq`
    /// positions of the concatenated keys.
    pub fn attention(&mut self, q: Var, keys: &[Var], values: &[Var], heads: usize) -> Result<Var> {
        let sq = self.shape(q).to_vec();
        if sq.len() != 3 || heads == 0 || !sq[2].is_multiple_of(heads) {
            return Err(Error::Dimension {
                op: "attention",
                lhs: sq,
                rhs: vec![heads],
            });
        }
        if keys.is_empty() || keys.len() != values.len() {
            return Err(Error::param(
                "attention: key and value lists must be non-empty and equal length",
            ));
        }
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let mut total = 0;
        for (&k, &v) in keys.iter().zip(values) {
            let sk = self.shape(k);
            if sk.len() != 3 || sk[0] != b || sk[2] != d || self.shape(v) != sk {
                return Err(Error::Dimension {
                    op: "attention",
                    lhs: sq,
                    rhs: sk.to_vec(),
                });
            }
            total += sk[1];
        }
        if total < tq {
            return Err(Error::State(format!(
                "attention: {total} cached keys cannot cover {tq} queries"
            )));
        }
        let past = total - tq;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut probs = vec![0.0; b * heads * tq * total];
        let mut out = vec![0.0; b * tq * d];
        let qd = self.data(q);
        if let ([k], [v]) = (keys, values) {
            let (kd, vd) = (self.data(*k), self.data(*v));
            for bb in 0..b {
                for hh in 0..heads {
                    let p = &mut probs[(bb * heads + hh) * tq * total..][..tq * total];
                    let at = bb * total * d + hh * dh;
                    sgemm(
                        tq,
                        dh,
                        total,
                        scale,
                        &qd[bb * tq * d + hh * dh..],
                        Strides::rows(d),
                        &kd[at..],
                        Strides::transposed(d),
                        0.0,
                        p,
                        Strides::rows(total),
                    );
                    causal_softmax(p, total, past);
                    sgemm(
                        tq,
                        total,
                        dh,
                        1.0,
                        p,
                        Strides::rows(total),
                        &vd[at..],
                        Strides::rows(d),
                        0.0,
                        &mut out[bb * tq * d + hh * dh..],
                        Strides::rows(d),
                    );
                }
            }
        } else {
            // Many short chunks: per-position dot products and axpys avoid
            // both per-chunk GEMM calls and copying the cache.
            let mut off = 0;
            for &k in keys {
                let tk = self.shape(k)[1];
                let kd = self.data(k);
                visit(b, heads, tq, tk, off, past, |bb, hh, i, j| {
                    let qv = &qd[(bb * tq + i) * d + hh * dh..][..dh];
                    let kv = &kd[(bb * tk + j) * d + hh * dh..][..dh];
                    probs[((bb * heads + hh) * tq + i) * total + off + j] = scale * dot(qv, kv);
                });
                off += tk;
            }
            probs
                .chunks_exact_mut(tq * total)
                .for_each(|p| causal_softmax(p, total, past));
            let mut off = 0;
            for &v in values {
                let tk = self.shape(v)[1];
                let vd = self.data(v);
                visit(b, heads, tq, tk, off, past, |bb, hh, i, j| {
                    let w = probs[((bb * heads + hh) * tq + i) * total + off + j];
                    let vv = &vd[(bb * tk + j) * d + hh * dh..][..dh];
                    axpy(w, vv, &mut out[(bb * tq + i) * d + hh * dh..][..dh]);
                });
                off += tk;
            }
        }
        let op = Op::Attention {
            q,
            keys: keys.to_vec(),
            values: values.to_vec(),
            heads,
            probs,
        };
        let mut inputs = vec![q];
        inputs.extend_from_slice(keys);
        inputs.extend_from_slice(values);
        self.push("attention", Tensor::from_parts(sq, out), op, &inputs)
    }

    /// Reverse sweep from a single-element `loss`. Returns gradients for every
    /// leaf recorded with `requires_grad`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::param(format!(
                "backward needs a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { op: "backward" });
                }
                grads[i] = Some(g);
                continue;
            }
            self.backward_node(node, g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node, g: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let out_shape = node.value.shape();
        match &node.op {
            Op::Leaf => unreachable!("leaves are handled by the caller"),
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, c) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g.iter().map(|g| g * c).collect());
                }
            }
            Op::AddRow(x, bias) => {
                let n = self.value(*bias).numel();
                if self.needs(*bias) {
                    let mut d = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(d, g)| *d += g);
                    }
                    accumulate(grads, *bias, d);
                }
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = split_last(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    sgemm(
                        m,
                        n,
                        k,
                        1.0,
                        &g,
                        Strides::rows(n),
                        self.data(*b),
                        Strides::transposed(n),
                        1.0,
                        grad_slot(grads, *a, m * k),
                        Strides::rows(k),
                    );
                }
                if self.needs(*b) {
                    sgemm(
                        k,
                        m,
                        n,
                        1.0,
                        self.data(*a),
                        Strides::transposed(k),
                        &g,
                        Strides::rows(n),
                        1.0,
                        grad_slot(grads, *b, k * n),
                        Strides::rows(n),
                    );
                }
            }
            Op::BatchMatMul(a, b) => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = self.shape(*b)[2];
                if self.needs(*a) {
                    let mut d = vec![0.0; batch * m * k];
                    for i in 0..batch {
                        sgemm(
                            m,
                            n,
                            k,
                            1.0,
                            &g[i * m * n..],
                            Strides::rows(n),
                            &self.data(*b)[i * k * n..],
                            Strides::transposed(n),
                            0.0,
                            &mut d[i * m * k..],
                            Strides::rows(k),
                        );
                    }
                    accumulate(grads, *a, d);
                }
                if self.needs(*b) {
                    let mut d = vec![0.0; batch * k * n];
                    for i in 0..batch {
                        sgemm(
                            k,
                            m,
                            n,
                            1.0,
                            &self.data(*a)[i * m * k..],
                            Strides::transposed(k),
                            &g[i * m * n..],
                            Strides::rows(n),
                            0.0,
                            &mut d[i * k * n..],
                            Strides::rows(n),
                        );
                    }
                    accumulate(grads, *b, d);
                }
            }
            Op::Transpose(a) => {
                if self.needs(*a) {
                    // The output is [.., c, r]; transposing it back gives the input layout.
                    let (c, r) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    let mut d = vec![0.0; g.len()];
                    for (base, blk) in g.chunks_exact(r * c).enumerate() {
                        let base = base * r * c;
                        for i in 0..c {
                            for j in 0..r {
                                d[base + j * c + i] = blk[i * r + j];
                            }
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::SwapMid(a) => {
                if self.needs(*a) {
                    let s = out_shape;
                    let d = swap_mid_data(&g, s[0], s[1], s[2], s[3]);
                    accumulate(grads, *a, d);
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let d = g.iter().zip(self.data(*a)).map(|(g, &x)| g * gelu_parts(x).1).collect();
                    accumulate(grads, *a, d);
                }
            }
            Op::Softmax { x, temperature } => {
                if self.needs(*x) {
                    let (_, n) = split_last(out_shape);
                    let y = node.value.data();
                    let mut d = vec![0.0; g.len()];
                    for ((dr, gr), yr) in d.chunks_exact_mut(n).zip(g.chunks_exact(n)).zip(y.chunks_exact(n)) {
                        let dot: f32 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for ((d, g), y) in dr.iter_mut().zip(gr).zip(yr) {
                            *d = y * (g - dot) / temperature;
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::RmsNorm { x, weight, inv_rms } => {
                let (_, dim) = split_last(out_shape);
                let xd = self.data(*x);
                let w = self.data(*weight);
                let mut dx = vec![0.0; xd.len()];
                let mut dw = vec![0.0; dim];
                for (r, ((xr, gr), dxr)) in xd
                    .chunks_exact(dim)
                    .zip(g.chunks_exact(dim))
                    .zip(dx.chunks_exact_mut(dim))
                    .enumerate()
                {
                    let inv = inv_rms[r];
                    let mut dot = 0.0;
                    for j in 0..dim {
                        let xhat = xr[j] * inv;
                        dw[j] += gr[j] * xhat;
                        dot += gr[j] * w[j] * xhat;
                    }
                    let mean = dot / dim as f32;
                    for j in 0..dim {
                        dxr[j] = inv * (gr[j] * w[j] - xr[j] * inv * mean);
                    }
                }
                if self.needs(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.needs(*weight) {
                    accumulate(grads, *weight, dw);
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                probs,
                count,
            } => {
                if self.needs(*logits) {
                    let (_, vocab) = split_last(self.shape(*logits));
                    let s = g[0] / *count as f32;
                    let mut d = vec![0.0; probs.len()];
                    for (r, (&t, &m)) in targets.iter().zip(mask).enumerate() {
                        if !m {
                            continue;
                        }
                        let dr = &mut d[r * vocab..(r + 1) * vocab];
                        for (d, p) in dr.iter_mut().zip(&probs[r * vocab..(r + 1) * vocab]) {
                            *d = p * s;
                        }
                        dr[t] -= s;
                    }
                    accumulate(grads, *logits, d);
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let d = self.shape(*table)[1];
                    let mut dt = vec![0.0; self.value(*table).numel()];
                    for (&i, row) in ids.iter().zip(g.chunks_exact(d)) {
                        dt[i * d..(i + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    accumulate(grads, *table, dt);
                }
            }
            Op::CausalMask(x) => {
                if self.needs(*x) {
                    let (tq, tk) = (out_shape[out_shape.len() - 2], out_shape[out_shape.len() - 1]);
                    let offset = tk - tq;
                    let mut d = g;
                    for block in d.chunks_exact_mut(tq * tk) {
                        for i in 0..tq {
                            block[i * tk + i + offset + 1..(i + 1) * tk].fill(0.0);
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Concat { parts, axis } => {
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[axis + 1..].iter().product();
                let total = out_shape[*axis] * inner;
                let mut off = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&g[o * total + off..o * total + off + len]);
                        }
                        accumulate(grads, p, d);
                    }
                    off += len;
                }
            }
            Op::Slice { x, axis, start } => {
                if self.needs(*x) {
                    let s = self.shape(*x);
                    let outer: usize = s[..*axis].iter().product();
                    let inner: usize = s[axis + 1..].iter().product();
                    let len = out_shape[*axis] * inner;
                    let d = grad_slot(grads, *x, self.value(*x).numel());
                    for o in 0..outer {
                        let base = (o * s[*axis] + start) * inner;
                        d[base..base + len]
                            .iter_mut()
                            .zip(&g[o * len..(o + 1) * len])
                            .for_each(|(d, g)| *d += g);
                    }
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    accumulate(grads, *x, vec![g[0]; self.value(*x).numel()]);
                }
            }
            Op::Attention {
                q,
                keys,
                values,
                heads,
                probs,
            } => self.attention_backward(*q, keys, values, *heads, probs, &g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        keys: &[Var],
        values: &[Var],
        heads: usize,
        probs: &[f32],
        g: &[f32],
        grads: &mut [Option<Vec<f32>>],
    ) {
        let sq = self.shape(q);
        let (b, tq, d) = (sq[0], sq[1], sq[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let total: usize = keys.iter().map(|&k| self.shape(k)[1]).sum();
        let past = total - tq;
        let qd = self.data(q);
        let mut dq = vec![0.0; b * tq * d];
        if let ([k], [v]) = (keys, values) {
            let (kd, vd) = (self.data(*k), self.data(*v));
            let mut dk = vec![0.0; b * total * d];
            let mut dv = vec![0.0; b * total * d];
            let mut ds = vec![0.0; tq * total];
            for bb in 0..b {
                for hh in 0..heads {
                    let p = &probs[(bb * heads + hh) * tq * total..][..tq * total];
                    let go = &g[bb * tq * d + hh * dh..];
                    let qv = &qd[bb * tq * d + hh * dh..];
                    let at = bb * total * d + hh * dh;
                    sgemm(
                        tq,
                        dh,
                        total,
                        1.0,
                        go,
                        Strides::rows(d),
                        &vd[at..],
                        Strides::transposed(d),
                        0.0,
                        &mut ds,
                        Strides::rows(total),
                    );
                    // dV += Pᵀ · dO
                    sgemm(
                        total,
                        tq,
                        dh,
                        1.0,
                        p,
                        Strides::transposed(total),
                        go,
                        Strides::rows(d),
                        1.0,
                        &mut dv[at..],
                        Strides::rows(d),
                    );
                    softmax_backward(&mut ds, p, total);
                    sgemm(
                        tq,
                        total,
                        dh,
                        scale,
                        &ds,
                        Strides::rows(total),
                        &kd[at..],
                        Strides::rows(d),
                        1.0,
                        &mut dq[bb * tq * d + hh * dh..],
                        Strides::rows(d),
                    );
                    sgemm(
                        total,
                        tq,
                        dh,
                        scale,
                        &ds,
                        Strides::transposed(total),
                        qv,
                        Strides::rows(d),
                        1.0,
                        &mut dk[at..],
                        Strides::rows(d),
                    );
                }
            }
            if self.needs(*k) {
                accumulate(grads, *k, dk);
            }
            if self.needs(*v) {
                accumulate(grads, *v, dv);
            }
        } else {
            let mut ds = vec![0.0; probs.len()];
            let mut off = 0;
            for &v in values {
                let tk = self.shape(v)[1];
                let vd = self.data(v);
                let mut dv = self.needs(v).then(|| grad_slot(grads, v, b * tk * d));
                visit(b, heads, tq, tk, off, past, |bb, hh, i, j| {
                    let at = ((bb * heads + hh) * tq + i) * total + off + j;
                    let go = &g[(bb * tq + i) * d + hh * dh..][..dh];
                    let vr = (bb * tk + j) * d + hh * dh;
                    ds[at] = dot(go, &vd[vr..][..dh]);
                    if let Some(dv) = dv.as_deref_mut() {
                        axpy(probs[at], go, &mut dv[vr..][..dh]);
                    }
                });
                off += tk;
            }
            for (dr, pr) in ds.chunks_exact_mut(tq * total).zip(probs.chunks_exact(tq * total)) {
                softmax_backward(dr, pr, total);
            }
            let mut off = 0;
            for &k in keys {
                let tk = self.shape(k)[1];
                let kd = self.data(k);
                let mut dk = self.needs(k).then(|| grad_slot(grads, k, b * tk * d));
                visit(b, heads, tq, tk, off, past, |bb, hh, i, j| {
                    let w = scale * ds[((bb * heads + hh) * tq + i) * total + off + j];
                    let qr = (bb * tq + i) * d + hh * dh;
                    let kr = (bb * tk + j) * d + hh * dh;
                    axpy(w, &kd[kr..][..dh], &mut dq[qr..][..dh]);
                    if let Some(dk) = dk.as_deref_mut() {
                        axpy(w, &qd[qr..][..dh], &mut dk[kr..][..dh]);
                    }
                });
                off += tk;
            }
        }
        if self.needs(q) {
            accumulate(grads, q, dq);
        }
    }
}

/// Call `f(b, h, i, j)` for every query row `i` and every row `j` of a key
/// chunk starting at `off` that the query may attend to.
fn visit(
    b: usize,
    heads: usize,
    tq: usize,
    tk: usize,
    off: usize,
    past: usize,
    mut f: impl FnMut(usize, usize, usize, usize),
) {
    for bb in 0..b {
        for hh in 0..heads {
            for i in 0..tq {
                let visible = (past + i + 1).saturating_sub(off).min(tk);
                for j in 0..visible {
                    f(bb, hh, i, j);
                }
            }
        }
    }
}

/// Row-wise softmax over the first `past + i + 1` entries of row `i`; the
/// rest are zeroed.
fn causal_softmax(p: &mut [f32], total: usize, past: usize) {
    for (i, row) in p.chunks_exact_mut(total).enumerate() {
        let (vis, hidden) = row.split_at_mut(past + i + 1);
        let max = vis.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for s in vis.iter_mut() {
            *s = (*s - max).exp();
            sum += *s;
        }
        vis.iter_mut().for_each(|s| *s /= sum);
        hidden.fill(0.0);
    }
}

/// `ds ← p ⊙ (ds − ⟨ds, p⟩)` per row.
fn softmax_backward(ds: &mut [f32], p: &[f32], total: usize) {
    for (dr, pr) in ds.chunks_exact_mut(total).zip(p.chunks_exact(total)) {
        let dot: f32 = dr.iter().zip(pr).map(|(a, b)| a * b).sum();
        for (d, &p) in dr.iter_mut().zip(pr) {
            *d = p * (*d - dot);
        }
    }
}

fn swap_mid_data(src: &[f32], p: usize, q: usize, r: usize, w: usize) -> Vec<f32> {
    let mut out = vec![0.0; src.len()];
    for a in 0..p {
        for b in 0..q {
            for c in 0..r {
                let from = ((a * q + b) * r + c) * w;
                let to = ((a * r + c) * q + b) * w;
                out[to..to + w].copy_from_slice(&src[from..from + w]);
            }
        }
    }
    out
}

/// Softmax of `x / temperature` over the last axis, outside any tape.
pub fn softmax_rows(x: &Tensor, temperature: f32) -> Result<Tensor> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::param(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let (_, n) = split_last(x.shape());
    let mut out = x.data().to_vec();
    for row in out.chunks_exact_mut(n) {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = ((*v - max) / temperature).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}
