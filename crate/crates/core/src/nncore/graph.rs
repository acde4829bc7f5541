//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value plus whatever it needs
//! for the backward pass. Node ids are creation-ordered, so reverse id order
//! is a valid topological order for backpropagation.

use super::kernels::{axpy, dot, gemm_nn, gemm_nt, gemm_tn};
use super::rng::DropoutRng;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One expert's contribution to [`Graph::combine`].
#[derive(Debug, Clone)]
pub struct ExpertRows {
    pub expert: usize,
    /// `[tokens.len(), d]` expert outputs.
    pub rows: NodeId,
    /// Flat token index for each output row.
    pub tokens: Vec<usize>,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddBroadcast {
        a: NodeId,
        b: NodeId,
    },
    Mul {
        a: NodeId,
        b: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    Gelu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Tanh {
        a: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax {
        a: NodeId,
        outer: usize,
        n: usize,
        inner: usize,
    },
    Dropout {
        a: NodeId,
        mask: Vec<f64>,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        row_seq: Vec<usize>,
        seq_len: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    GatherRows {
        a: NodeId,
        idx: Vec<usize>,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    Reshape {
        a: NodeId,
    },
    KronGate {
        k: NodeId,
        eq: NodeId,
        we: NodeId,
        scale: f64,
        proj: Vec<f64>,
    },
    TopK {
        p: NodeId,
        k: usize,
        selected: Vec<usize>,
        sums: Vec<f64>,
    },
    Combine {
        parts: Vec<ExpertRows>,
        weights: NodeId,
    },
    Mse {
        pred: NodeId,
        target: NodeId,
    },
    Sum {
        a: NodeId,
    },
    DotConst {
        a: NodeId,
        w: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Gradient tape.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    mode: Mode,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        Some((&c, lead)) => (lead.iter().product(), c),
        None => (1, 1),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    const A: f64 = 0.044_715;
    let u = C * (x + A * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x);
    (y, dy)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Row-wise top-k selection, largest first, ties toward the lower index.
pub fn select_topk(row: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

impl Default for Graph {
    fn default() -> Self {
        Self::new(Mode::Eval)
    }
}

impl Graph {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mode,
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        let n = &self.nodes[id.0];
        Tensor::new(&n.shape, n.value.clone()).expect("node shape is consistent")
    }

    /// Gradient of the last `backward` root with respect to `id`.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|i| self.nodes[i.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<NodeId> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::Leaf, false))
    }

    /// `y = x·W + b` over the last axis of `x`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (rows, n) = rows_cols(&xs);
        if ws.len() != 2 || ws[0] != n || xs.is_empty() {
            return Err(Error::shape("linear", &xs, &ws));
        }
        let m = ws[1];
        if let Some(b) = b {
            if self.shape(b) != [m] {
                return Err(Error::shape("linear bias", &ws, self.shape(b)));
            }
        }
        let mut out = vec![0.0; rows * m];
        if let Some(b) = b {
            let bv = self.value(b);
            for row in out.chunks_exact_mut(m) {
                row.copy_from_slice(bv);
            }
        }
        gemm_nn(self.value(x), self.value(w), &mut out, rows, n, m);
        let mut shape = xs;
        *shape.last_mut().unwrap() = m;
        let mut ids = vec![x, w];
        ids.extend(b);
        let rg = self.rg(&ids);
        Ok(self.push(shape, out, Op::Linear { x, w, b }, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add { a, b }, rg))
    }

    /// `a + b` where `b`'s shape equals the trailing dimensions of `a`.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add_broadcast", sa, sb));
        }
        let bv = self.value(b);
        let chunk = bv.len().max(1);
        let mut out = self.value(a).to_vec();
        for row in out.chunks_exact_mut(chunk) {
            for (o, &x) in row.iter_mut().zip(bv) {
                *o += x;
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddBroadcast { a, b }, rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = self.value(a).iter().map(|x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale { a, c }, rg)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| gelu_parts(x).0).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu { a }, rg)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Sigmoid { a }, rg)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).iter().map(|x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh { a }, rg)
    }

    /// Normalise the last axis to zero mean / unit variance, then `γ·x̂ + β`.
    pub fn layer_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let (rows, d) = rows_cols(&xs);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::shape("layer_norm", &xs, self.shape(gamma)));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = vec![0.0; rows * d];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = &self.value(x)[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            xs,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: NodeId, axis: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(Error::Config(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let input = self.value(a);
        if let Some(bad) = input.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("softmax input contains {bad}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; input.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let max = (0..n).map(|j| input[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..n {
                    let e = (input[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..n {
                    out[at(j)] /= sum;
                }
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                a,
                outer,
                n,
                inner,
            },
            rg,
        ))
    }

    /// Inverted dropout. Identity (same node) in eval mode or with `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut DropoutRng) -> Result<NodeId> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout p must be in [0, 1), got {p}")));
        }
        if self.mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.next_unit() < p { 0.0 } else { keep })
            .collect();
        let out = self
            .value(a)
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, rg))
    }

    /// Scaled dot-product attention with per-row queries.
    ///
    /// `q` is `[rows, d]`; `k`/`v` are `[seqs, T, d]`; query row `r` attends
    /// over all `T` positions of sequence `row_seq[r]`. Heads split `d` evenly.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        row_seq: Vec<usize>,
        heads: usize,
    ) -> Result<NodeId> {
        let (qs, ks) = (self.shape(q).to_vec(), self.shape(k).to_vec());
        if ks.len() != 3 || self.shape(v) != ks.as_slice() {
            return Err(Error::shape("attention k/v", &ks, self.shape(v)));
        }
        let (seqs, t_len, d) = (ks[0], ks[1], ks[2]);
        let (rows, qd) = rows_cols(&qs);
        if qs.len() != 2 || qd != d || row_seq.len() != rows {
            return Err(Error::shape("attention q", &qs, &ks));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d} is not divisible by {heads} heads"
            )));
        }
        if let Some(&s) = row_seq.iter().find(|&&s| s >= seqs) {
            return Err(Error::Config(format!("query row maps to sequence {s} of {seqs}")));
        }
        let dh = d / heads;
        let inv = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; rows * heads * t_len];
        let mut out = vec![0.0; rows * d];
        let mut scores = vec![0.0; t_len];
        for r in 0..rows {
            let s = row_seq[r];
            for h in 0..heads {
                let qh = &qv[r * d + h * dh..r * d + (h + 1) * dh];
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate() {
                    let off = (s * t_len + j) * d + h * dh;
                    *sc = dot(qh, &kv[off..off + dh]) * inv;
                    max = max.max(*sc);
                }
                let mut sum = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let p_row = &mut probs[(r * heads + h) * t_len..(r * heads + h + 1) * t_len];
                let o = &mut out[r * d + h * dh..r * d + (h + 1) * dh];
                for j in 0..t_len {
                    let pj = scores[j] / sum;
                    p_row[j] = pj;
                    let off = (s * t_len + j) * d + h * dh;
                    axpy(pj, &vv[off..off + dh], o);
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![rows, d],
            out,
            Op::Attention {
                q,
                k,
                v,
                row_seq,
                seq_len: t_len,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Select rows (flattened over all leading axes) into `[idx.len(), cols]`.
    pub fn gather_rows(&mut self, a: NodeId, idx: Vec<usize>) -> Result<NodeId> {
        let (rows, c) = rows_cols(self.shape(a));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Config(format!("gather row {bad} out of {rows}")));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&av[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows { a, idx }, rg))
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let shape = self.shape(a).to_vec();
        let (rows, c) = rows_cols(&shape);
        if start + len > c {
            return Err(Error::shape("slice_cols", &shape, &[start, len]));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av[r * c + start..r * c + start + len]);
        }
        let mut new_shape = shape;
        *new_shape.last_mut().unwrap() = len;
        let rg = self.rg(&[a]);
        Ok(self.push(new_shape, out, Op::SliceCols { a, start }, rg))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            return Err(Error::shape("reshape", self.shape(a), shape));
        }
        let value = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(shape.to_vec(), value, Op::Reshape { a }, rg))
    }

    /// Attention-gate scores `S[n,e] = scale · Σ_ij W_e[i·d+j, e] · K[n,i] · EQ[j,e]`.
    ///
    /// Evaluated through the factored form `S = scale · K · P` with
    /// `P[i,e] = Σ_j W_e[i·d+j, e] · EQ[j,e]`, which never materialises the
    /// `d²`-wide Kronecker features.
    pub fn kron_gate(&mut self, k: NodeId, eq: NodeId, we: NodeId, scale: f64) -> Result<NodeId> {
        let ks = self.shape(k).to_vec();
        let (rows, d) = rows_cols(&ks);
        let eqs = self.shape(eq).to_vec();
        if eqs.len() != 2 || eqs[0] != d {
            return Err(Error::shape("kron_gate queries", &ks, &eqs));
        }
        let e = eqs[1];
        if self.shape(we) != [d * d, e] {
            return Err(Error::shape("kron_gate projection", self.shape(we), &[d * d, e]));
        }
        let (eqv, wev) = (self.value(eq), self.value(we));
        let mut proj = vec![0.0; d * e];
        for i in 0..d {
            for j in 0..d {
                let wrow = &wev[(i * d + j) * e..(i * d + j + 1) * e];
                let qrow = &eqv[j * e..(j + 1) * e];
                for c in 0..e {
                    proj[i * e + c] += wrow[c] * qrow[c];
                }
            }
        }
        let mut out = vec![0.0; rows * e];
        gemm_nn(self.value(k), &proj, &mut out, rows, d, e);
        for v in out.iter_mut() {
            *v *= scale;
        }
        let mut shape = ks;
        *shape.last_mut().unwrap() = e;
        let rg = self.rg(&[k, eq, we]);
        Ok(self.push(
            shape,
            out,
            Op::KronGate {
                k,
                eq,
                we,
                scale,
                proj,
            },
            rg,
        ))
    }

    /// Keep the `k` largest entries per row of `p` and renormalise them to sum
    /// to one. With `k` equal to the row width the op is the identity.
    pub fn topk_renormalize(&mut self, p: NodeId, k: usize) -> Result<NodeId> {
        let shape = self.shape(p).to_vec();
        let (rows, e) = rows_cols(&shape);
        if k == 0 || k > e {
            return Err(Error::Config(format!("top-k needs 1 <= k <= {e}, got {k}")));
        }
        let pv = self.value(p);
        let mut selected = Vec::with_capacity(rows * k);
        let mut sums = vec![1.0; rows];
        let mut out = vec![0.0; rows * e];
        for r in 0..rows {
            let row = &pv[r * e..(r + 1) * e];
            let sel = select_topk(row, k);
            if k == e {
                out[r * e..(r + 1) * e].copy_from_slice(row);
            } else {
                let mut ascending = sel.clone();
                ascending.sort_unstable();
                let sum: f64 = ascending.iter().map(|&i| row[i]).sum();
                if !(sum > 0.0) {
                    return Err(Error::Numeric(format!(
                        "top-k survivors of row {r} sum to {sum}"
                    )));
                }
                sums[r] = sum;
                for &i in &sel {
                    out[r * e + i] = row[i] / sum;
                }
            }
            selected.extend(sel);
        }
        let rg = self.rg(&[p]);
        Ok(self.push(
            shape,
            out,
            Op::TopK {
                p,
                k,
                selected,
                sums,
            },
            rg,
        ))
    }

    /// Indices chosen by a [`Graph::topk_renormalize`] node, `k` per row.
    pub fn topk_selection(&self, id: NodeId) -> Option<(&[usize], usize)> {
        match &self.nodes[id.0].op {
            Op::TopK { selected, k, .. } => Some((selected, *k)),
            _ => None,
        }
    }

    /// Sparse weighted sum: `out[t] = Σ_parts weights[t, expert] · rows[r]`
    /// for every row `r` mapped to token `t`. Parts are accumulated in the
    /// order given.
    pub fn combine(&mut self, parts: Vec<ExpertRows>, weights: NodeId) -> Result<NodeId> {
        let ws = self.shape(weights).to_vec();
        let (n_tokens, n_experts) = rows_cols(&ws);
        let mut d = None;
        for part in &parts {
            let rs = self.shape(part.rows);
            let (r, c) = rows_cols(rs);
            if r != part.tokens.len() || d.is_some_and(|d| d != c) || part.expert >= n_experts {
                return Err(Error::shape("combine", rs, &ws));
            }
            if part.tokens.iter().any(|&t| t >= n_tokens) {
                return Err(Error::Config("combine token index out of range".into()));
            }
            d = Some(c);
        }
        let d = d.ok_or_else(|| Error::Config("combine needs at least one part".into()))?;
        let mut out = vec![0.0; n_tokens * d];
        let wv = self.value(weights);
        for part in &parts {
            let rv = self.value(part.rows);
            for (r, &t) in part.tokens.iter().enumerate() {
                let w = wv[t * n_experts + part.expert];
                axpy(w, &rv[r * d..(r + 1) * d], &mut out[t * d..(t + 1) * d]);
            }
        }
        let mut ids: Vec<NodeId> = parts.iter().map(|p| p.rows).collect();
        ids.push(weights);
        let rg = self.rg(&ids);
        Ok(self.push(vec![n_tokens, d], out, Op::Combine { parts, weights }, rg))
    }

    /// Mean over all elements of `(pred - target)²`.
    pub fn mse(&mut self, pred: NodeId, target: NodeId) -> Result<NodeId> {
        if self.shape(pred) != self.shape(target) {
            return Err(Error::shape("mse", self.shape(pred), self.shape(target)));
        }
        let n = self.value(pred).len().max(1) as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(self.value(target))
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![], vec![loss], Op::Mse { pred, target }, rg))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.value(a).iter().sum();
        let rg = self.rg(&[a]);
        self.push(vec![], vec![s], Op::Sum { a }, rg)
    }

    /// `Σ a ⊙ w` for a fixed weight vector.
    pub fn dot_const(&mut self, a: NodeId, w: Vec<f64>) -> Result<NodeId> {
        if w.len() != self.value(a).len() {
            return Err(Error::shape("dot_const", self.shape(a), &[w.len()]));
        }
        let s = dot(self.value(a), &w);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![], vec![s], Op::DotConst { a, w }, rg))
    }

    /// Backpropagate from `root`, seeding its gradient with ones.
    pub fn backward(&mut self, root: NodeId) {
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![1.0; self.nodes[root.0].value.len()]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = grads;
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let val = |id: NodeId| nodes[id.0].value.as_slice();
        // Gradient buffer for `id`, allocated on first touch; None if `id`
        // does not need a gradient.
        let mut acc = |id: NodeId, f: &mut dyn FnMut(&mut [f64])| {
            let n = &nodes[id.0];
            if !n.requires_grad {
                return;
            }
            let buf = grads[id.0].get_or_insert_with(|| vec![0.0; n.value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let (rows, n) = rows_cols(&nodes[x.0].shape);
                let m = *node.shape.last().unwrap();
                acc(*x, &mut |dx| gemm_nt(g, val(*w), dx, rows, n, m));
                acc(*w, &mut |dw| gemm_tn(val(*x), g, dw, rows, n, m));
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks_exact(m) {
                            for (d, &gv) in db.iter_mut().zip(row) {
                                *d += gv;
                            }
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    acc(*id, &mut |d| axpy(1.0, g, d));
                }
            }
            Op::AddBroadcast { a, b } => {
                acc(*a, &mut |d| axpy(1.0, g, d));
                acc(*b, &mut |d| {
                    let c = d.len().max(1);
                    for row in g.chunks_exact(c) {
                        axpy(1.0, row, d);
                    }
                });
            }
            Op::Mul { a, b } => {
                acc(*a, &mut |d| {
                    for ((dv, &gv), &bv) in d.iter_mut().zip(g).zip(val(*b)) {
                        *dv += gv * bv;
                    }
                });
                acc(*b, &mut |d| {
                    for ((dv, &gv), &av) in d.iter_mut().zip(g).zip(val(*a)) {
                        *dv += gv * av;
                    }
                });
            }
            Op::Scale { a, c } => acc(*a, &mut |d| axpy(*c, g, d)),
            Op::Gelu { a } => acc(*a, &mut |d| {
                for ((dv, &gv), &x) in d.iter_mut().zip(g).zip(val(*a)) {
                    *dv += gv * gelu_parts(x).1;
                }
            }),
            Op::Sigmoid { a } => acc(*a, &mut |d| {
                for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(&node.value) {
                    *dv += gv * y * (1.0 - y);
                }
            }),
            Op::Tanh { a } => acc(*a, &mut |d| {
                for ((dv, &gv), &y) in d.iter_mut().zip(g).zip(&node.value) {
                    *dv += gv * (1.0 - y * y);
                }
            }),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (rows, dim) = rows_cols(&node.shape);
                let gv = val(*gamma);
                acc(*x, &mut |dx| {
                    let mut dxhat = vec![0.0; dim];
                    for r in 0..rows {
                        let gr = &g[r * dim..(r + 1) * dim];
                        let hr = &xhat[r * dim..(r + 1) * dim];
                        for j in 0..dim {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / dim as f64;
                        let mean_dh = dot(&dxhat, hr) / dim as f64;
                        for j in 0..dim {
                            dx[r * dim + j] += rstd[r] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                });
                acc(*gamma, &mut |dg| {
                    for (gr, hr) in g.chunks_exact(dim).zip(xhat.chunks_exact(dim)) {
                        for j in 0..dim {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                });
                acc(*beta, &mut |db| {
                    for gr in g.chunks_exact(dim) {
                        axpy(1.0, gr, db);
                    }
                });
            }
            Op::Softmax {
                a,
                outer,
                n,
                inner,
            } => {
                let y = &node.value;
                acc(*a, &mut |d| {
                    for o in 0..*outer {
                        for i in 0..*inner {
                            let at = |j: usize| o * n * inner + j * inner + i;
                            let s: f64 = (0..*n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*n {
                                d[at(j)] += y[at(j)] * (g[at(j)] - s);
                            }
                        }
                    }
                });
            }
            Op::Dropout { a, mask } => acc(*a, &mut |d| {
                for ((dv, &gv), &m) in d.iter_mut().zip(g).zip(mask) {
                    *dv += gv * m;
                }
            }),
            Op::Attention {
                q,
                k,
                v,
                row_seq,
                seq_len,
                heads,
                probs,
            } => {
                let (t_len, heads) = (*seq_len, *heads);
                let d = *nodes[k.0].shape.last().unwrap();
                let dh = d / heads;
                let inv = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let rows = row_seq.len();
                // Score gradients per (row, head, position).
                let mut ds = vec![0.0; rows * heads * t_len];
                let mut dp = vec![0.0; t_len];
                for r in 0..rows {
                    let s = row_seq[r];
                    for h in 0..heads {
                        let go = &g[r * d + h * dh..r * d + (h + 1) * dh];
                        let p_row = &probs[(r * heads + h) * t_len..(r * heads + h + 1) * t_len];
                        for (j, dpj) in dp.iter_mut().enumerate() {
                            let off = (s * t_len + j) * d + h * dh;
                            *dpj = dot(go, &vv[off..off + dh]);
                        }
                        let mix = dot(&dp, p_row);
                        let ds_row = &mut ds[(r * heads + h) * t_len..(r * heads + h + 1) * t_len];
                        for j in 0..t_len {
                            ds_row[j] = p_row[j] * (dp[j] - mix) * inv;
                        }
                    }
                }
                acc(*v, &mut |dv| {
                    for r in 0..rows {
                        let s = row_seq[r];
                        for h in 0..heads {
                            let go = &g[r * d + h * dh..r * d + (h + 1) * dh];
                            for j in 0..t_len {
                                let pj = probs[(r * heads + h) * t_len + j];
                                let off = (s * t_len + j) * d + h * dh;
                                axpy(pj, go, &mut dv[off..off + dh]);
                            }
                        }
                    }
                });
                acc(*q, &mut |dq| {
                    for r in 0..rows {
                        let s = row_seq[r];
                        for h in 0..heads {
                            let dq_h = &mut dq[r * d + h * dh..r * d + (h + 1) * dh];
                            for j in 0..t_len {
                                let off = (s * t_len + j) * d + h * dh;
                                axpy(ds[(r * heads + h) * t_len + j], &kv[off..off + dh], dq_h);
                            }
                        }
                    }
                });
                acc(*k, &mut |dk| {
                    for r in 0..rows {
                        let s = row_seq[r];
                        for h in 0..heads {
                            let qh = &qv[r * d + h * dh..r * d + (h + 1) * dh];
                            for j in 0..t_len {
                                let off = (s * t_len + j) * d + h * dh;
                                axpy(ds[(r * heads + h) * t_len + j], qh, &mut dk[off..off + dh]);
                            }
                        }
                    }
                });
            }
            Op::GatherRows { a, idx } => acc(*a, &mut |d| {
                let c = *node.shape.last().unwrap();
                for (r, &i) in idx.iter().enumerate() {
                    axpy(1.0, &g[r * c..(r + 1) * c], &mut d[i * c..(i + 1) * c]);
                }
            }),
            Op::SliceCols { a, start } => acc(*a, &mut |d| {
                let len = *node.shape.last().unwrap();
                let c = *nodes[a.0].shape.last().unwrap();
                for (r, gr) in g.chunks_exact(len).enumerate() {
                    axpy(1.0, gr, &mut d[r * c + start..r * c + start + len]);
                }
            }),
            Op::Reshape { a } => acc(*a, &mut |d| axpy(1.0, g, d)),
            Op::KronGate {
                k,
                eq,
                we,
                scale,
                proj,
            } => {
                let (rows, dim) = rows_cols(&nodes[k.0].shape);
                let e = *node.shape.last().unwrap();
                acc(*k, &mut |dk| {
                    let mut tmp = vec![0.0; rows * dim];
                    gemm_nt(g, proj, &mut tmp, rows, dim, e);
                    axpy(*scale, &tmp, dk);
                });
                // dP = scale · Kᵀ g, then chain into W_e and EQ.
                let mut dproj = vec![0.0; dim * e];
                gemm_tn(val(*k), g, &mut dproj, rows, dim, e);
                for v in dproj.iter_mut() {
                    *v *= scale;
                }
                let (eqv, wev) = (val(*eq), val(*we));
                acc(*we, &mut |dwe| {
                    for i in 0..dim {
                        for j in 0..dim {
                            for c in 0..e {
                                dwe[(i * dim + j) * e + c] += dproj[i * e + c] * eqv[j * e + c];
                            }
                        }
                    }
                });
                acc(*eq, &mut |deq| {
                    for i in 0..dim {
                        for j in 0..dim {
                            for c in 0..e {
                                deq[j * e + c] += dproj[i * e + c] * wev[(i * dim + j) * e + c];
                            }
                        }
                    }
                });
            }
            Op::TopK {
                p,
                k,
                selected,
                sums,
            } => {
                let (rows, e) = rows_cols(&node.shape);
                let k = *k;
                acc(*p, &mut |dp| {
                    for r in 0..rows {
                        let sel = &selected[r * k..(r + 1) * k];
                        if k == e {
                            for &i in sel {
                                dp[r * e + i] += g[r * e + i];
                            }
                            continue;
                        }
                        let w = &node.value[r * e..(r + 1) * e];
                        let mix: f64 = sel.iter().map(|&i| g[r * e + i] * w[i]).sum();
                        for &i in sel {
                            dp[r * e + i] += (g[r * e + i] - mix) / sums[r];
                        }
                    }
                });
            }
            Op::Combine { parts, weights } => {
                let (_, n_experts) = rows_cols(&nodes[weights.0].shape);
                let d = *node.shape.last().unwrap();
                let wv = val(*weights);
                for part in parts {
                    acc(part.rows, &mut |dr| {
                        for (r, &t) in part.tokens.iter().enumerate() {
                            let w = wv[t * n_experts + part.expert];
                            axpy(w, &g[t * d..(t + 1) * d], &mut dr[r * d..(r + 1) * d]);
                        }
                    });
                }
                acc(*weights, &mut |dw| {
                    for part in parts {
                        let rv = val(part.rows);
                        for (r, &t) in part.tokens.iter().enumerate() {
                            dw[t * n_experts + part.expert] +=
                                dot(&g[t * d..(t + 1) * d], &rv[r * d..(r + 1) * d]);
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let (pv, tv) = (val(*pred), val(*target));
                let c = 2.0 * g[0] / pv.len().max(1) as f64;
                acc(*pred, &mut |d| {
                    for ((dv, &p), &t) in d.iter_mut().zip(pv).zip(tv) {
                        *dv += c * (p - t);
                    }
                });
                acc(*target, &mut |d| {
                    for ((dv, &p), &t) in d.iter_mut().zip(pv).zip(tv) {
                        *dv -= c * (p - t);
                    }
                });
            }
            Op::Sum { a } => acc(*a, &mut |d| {
                for dv in d.iter_mut() {
                    *dv += g[0];
                }
            }),
            Op::DotConst { a, w } => acc(*a, &mut |d| axpy(g[0], w, d)),
        }
    }
}
