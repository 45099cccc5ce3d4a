//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in creation order; [`Graph::backward`]
//! walks the tape in reverse. Nodes only carry gradients when some leaf they
//! depend on was created with tracking on.

use super::tensor::{gemm_acc, gemm_nt_acc, gemm_tn_acc, Scalar, Tensor};
use crate::error::{DdError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add(Var, Var),
    AddRow { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Tanh(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: Var, k: Var, v: Var, geom: AttnGeom, mask: Vec<bool>, probs: Vec<T> },
    Embedding { table: Var, ids: Vec<Option<usize>> },
    GatherRows { x: Var, rows: Vec<usize> },
    SoftmaxCe { logits: Var, targets: Vec<usize>, weights: Vec<T>, probs: Vec<T> },
    SquaredError { pred: Var, target: Vec<T>, weights: Vec<T> },
    Sum(Var),
}

#[derive(Debug, Clone, Copy)]
struct AttnGeom {
    batch: usize,
    seq: usize,
    heads: usize,
    head_dim: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

#[derive(Debug, Default)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every tracked node.
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(msg: String) -> DdError {
    DdError::Structural(msg)
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::c((2.0 / std::f64::consts::PI).sqrt());
    let a = T::c(0.044715);
    let half = T::c(0.5);
    let one = T::one();
    let u = c * (x + a * x * x * x);
    let th = u.tanh();
    let value = half * x * (one + th);
    let du = c * (one + T::c(3.0) * a * x * x);
    let deriv = half * (one + th) + half * x * (one - th * th) * du;
    (value, deriv)
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant leaf.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// `a[m,k] @ b[k,n]`; `a` may carry extra leading axes folded into `m`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).as_matrix();
        let bs = self.value(b).shape();
        if bs.len() != 2 || bs[0] != k {
            return Err(shape_err(format!(
                "matmul: lhs has {k} columns, rhs shape {bs:?}"
            )));
        }
        let n = bs[1];
        let mut out = vec![T::zero(); m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul { a, b, m, k, n },
            tracked,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("add: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Add(a, b), tracked))
    }

    /// Elementwise product of same-shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(format!("mul: {:?} vs {:?}", va.shape(), vb.shape())));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(value, Op::Mul(a, b), tracked))
    }

    /// Adds a length-`cols` vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix();
        if self.value(bias).numel() != cols {
            return Err(shape_err(format!(
                "add_row: bias of {} values for {cols} columns",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data();
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(b) {
                *o = *o + bv;
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), data)?;
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(value, Op::AddRow { x, bias }, tracked))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::c(s);
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| v * s).collect())
            .expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Scale(x, s), tracked)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|&v| gelu(v).0).collect())
            .expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Gelu(x), tracked)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let value = Tensor::new(vx.shape().to_vec(), vx.data().iter().map(|v| v.tanh()).collect())
            .expect("same shape");
        let tracked = self.tracked(x);
        self.push(value, Op::Tanh(x), tracked)
    }

    /// Normalizes each row of `x` then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix();
        if self.value(gamma).numel() != cols || self.value(beta).numel() != cols {
            return Err(shape_err(format!("layer_norm: affine parameters must have {cols} values")));
        }
        let eps = T::c(LN_EPS);
        let inv_n = T::c(1.0 / cols as f64);
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); rows * cols];
        let mut xhat = vec![T::zero(); rows * cols];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * cols..(r + 1) * cols];
            let mean = row.iter().copied().sum::<T>() * inv_n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * g[c] + b[c];
            }
        }
        let value = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gamma) || self.tracked(beta);
        Ok(self.push(value, Op::LayerNorm { x, gamma, beta, xhat, rstd }, tracked))
    }

    /// Multi-head scaled dot-product attention over `batch` independent sequences.
    ///
    /// `q`, `k`, `v` are `[batch*seq, heads*head_dim]`. `mask[i*seq + j]` allows
    /// query `i` to read key `j`; disallowed pairs get exactly zero weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, mask: &[bool]) -> Result<Var> {
        let (rows, width) = self.value(q).as_matrix();
        if rows != batch * seq || self.value(k).as_matrix() != (rows, width) || self.value(v).as_matrix() != (rows, width) {
            return Err(shape_err(format!(
                "attention: q/k/v must all be [{}, {width}]",
                batch * seq
            )));
        }
        if heads == 0 || width % heads != 0 {
            return Err(shape_err(format!("attention: width {width} not divisible by {heads} heads")));
        }
        if mask.len() != seq * seq {
            return Err(shape_err(format!("attention: mask has {} entries, need {}", mask.len(), seq * seq)));
        }
        if (0..seq).any(|i| !mask[i * seq..(i + 1) * seq].iter().any(|&m| m)) {
            return Err(shape_err("attention: a query row has no visible key".into()));
        }
        let geom = AttnGeom { batch, seq, heads, head_dim: width / heads };
        let dh = geom.head_dim;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); rows * width];
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut scores = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let qi = &qv[(b * seq + i) * width + off..][..dh];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            let kj = &kv[(b * seq + j) * width + off..][..dh];
                            let s = qi.iter().zip(kj).map(|(&x, &y)| x * y).sum::<T>() * scale;
                            scores[j] = s;
                            if s > max {
                                max = s;
                            }
                        }
                    }
                    let p = &mut probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let mut denom = T::zero();
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            let e = (scores[j] - max).exp();
                            p[j] = e;
                            denom = denom + e;
                        }
                    }
                    let o = &mut out[(b * seq + i) * width + off..][..dh];
                    for j in 0..seq {
                        if mask[i * seq + j] {
                            p[j] = p[j] / denom;
                            let vj = &vv[(b * seq + j) * width + off..][..dh];
                            for (ov, &x) in o.iter_mut().zip(vj) {
                                *ov = *ov + p[j] * x;
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            value,
            Op::Attention { q, k, v, geom, mask: mask.to_vec(), probs },
            tracked,
        ))
    }

    /// Row lookup into `table`; `None` yields a zero row.
    pub fn embedding(&mut self, table: Var, ids: &[Option<usize>]) -> Result<Var> {
        let (rows, cols) = self.value(table).as_matrix();
        let t = self.value(table).data();
        let mut out = vec![T::zero(); ids.len() * cols];
        for (r, id) in ids.iter().enumerate() {
            if let Some(id) = *id {
                if id >= rows {
                    return Err(shape_err(format!("embedding: id {id} outside table of {rows} rows")));
                }
                out[r * cols..(r + 1) * cols].copy_from_slice(&t[id * cols..(id + 1) * cols]);
            }
        }
        let value = Tensor::new(vec![ids.len(), cols], out)?;
        let tracked = self.tracked(table);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, tracked))
    }

    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n_rows, cols) = self.value(x).as_matrix();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n_rows {
                return Err(shape_err(format!("gather_rows: row {r} of {n_rows}")));
            }
            out.extend_from_slice(&xv[r * cols..(r + 1) * cols]);
        }
        let value = Tensor::new(vec![rows.len(), cols], out)?;
        let tracked = self.tracked(x);
        Ok(self.push(value, Op::GatherRows { x, rows: rows.to_vec() }, tracked))
    }

    /// `Σ_r weights[r] * CE(softmax(logits[r]), targets[r])` as a scalar.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.value(logits).as_matrix();
        if targets.len() != rows || weights.len() != rows {
            return Err(shape_err(format!(
                "softmax_cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= cols) {
            return Err(shape_err(format!("softmax_cross_entropy: target {bad} >= {cols} classes")));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); rows * cols];
        let mut loss = T::zero();
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[r * cols..(r + 1) * cols];
            let mut denom = T::zero();
            for (pv, &l) in p.iter_mut().zip(row) {
                *pv = (l - max).exp();
                denom = denom + *pv;
            }
            for pv in p.iter_mut() {
                *pv = *pv / denom;
            }
            if weights[r] != T::zero() {
                let lse = max + denom.ln();
                loss = loss + weights[r] * (lse - row[targets[r]]);
            }
        }
        let tracked = self.tracked(logits);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SoftmaxCe { logits, targets: targets.to_vec(), weights: weights.to_vec(), probs },
            tracked,
        ))
    }

    /// `Σ_r weights[r] * mean_c (pred[r,c] - target[r,c])²` as a scalar.
    pub fn squared_error(&mut self, pred: Var, target: &[T], weights: &[T]) -> Result<Var> {
        let (rows, cols) = self.value(pred).as_matrix();
        if target.len() != rows * cols || weights.len() != rows {
            return Err(shape_err(format!(
                "squared_error: pred is [{rows}, {cols}], target has {} values, {} weights",
                target.len(),
                weights.len()
            )));
        }
        let pv = self.value(pred).data();
        let inv_c = T::c(1.0 / cols as f64);
        let mut loss = T::zero();
        for r in 0..rows {
            if weights[r] == T::zero() {
                continue;
            }
            let se: T = (0..cols)
                .map(|c| {
                    let d = pv[r * cols + c] - target[r * cols + c];
                    d * d
                })
                .sum();
            loss = loss + weights[r] * se * inv_c;
        }
        let tracked = self.tracked(pred);
        Ok(self.push(
            Tensor::new(vec![1], vec![loss])?,
            Op::SquaredError { pred, target: target.to_vec(), weights: weights.to_vec() },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        let tracked = self.tracked(x);
        self.push(Tensor::new(vec![1], vec![total]).expect("scalar"), Op::Sum(x), tracked)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        if self.value(loss).numel() != 1 {
            return Err(shape_err(format!(
                "backward needs a scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(up) = grads[idx].take() else { continue };
            self.backward_node(node, &up, &mut grads);
        }
        Ok(Grads { grads })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.tracked(v) {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn backward_node(&self, node: &Node<T>, up: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.acc(grads, *a) {
                    gemm_nt_acc(up, bv, ga, *m, *n, *k);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gemm_tn_acc(av, up, gb, *m, *k, *n);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        g.iter_mut().zip(up).for_each(|(g, &u)| *g = *g + u);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        g[i] = g[i] + up[i] * bv[i];
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        g[i] = g[i] + up[i] * av[i];
                    }
                }
            }
            Op::AddRow { x, bias } => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(up).for_each(|(g, &u)| *g = *g + u);
                }
                if let Some(g) = self.acc(grads, *bias) {
                    let cols = g.len();
                    for row in up.chunks_exact(cols) {
                        g.iter_mut().zip(row).for_each(|(g, &u)| *g = *g + u);
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().zip(up).for_each(|(g, &u)| *g = *g + u * *s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        g[i] = g[i] + up[i] * gelu(xv[i]).1;
                    }
                }
            }
            Op::Tanh(x) => {
                let yv = node.value.data();
                if let Some(g) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        g[i] = g[i] + up[i] * (T::one() - yv[i] * yv[i]);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let cols = self.value(*gamma).numel();
                let rows = rstd.len();
                let gv = self.value(*gamma).data();
                if let Some(g) = self.acc(grads, *gamma) {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] = g[c] + up[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *beta) {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] = g[c] + up[r * cols + c];
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let inv_n = T::c(1.0 / cols as f64);
                    for r in 0..rows {
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for c in 0..cols {
                            let d = up[r * cols + c] * gv[c];
                            mean_d = mean_d + d;
                            mean_dx = mean_dx + d * xhat[r * cols + c];
                        }
                        mean_d = mean_d * inv_n;
                        mean_dx = mean_dx * inv_n;
                        for c in 0..cols {
                            let d = up[r * cols + c] * gv[c];
                            g[r * cols + c] = g[r * cols + c]
                                + rstd[r] * (d - mean_d - xhat[r * cols + c] * mean_dx);
                        }
                    }
                }
            }
            Op::Attention { q, k, v, geom, mask, probs } => self.attention_backward(*q, *k, *v, *geom, mask, probs, up, grads),
            Op::Embedding { table, ids } => {
                if let Some(g) = self.acc(grads, *table) {
                    let cols = self.value(*table).as_matrix().1;
                    for (r, id) in ids.iter().enumerate() {
                        if let Some(id) = *id {
                            for c in 0..cols {
                                g[id * cols + c] = g[id * cols + c] + up[r * cols + c];
                            }
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(g) = self.acc(grads, *x) {
                    let cols = self.value(*x).as_matrix().1;
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            g[r * cols + c] = g[r * cols + c] + up[i * cols + c];
                        }
                    }
                }
            }
            Op::SoftmaxCe { logits, targets, weights, probs } => {
                if let Some(g) = self.acc(grads, *logits) {
                    let cols = self.value(*logits).as_matrix().1;
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let s = up[0] * w;
                        for c in 0..cols {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            g[r * cols + c] = g[r * cols + c] + s * (probs[r * cols + c] - onehot);
                        }
                    }
                }
            }
            Op::SquaredError { pred, target, weights } => {
                let pv = self.value(*pred).data();
                if let Some(g) = self.acc(grads, *pred) {
                    let cols = self.value(*pred).as_matrix().1;
                    let two_over_c = T::c(2.0 / cols as f64);
                    for (r, &w) in weights.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let s = up[0] * w * two_over_c;
                        for c in 0..cols {
                            let i = r * cols + c;
                            g[i] = g[i] + s * (pv[i] - target[i]);
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|g| *g = *g + up[0]);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(&self, q: Var, k: Var, v: Var, geom: AttnGeom, mask: &[bool], probs: &[T], up: &[T], grads: &mut [Option<Vec<T>>]) {
        let AttnGeom { batch, seq, heads, head_dim: dh } = geom;
        let width = heads * dh;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let n = batch * seq * width;
        let mut gq = vec![T::zero(); n];
        let mut gk = vec![T::zero(); n];
        let mut gv = vec![T::zero(); n];
        let mut dp = vec![T::zero(); seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seq {
                    let p = &probs[((b * heads + h) * seq + i) * seq..][..seq];
                    let doi = &up[(b * seq + i) * width + off..][..dh];
                    let mut dot = T::zero();
                    for j in 0..seq {
                        if !mask[i * seq + j] {
                            continue;
                        }
                        let vj = &vv[(b * seq + j) * width + off..][..dh];
                        dp[j] = doi.iter().zip(vj).map(|(&x, &y)| x * y).sum();
                        dot = dot + p[j] * dp[j];
                        let gvj = &mut gv[(b * seq + j) * width + off..][..dh];
                        for (g, &d) in gvj.iter_mut().zip(doi) {
                            *g = *g + p[j] * d;
                        }
                    }
                    let qi_start = (b * seq + i) * width + off;
                    for j in 0..seq {
                        if !mask[i * seq + j] {
                            continue;
                        }
                        let ds = p[j] * (dp[j] - dot) * scale;
                        let kj_start = (b * seq + j) * width + off;
                        for c in 0..dh {
                            gq[qi_start + c] = gq[qi_start + c] + ds * kv[kj_start + c];
                            gk[kj_start + c] = gk[kj_start + c] + ds * qv[qi_start + c];
                        }
                    }
                }
            }
        }
        for (var, local) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(g) = self.acc(grads, var) {
                g.iter_mut().zip(local).for_each(|(g, l)| *g = *g + l);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matmul_and_its_gradient() {
        let mut g = Graph::<f64>::new();
        let mut eye = Tensor::zeros(&[3, 3]);
        for i in 0..3 {
            eye.data_mut()[i * 3 + i] = 1.0;
        }
        let x_val = Tensor::new(vec![3, 2], vec![1.0, -2.0, 3.5, 0.0, 4.0, 9.0]).unwrap();
        let i = g.input(eye);
        let x = g.param(x_val.clone());
        let y = g.matmul(i, x).unwrap();
        assert_eq!(g.value(y), &x_val);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0; 6]);
        assert!(grads.get(i).is_none());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_log_v() {
        for v in [2usize, 4, 7] {
            let mut g = Graph::<f64>::new();
            let l = g.param(Tensor::filled(&[1, v], 0.3));
            let ce = g.softmax_cross_entropy(l, &[1], &[1.0]).unwrap();
            assert!((g.value(ce).data()[0] - (v as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_structural_error() {
        let mut g = Graph::<f32>::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        assert!(matches!(g.matmul(a, b), Err(DdError::Structural(_))));
        let c = g.input(Tensor::zeros(&[3, 2]));
        assert!(g.add(a, c).is_err());
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn masked_keys_get_zero_weight() {
        // Key 1 is huge; with the mask blocking it, row 0 must equal v0 exactly.
        let mut g = Graph::<f64>::new();
        let q = g.input(Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap());
        let k = g.input(Tensor::new(vec![2, 1], vec![0.0, 50.0]).unwrap());
        let v = g.input(Tensor::new(vec![2, 1], vec![3.0, -7.0]).unwrap());
        let causal = [true, false, true, true];
        let o = g.attention(q, k, v, 1, 2, 1, &causal).unwrap();
        assert_eq!(g.value(o).data()[0], 3.0);
        let open = [true; 4];
        let o2 = g.attention(q, k, v, 1, 2, 1, &open).unwrap();
        assert!((g.value(o2).data()[0] - 3.0).abs() > 1.0);
    }
}
