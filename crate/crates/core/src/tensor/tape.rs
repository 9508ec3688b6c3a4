use std::collections::BTreeMap;

use super::kernels::{attention_backward, attention_forward, rotary_apply, AttentionSpec};
use super::real::{gemm, MatMut, MatRef, Real};
use super::{Tensor, RMS_EPS};
use crate::error::{bail, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Embedding { table: Var, ids: Vec<usize> },
    MatMul { a: Var, b: Var, trans_b: bool },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, by: F },
    Silu { a: Var },
    Exp { a: Var },
    Log { a: Var },
    Softmax { a: Var, inner: usize, len: usize },
    RmsNorm { x: Var, scale: Var, inv_rms: Vec<F> },
    Rotary { x: Var, positions: Vec<usize>, n_heads: usize, head_dim: usize },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, probs: Vec<F> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, lse: Vec<F> },
    Sum { a: Var },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is always a
/// topological order of the computation graph.
#[derive(Debug, Default)]
pub struct Tape<F = f32> {
    nodes: Vec<Node<F>>,
}

/// Gradients of the requires-grad leaves of a consumed tape.
#[derive(Debug, Default)]
pub struct Gradients<F> {
    grads: BTreeMap<Var, Vec<F>>,
}

impl<F: Real> Gradients<F> {
    pub fn get(&self, var: Var) -> Option<&[F]> {
        self.grads.get(&var).map(|g| g.as_slice())
    }

    pub fn take(&mut self, var: Var) -> Option<Vec<F>> {
        self.grads.remove(&var)
    }

    /// Stores the gradient of `var` into `tensor.grad`, adding to any
    /// gradient already there.
    pub fn accumulate_into(&mut self, var: Var, tensor: &mut Tensor<F>) -> Result<()> {
        let Some(g) = self.grads.remove(&var) else {
            return Ok(());
        };
        match tensor.take_grad() {
            Some(mut prev) => {
                if prev.len() != g.len() {
                    bail!(Dimension, "gradient length mismatch");
                }
                prev.iter_mut().zip(&g).for_each(|(p, &d)| *p += d);
                tensor.set_grad(prev)
            }
            None => tensor.set_grad(g),
        }
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn same_or_suffix(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf. Its gradient is returned by [`Tape::backward`] when
    /// `tensor.requires_grad()` is set.
    pub fn leaf(&mut self, tensor: &Tensor<F>) -> Var {
        let needs = tensor.requires_grad();
        let value = Tensor { grad: None, ..tensor.clone() };
        self.push(value, Op::Leaf, needs)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: &Tensor<F>) -> Var {
        let value = Tensor { grad: None, requires_grad: false, ..tensor.clone() };
        self.push(value, Op::Leaf, false)
    }

    /// Records a leaf taking ownership of the tensor.
    pub fn leaf_owned(&mut self, mut tensor: Tensor<F>) -> Var {
        tensor.zero_grad();
        let needs = tensor.requires_grad();
        self.push(tensor, Op::Leaf, needs)
    }

    /// Gathers rows of `table` (`[vocab, dim]`).
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        if t.shape().len() != 2 {
            bail!(Dimension, "embedding table must be 2-d, got {:?}", t.shape());
        }
        if ids.is_empty() {
            bail!(Dimension, "embedding lookup of zero ids");
        }
        let (rows, dim) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                bail!(Input, "token id {id} out of range for vocabulary of {rows}");
            }
            data.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let value = Tensor::new(vec![ids.len(), dim], data)?;
        let needs = self.needs(table);
        Ok(self.push(value, Op::Embedding { table, ids: ids.to_vec() }, needs))
    }

    /// `a[m,k] · b[k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[m,k] · b[n,k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != 2 || bv.shape().len() != 2 {
            bail!(Dimension, "matmul needs 2-d operands, got {:?} and {:?}", av.shape(), bv.shape());
        }
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (bk, n) = if trans_b { (bv.shape()[1], bv.shape()[0]) } else { (bv.shape()[0], bv.shape()[1]) };
        if k != bk {
            bail!(Dimension, "matmul inner dims differ: {:?} x {:?}", av.shape(), bv.shape());
        }
        let mut out = vec![F::zero(); m * n];
        let bm = MatRef::dense(bv.data(), bv.shape()[0], bv.shape()[1]);
        let bm = if trans_b { bm.t() } else { bm };
        gemm(F::one(), MatRef::dense(av.data(), m, k), bm, F::zero(), MatMut::dense(&mut out, m, n));
        let needs = self.needs(a) || self.needs(b);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, trans_b }, needs))
    }

    fn broadcast_binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Result<Tensor<F>> {
        let (av, bv) = (self.value(a), self.value(b));
        if !same_or_suffix(av.shape(), bv.shape()) {
            bail!(Dimension, "cannot broadcast {:?} against {:?}", bv.shape(), av.shape());
        }
        let bn = bv.numel();
        let data = av.data().iter().enumerate().map(|(i, &x)| f(x, bv.data()[i % bn])).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Elementwise sum; `b` may broadcast over leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x + y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    /// Elementwise product; `b` may broadcast over leading axes of `a`.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.broadcast_binary(a, b, |x, y| x * y)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, a: Var, by: f64) -> Var {
        let by = F::of(by);
        let av = self.value(a);
        let value = Tensor { data: av.data().iter().map(|&x| x * by).collect(), ..Tensor::zeros(av.shape()) };
        let needs = self.needs(a);
        self.push(value, Op::Scale { a, by }, needs)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let av = self.value(a);
        let value = Tensor { data: av.data().iter().map(|&x| f(x)).collect(), ..Tensor::zeros(av.shape()) };
        let needs = self.needs(a);
        self.push(value, op, needs)
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x / (F::one() + (-x).exp()), Op::Silu { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.exp(), Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.ln(), Op::Log { a })
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() {
            bail!(Dimension, "softmax axis {axis} out of range for {shape:?}");
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut data = av.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| data[at(j)]).fold(F::neg_infinity(), F::max);
                let mut total = F::zero();
                for j in 0..len {
                    let e = (data[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let needs = self.needs(a);
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Softmax { a, inner, len }, needs))
    }

    /// Row-wise RMS normalization of `x[rows, n]` scaled by `scale[n]`.
    pub fn rmsnorm(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (xv, sv) = (self.value(x), self.value(scale));
        let n = xv.cols();
        if sv.shape() != [n] {
            bail!(Dimension, "rmsnorm scale {:?} does not match width {n}", sv.shape());
        }
        let eps = F::of(RMS_EPS);
        let mut inv_rms = Vec::with_capacity(xv.numel() / n);
        let mut data = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(n) {
            let ms = row.iter().map(|&v| v * v).sum::<F>() / F::of(n as f64);
            let r = F::one() / (ms + eps).sqrt();
            inv_rms.push(r);
            data.extend(row.iter().zip(sv.data()).map(|(&v, &s)| v * r * s));
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x) || self.needs(scale);
        Ok(self.push(value, Op::RmsNorm { x, scale, inv_rms }, needs))
    }

    /// Rotary position encoding on `x[rows, n_heads*head_dim]`, with one
    /// position per row.
    pub fn rotary(&mut self, x: Var, positions: &[usize], n_heads: usize, head_dim: usize) -> Result<Var> {
        let xv = self.value(x);
        if !head_dim.is_multiple_of(2) {
            bail!(Dimension, "rotary head_dim must be even, got {head_dim}");
        }
        if xv.shape().len() != 2 || xv.cols() != n_heads * head_dim || xv.rows() != positions.len() {
            bail!(Dimension, "rotary input {:?} vs {} positions x {n_heads} heads x {head_dim}", xv.shape(), positions.len());
        }
        let data = rotary_apply(xv.data(), positions, n_heads, head_dim, 1.0);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let needs = self.needs(x);
        Ok(self.push(value, Op::Rotary { x, positions: positions.to_vec(), n_heads, head_dim }, needs))
    }

    /// Fused multi-head scaled dot-product attention.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let w = spec.width();
        if qv.shape() != [spec.batch * spec.q_len, w]
            || kv.shape() != [spec.batch * spec.k_len, w]
            || vv.shape() != kv.shape()
        {
            bail!(Dimension, "attention operands {:?}/{:?}/{:?} do not match {spec:?}", qv.shape(), kv.shape(), vv.shape());
        }
        if spec.causal && spec.q_len != spec.k_len {
            bail!(Dimension, "causal attention needs equal query and key lengths");
        }
        if let Some(m) = &spec.key_mask {
            if m.len() != spec.batch * spec.k_len {
                bail!(Dimension, "key mask length {} != {}", m.len(), spec.batch * spec.k_len);
            }
        }
        let (out, probs) = attention_forward(qv.data(), kv.data(), vv.data(), &spec);
        let value = Tensor::new(vec![spec.batch * spec.q_len, w], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(value, Op::Attention { q, k, v, spec, probs }, needs))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[n, vocab]`, over rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape().len() != 2 {
            bail!(Dimension, "cross-entropy logits must be 2-d, got {:?}", lv.shape());
        }
        let (n, vocab) = (lv.shape()[0], lv.shape()[1]);
        if targets.len() != n || mask.len() != n {
            bail!(Contract, "{} logit rows, {} targets, {} mask entries", n, targets.len(), mask.len());
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            bail!(Contract, "loss mask selects no positions");
        }
        let mut lse = vec![F::zero(); n];
        let mut total = 0.0f64;
        for (r, row) in lv.data().chunks(vocab).enumerate() {
            if !mask[r] {
                continue;
            }
            if targets[r] >= vocab {
                bail!(Input, "target id {} out of range for vocabulary of {vocab}", targets[r]);
            }
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let s: F = row.iter().map(|&v| (v - max).exp()).sum();
            lse[r] = max + s.ln();
            total += (lse[r] - row[targets[r]]).f64();
        }
        let value = Tensor::scalar(F::of(total / count as f64));
        let needs = self.needs(logits);
        let op = Op::CrossEntropy { logits, targets: targets.to_vec(), mask: mask.to_vec(), lse };
        Ok(self.push(value, op, needs))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total: F = self.value(a).data().iter().copied().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(total), Op::Sum { a }, needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Back-propagates from the scalar `loss`, consuming the tape.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<F>> {
        if self.value(loss).numel() != 1 {
            bail!(Contract, "backward needs a scalar loss, got shape {:?}", self.value(loss).shape());
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            if let Op::Leaf = op {
                out.grads.insert(Var(i), g);
                continue;
            }
            self.backprop(i, op, &g, &mut grads);
            // Nothing upstream reads this value any more.
            self.nodes[i].value = Tensor::scalar(F::zero());
        }
        Ok(out)
    }

    fn backprop(&self, i: usize, op: Op<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| &nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if nodes[v.0].needs_grad {
                let buf = grads[v.0].get_or_insert_with(|| vec![F::zero(); nodes[v.0].value.numel()]);
                f(buf);
            }
        };
        let out = &nodes[i].value;
        match op {
            Op::Leaf => {}
            Op::Embedding { table, ids } => {
                let dim = val(table).cols();
                acc(table, &mut |d| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * dim..(r + 1) * dim];
                        d[id * dim..(id + 1) * dim].iter_mut().zip(src).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.cols();
                let gm = MatRef::dense(g, m, n);
                let bm = MatRef::dense(bv.data(), bv.shape()[0], bv.shape()[1]);
                let bm = if trans_b { bm.t() } else { bm };
                // dA = G · Bᵀ
                acc(a, &mut |d| gemm(F::one(), gm, bm.t(), F::one(), MatMut::dense(d, m, k)));
                let am = MatRef::dense(av.data(), m, k);
                if trans_b {
                    // B is [n,k]: dB = Gᵀ · A
                    acc(b, &mut |d| gemm(F::one(), gm.t(), am, F::one(), MatMut::dense(d, n, k)));
                } else {
                    acc(b, &mut |d| gemm(F::one(), am.t(), gm, F::one(), MatMut::dense(d, k, n)));
                }
            }
            Op::Add { a, b } => {
                acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(b, &mut |d| {
                    let bn = d.len();
                    g.iter().enumerate().for_each(|(j, &y)| d[j % bn] += y);
                });
            }
            Op::Mul { a, b } => {
                let (av, bv) = (val(a).data(), val(b).data());
                let bn = bv.len();
                acc(a, &mut |d| d.iter_mut().enumerate().for_each(|(j, x)| *x += g[j] * bv[j % bn]));
                acc(b, &mut |d| g.iter().enumerate().for_each(|(j, &y)| d[j % bn] += y * av[j]));
            }
            Op::Scale { a, by } => acc(a, &mut |d| d.iter_mut().zip(g).for_each(|(x, &y)| *x += y * by)),
            Op::Silu { a } => {
                let av = val(a).data();
                acc(a, &mut |d| {
                    for (j, x) in d.iter_mut().enumerate() {
                        let s = F::one() / (F::one() + (-av[j]).exp());
                        *x += g[j] * s * (F::one() + av[j] * (F::one() - s));
                    }
                });
            }
            Op::Exp { a } => {
                let o = out.data();
                acc(a, &mut |d| d.iter_mut().enumerate().for_each(|(j, x)| *x += g[j] * o[j]));
            }
            Op::Log { a } => {
                let av = val(a).data();
                acc(a, &mut |d| d.iter_mut().enumerate().for_each(|(j, x)| *x += g[j] / av[j]));
            }
            Op::Softmax { a, inner, len } => {
                let y = out.data();
                let outer = y.len() / (inner * len);
                acc(a, &mut |d| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + ii;
                            let dot: F = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] += y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                });
            }
            Op::RmsNorm { x, scale, inv_rms } => {
                let (xv, sv) = (val(x).data(), val(scale).data());
                let n = sv.len();
                acc(scale, &mut |d| {
                    for (r, row) in xv.chunks(n).enumerate() {
                        for j in 0..n {
                            d[j] += g[r * n + j] * row[j] * inv_rms[r];
                        }
                    }
                });
                acc(x, &mut |d| {
                    let nf = F::of(n as f64);
                    for (r, row) in xv.chunks(n).enumerate() {
                        let ri = inv_rms[r];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: F = (0..n).map(|j| gr[j] * sv[j] * row[j]).sum();
                        let coef = ri * ri * ri * dot / nf;
                        for j in 0..n {
                            d[r * n + j] += ri * gr[j] * sv[j] - row[j] * coef;
                        }
                    }
                });
            }
            Op::Rotary { x, positions, n_heads, head_dim } => {
                let back = rotary_apply(g, &positions, n_heads, head_dim, -1.0);
                acc(x, &mut |d| d.iter_mut().zip(&back).for_each(|(a, &b)| *a += b));
            }
            Op::Attention { q, k, v, spec, probs } => {
                let (qv, kv, vv) = (val(q).data(), val(k).data(), val(v).data());
                let mut dq = vec![F::zero(); qv.len()];
                let mut dk = vec![F::zero(); kv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                attention_backward(qv, kv, vv, &probs, g, &spec, &mut dq, &mut dk, &mut dv);
                acc(q, &mut |d| d.iter_mut().zip(&dq).for_each(|(a, &b)| *a += b));
                acc(k, &mut |d| d.iter_mut().zip(&dk).for_each(|(a, &b)| *a += b));
                acc(v, &mut |d| d.iter_mut().zip(&dv).for_each(|(a, &b)| *a += b));
            }
            Op::CrossEntropy { logits, targets, mask, lse } => {
                let lv = val(logits);
                let vocab = lv.cols();
                let count = mask.iter().filter(|&&m| m).count();
                let coef = g[0] / F::of(count as f64);
                acc(logits, &mut |d| {
                    for (r, row) in lv.data().chunks(vocab).enumerate() {
                        if !mask[r] {
                            continue;
                        }
                        let dr = &mut d[r * vocab..(r + 1) * vocab];
                        for (x, &z) in dr.iter_mut().zip(row) {
                            *x += coef * (z - lse[r]).exp();
                        }
                        dr[targets[r]] -= coef;
                    }
                });
            }
            Op::Sum { a } => acc(a, &mut |d| d.iter_mut().for_each(|x| *x += g[0])),
        }
    }
}
