use super::real::{gemm, MatMut, MatRef, Real};

const ROPE_BASE: f64 = 10_000.0;

/// Rotation angle for pair `i` of a `head_dim`-wide head at position `pos`.
pub fn rotary_angle(pos: usize, i: usize, head_dim: usize) -> f64 {
    pos as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64)
}

/// Rotates the halves `(x[i], x[i + hd/2])` of every head in every row.
/// `sign = -1` applies the inverse rotation (used by the backward pass).
pub(crate) fn rotary_apply<F: Real>(
    x: &[F],
    positions: &[usize],
    n_heads: usize,
    head_dim: usize,
    sign: f64,
) -> Vec<F> {
    let width = n_heads * head_dim;
    let half = head_dim / 2;
    let mut out = x.to_vec();
    let mut cos = vec![F::zero(); half];
    let mut sin = vec![F::zero(); half];
    for (r, &pos) in positions.iter().enumerate() {
        for i in 0..half {
            let a = rotary_angle(pos, i, head_dim);
            cos[i] = F::of(a.cos());
            sin[i] = F::of(sign * a.sin());
        }
        let row = &x[r * width..(r + 1) * width];
        let dst = &mut out[r * width..(r + 1) * width];
        for h in 0..n_heads {
            let base = h * head_dim;
            for i in 0..half {
                let x1 = row[base + i];
                let x2 = row[base + i + half];
                dst[base + i] = x1 * cos[i] - x2 * sin[i];
                dst[base + i + half] = x1 * sin[i] + x2 * cos[i];
            }
        }
    }
    out
}

/// Shape and masking of one fused multi-head attention call over a batch
/// of equally shaped examples stacked along the row axis.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionSpec {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    /// Query `i` may only see keys `j <= i`.
    pub causal: bool,
    /// `batch * k_len` flags; `false` keys are invisible to every query.
    pub key_mask: Option<Vec<bool>>,
}

impl AttentionSpec {
    pub fn width(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// Returns `(output, probabilities)`; probabilities are laid out as
/// `[batch, head, q, k]`.
pub(crate) fn attention_forward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    spec: &AttentionSpec,
) -> (Vec<F>, Vec<F>) {
    let (tq, tk, hd, a) = (spec.q_len, spec.k_len, spec.head_dim, spec.width());
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut out = vec![F::zero(); spec.batch * tq * a];
    let mut probs = vec![F::zero(); spec.batch * spec.n_heads * tq * tk];
    for b in 0..spec.batch {
        for h in 0..spec.n_heads {
            let p_off = (b * spec.n_heads + h) * tq * tk;
            let scores = &mut probs[p_off..p_off + tq * tk];
            let qm = MatRef::dense(q, tq, hd).strided(a, 1).at(b * tq * a + h * hd);
            let km = MatRef::dense(k, tk, hd).strided(a, 1).at(b * tk * a + h * hd);
            gemm(scale, qm, km.t(), F::zero(), MatMut::dense(scores, tq, tk));
            let mask = spec.key_mask.as_deref().map(|m| &m[b * tk..(b + 1) * tk]);
            for i in 0..tq {
                let row = &mut scores[i * tk..(i + 1) * tk];
                let limit = if spec.causal { i + 1 } else { tk };
                let seen = |j: usize| mask.is_none_or(|m| m[j]);
                let mut max = F::neg_infinity();
                for (j, &s) in row[..limit].iter().enumerate() {
                    if s > max && seen(j) {
                        max = s;
                    }
                }
                if max == F::neg_infinity() {
                    row.iter_mut().for_each(|s| *s = F::zero());
                    continue;
                }
                let mut total = F::zero();
                for (j, s) in row[..limit].iter_mut().enumerate() {
                    *s = if seen(j) { (*s - max).exp() } else { F::zero() };
                    total += *s;
                }
                row[limit..].iter_mut().for_each(|s| *s = F::zero());
                let inv = F::one() / total;
                row[..limit].iter_mut().for_each(|s| *s *= inv);
            }
            let vm = MatRef::dense(v, tk, hd).strided(a, 1).at(b * tk * a + h * hd);
            let pm = MatRef::dense(&probs[p_off..p_off + tq * tk], tq, tk);
            let om = MatMut::dense(&mut out, tq, hd).strided(a, 1).at(b * tq * a + h * hd);
            gemm(F::one(), pm, vm, F::zero(), om);
        }
    }
    (out, probs)
}

/// Accumulates attention input gradients into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn attention_backward<F: Real>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    dout: &[F],
    spec: &AttentionSpec,
    dq: &mut [F],
    dk: &mut [F],
    dv: &mut [F],
) {
    let (tq, tk, hd, a) = (spec.q_len, spec.k_len, spec.head_dim, spec.width());
    let scale = F::of(1.0 / (hd as f64).sqrt());
    let mut ds = vec![F::zero(); tq * tk];
    for b in 0..spec.batch {
        for h in 0..spec.n_heads {
            let p_off = (b * spec.n_heads + h) * tq * tk;
            let p = &probs[p_off..p_off + tq * tk];
            let q_at = b * tq * a + h * hd;
            let kv_at = b * tk * a + h * hd;
            let dom = MatRef::dense(dout, tq, hd).strided(a, 1).at(q_at);
            let vm = MatRef::dense(v, tk, hd).strided(a, 1).at(kv_at);
            // dP = dO · Vᵀ
            gemm(F::one(), dom, vm.t(), F::zero(), MatMut::dense(&mut ds, tq, tk));
            // dV += Pᵀ · dO
            let pm = MatRef::dense(p, tq, tk);
            gemm(F::one(), pm.t(), dom, F::one(), MatMut::dense(dv, tk, hd).strided(a, 1).at(kv_at));
            for i in 0..tq {
                let prow = &p[i * tk..(i + 1) * tk];
                let drow = &mut ds[i * tk..(i + 1) * tk];
                let dot: F = prow.iter().zip(drow.iter()).map(|(&pp, &dd)| pp * dd).sum();
                for (d, &pp) in drow.iter_mut().zip(prow) {
                    *d = pp * (*d - dot);
                }
            }
            let dsm = MatRef::dense(&ds, tq, tk);
            let qm = MatRef::dense(q, tq, hd).strided(a, 1).at(q_at);
            let km = MatRef::dense(k, tk, hd).strided(a, 1).at(kv_at);
            gemm(scale, dsm, km, F::one(), MatMut::dense(dq, tq, hd).strided(a, 1).at(q_at));
            gemm(scale, dsm.t(), qm, F::one(), MatMut::dense(dk, tk, hd).strided(a, 1).at(kv_at));
        }
    }
}
