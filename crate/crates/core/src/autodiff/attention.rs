//! Masked multi-head attention operations.
//!
//! Masked positions are renormalized out exactly: the softmax accumulates
//! over admissible keys only, so masked weights are stored as exact zeros
//! (equivalent to adding a -1e9 mask logit, without its rounding residue) and
//! outputs at position `t` of the causal variant are bitwise independent of
//! any later input.

use super::{ArrayId, NumericsError, Op, Tape};

fn head_slice(data: &[f64], row: usize, cols: usize, head: usize, dk: usize) -> &[f64] {
    &data[row * cols + head * dk..row * cols + head * dk + dk]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Tape {
    /// Multi-head self-attention with a strictly lower-triangular-plus-self
    /// mask: position `t` attends to keys `0..=t`.
    pub fn causal_attention(
        &mut self,
        q: ArrayId,
        k: ArrayId,
        v: ArrayId,
        heads: usize,
    ) -> Result<ArrayId, NumericsError> {
        let (t_len, e) = self.shapes[q.0];
        for other in [k, v] {
            if self.shapes[other.0] != (t_len, e) {
                return Err(NumericsError::ShapeMismatch {
                    op: "causal_attention",
                    lhs: (t_len, e),
                    rhs: self.shapes[other.0],
                });
            }
        }
        if t_len == 0 || heads == 0 || e == 0 || e % heads != 0 {
            return Err(NumericsError::BadArg {
                op: "causal_attention",
                msg: format!("bad dims: T={t_len}, E={e}, heads={heads}"),
            });
        }
        let dk = e / heads;
        let scale = 1.0 / (dk as f64).sqrt();

        let qv = &self.vals[q.0];
        let kv = &self.vals[k.0];
        let vv = &self.vals[v.0];
        let mut out = vec![0.0; t_len * e];
        // weights[h][t][j], zero above the diagonal
        let mut weights = vec![0.0; heads * t_len * t_len];
        for h in 0..heads {
            for t in 0..t_len {
                let qrow = head_slice(qv, t, e, h, dk);
                let wrow = &mut weights[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                let mut max = f64::NEG_INFINITY;
                for (j, w) in wrow.iter_mut().enumerate() {
                    *w = scale * dot(qrow, head_slice(kv, j, e, h, dk));
                    max = max.max(*w);
                }
                let mut sum = 0.0;
                for w in wrow.iter_mut() {
                    *w = (*w - max).exp();
                    sum += *w;
                }
                for w in wrow.iter_mut() {
                    *w /= sum;
                }
                let orow = &mut out[t * e + h * dk..t * e + h * dk + dk];
                for j in 0..=t {
                    let w = weights[(h * t_len + t) * t_len + j];
                    let vrow = head_slice(vv, j, e, h, dk);
                    for (o, &x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push("causal_attention", t_len, e, out, Op::CausalAttention { q, k, v, heads, weights })
    }

    pub(crate) fn causal_attention_backward(
        &mut self,
        node: usize,
        q: ArrayId,
        k: ArrayId,
        v: ArrayId,
        heads: usize,
        weights: &[f64],
        g: &[f64],
    ) {
        let (t_len, e) = self.shapes[q.0];
        let dk = e / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let _ = node;
        let qv = &self.vals[q.0];
        let kv = &self.vals[k.0];
        let vv = &self.vals[v.0];
        let mut dq = vec![0.0; t_len * e];
        let mut dkk = vec![0.0; t_len * e];
        let mut dv = vec![0.0; t_len * e];
        let mut dw = vec![0.0; t_len]; // scratch per row
        for h in 0..heads {
            for t in 0..t_len {
                let grow = &g[t * e + h * dk..t * e + h * dk + dk];
                let wrow = &weights[(h * t_len + t) * t_len..(h * t_len + t) * t_len + t + 1];
                // dV and dW
                for j in 0..=t {
                    let vrow = head_slice(vv, j, e, h, dk);
                    dw[j] = dot(grow, vrow);
                    let dvrow = &mut dv[j * e + h * dk..j * e + h * dk + dk];
                    for (d, &x) in dvrow.iter_mut().zip(grow) {
                        *d += wrow[j] * x;
                    }
                }
                // softmax backward on the row
                let inner: f64 = (0..=t).map(|j| wrow[j] * dw[j]).sum();
                let qrow = head_slice(qv, t, e, h, dk);
                let dqrow_start = t * e + h * dk;
                for j in 0..=t {
                    let ds = wrow[j] * (dw[j] - inner) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let krow = head_slice(kv, j, e, h, dk);
                    let dqrow = &mut dq[dqrow_start..dqrow_start + dk];
                    for (d, &x) in dqrow.iter_mut().zip(krow) {
                        *d += ds * x;
                    }
                    let dkrow = &mut dkk[j * e + h * dk..j * e + h * dk + dk];
                    for (d, &x) in dkrow.iter_mut().zip(qrow) {
                        *d += ds * x;
                    }
                }
            }
        }
        super::ops::add_into(self.ensure_grad(q), &dq);
        super::ops::add_into(self.ensure_grad(k), &dkk);
        super::ops::add_into(self.ensure_grad(v), &dv);
    }

    /// One query per group attending over its own block of `group` keys,
    /// with a per-key presence mask. `q` is `[B, E]`; `k`/`v` are
    /// `[B*group, E]`; `mask` has `B*group` entries and each group needs at
    /// least one admissible key.
    pub fn pooled_attention(
        &mut self,
        q: ArrayId,
        k: ArrayId,
        v: ArrayId,
        heads: usize,
        group: usize,
        mask: &[bool],
    ) -> Result<ArrayId, NumericsError> {
        let (b, e) = self.shapes[q.0];
        for other in [k, v] {
            if self.shapes[other.0] != (b * group, e) {
                return Err(NumericsError::ShapeMismatch {
                    op: "pooled_attention",
                    lhs: (b * group, e),
                    rhs: self.shapes[other.0],
                });
            }
        }
        if b == 0 || heads == 0 || e == 0 || e % heads != 0 || group == 0 {
            return Err(NumericsError::BadArg {
                op: "pooled_attention",
                msg: format!("bad dims: B={b}, E={e}, heads={heads}, group={group}"),
            });
        }
        if mask.len() != b * group {
            return Err(NumericsError::BadArg {
                op: "pooled_attention",
                msg: format!("{} mask entries for {} keys", mask.len(), b * group),
            });
        }
        let dk = e / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = &self.vals[q.0];
        let kv = &self.vals[k.0];
        let vv = &self.vals[v.0];
        let mut out = vec![0.0; b * e];
        let mut weights = vec![0.0; b * heads * group];
        for bi in 0..b {
            let gmask = &mask[bi * group..(bi + 1) * group];
            if !gmask.iter().any(|&m| m) {
                return Err(NumericsError::BadArg {
                    op: "pooled_attention",
                    msg: format!("group {bi} has no admissible keys"),
                });
            }
            for h in 0..heads {
                let qrow = head_slice(qv, bi, e, h, dk);
                let wrow = &mut weights[(bi * heads + h) * group..(bi * heads + h + 1) * group];
                let mut max = f64::NEG_INFINITY;
                for (j, keep) in gmask.iter().enumerate() {
                    if *keep {
                        wrow[j] = scale * dot(qrow, head_slice(kv, bi * group + j, e, h, dk));
                        max = max.max(wrow[j]);
                    }
                }
                let mut sum = 0.0;
                for (j, keep) in gmask.iter().enumerate() {
                    if *keep {
                        wrow[j] = (wrow[j] - max).exp();
                        sum += wrow[j];
                    }
                }
                let orow = &mut out[bi * e + h * dk..bi * e + h * dk + dk];
                for (j, keep) in gmask.iter().enumerate() {
                    if *keep {
                        wrow[j] /= sum;
                        let vrow = head_slice(vv, bi * group + j, e, h, dk);
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += wrow[j] * x;
                        }
                    }
                }
            }
        }
        self.push(
            "pooled_attention",
            b,
            e,
            out,
            Op::PooledAttention { q, k, v, heads, group, mask: mask.to_vec(), weights },
        )
    }

    #[allow(clippy::too_many_arguments)]
    pub(crate) fn pooled_attention_backward(
        &mut self,
        q: ArrayId,
        k: ArrayId,
        v: ArrayId,
        heads: usize,
        group: usize,
        mask: &[bool],
        weights: &[f64],
        g: &[f64],
    ) {
        let (b, e) = self.shapes[q.0];
        let dk = e / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qv = &self.vals[q.0];
        let kv = &self.vals[k.0];
        let vv = &self.vals[v.0];
        let mut dq = vec![0.0; b * e];
        let mut dkk = vec![0.0; b * group * e];
        let mut dv = vec![0.0; b * group * e];
        let mut dw = vec![0.0; group];
        for bi in 0..b {
            let gmask = &mask[bi * group..(bi + 1) * group];
            for h in 0..heads {
                let grow = &g[bi * e + h * dk..bi * e + h * dk + dk];
                let wrow = &weights[(bi * heads + h) * group..(bi * heads + h + 1) * group];
                for (j, keep) in gmask.iter().enumerate() {
                    if !*keep {
                        dw[j] = 0.0;
                        continue;
                    }
                    let key_row = bi * group + j;
                    dw[j] = dot(grow, head_slice(vv, key_row, e, h, dk));
                    let dvrow = &mut dv[key_row * e + h * dk..key_row * e + h * dk + dk];
                    for (d, &x) in dvrow.iter_mut().zip(grow) {
                        *d += wrow[j] * x;
                    }
                }
                let inner: f64 = (0..group).map(|j| wrow[j] * dw[j]).sum();
                let qrow = head_slice(qv, bi, e, h, dk);
                for (j, keep) in gmask.iter().enumerate() {
                    if !*keep {
                        continue;
                    }
                    let ds = wrow[j] * (dw[j] - inner) * scale;
                    let key_row = bi * group + j;
                    let krow = head_slice(kv, key_row, e, h, dk);
                    let dqrow = &mut dq[bi * e + h * dk..bi * e + h * dk + dk];
                    for (d, &x) in dqrow.iter_mut().zip(krow) {
                        *d += ds * x;
                    }
                    let dkrow = &mut dkk[key_row * e + h * dk..key_row * e + h * dk + dk];
                    for (d, &x) in dkrow.iter_mut().zip(qrow) {
                        *d += ds * x;
                    }
                }
            }
        }
        super::ops::add_into(self.ensure_grad(q), &dq);
        super::ops::add_into(self.ensure_grad(k), &dkk);
        super::ops::add_into(self.ensure_grad(v), &dv);
    }
}
