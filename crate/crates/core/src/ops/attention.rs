//! Fused scaled dot-product attention, `softmax(scale · Q·Kᵀ)·V`.
//!
//! Queries are processed one row at a time against transposed `d x L`
//! copies of the keys and values, so the `L x L` score matrix is never
//! materialized and heads of width 8 do not pay GEMM packing costs. The
//! backward pass recomputes each row of probabilities instead of saving it.

use super::lanes;
use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnGeom {
    pub batch: usize,
    pub len: usize,
    pub dim: usize,
}

impl AttnGeom {
    pub fn new(q: &[usize], k: &[usize], v: &[usize]) -> Result<Self> {
        if q.len() != 3 || q != k || q != v {
            return Err(shape_err(
                "attention",
                format!("q, k, v must share one B x L x d shape, got {q:?}, {k:?}, {v:?}"),
            ));
        }
        Ok(Self {
            batch: q[0],
            len: q[1],
            dim: q[2],
        })
    }

    fn slice(&self, b: usize) -> std::ops::Range<usize> {
        let n = self.len * self.dim;
        b * n..(b + 1) * n
    }
}

/// Softmax of each row in place, with max subtraction.
pub fn softmax_rows<T: Real>(rows: &mut [T], width: usize) {
    for row in rows.chunks_exact_mut(width) {
        let max = lanes::max(row);
        let sum = T::exp_shifted(row, max);
        let inv = T::one() / sum;
        row.iter_mut().for_each(|v| *v *= inv);
    }
}

/// `L x d` block to `d x L`.
fn transpose<T: Real>(x: &[T], l: usize, d: usize) -> Vec<T> {
    let mut t = vec![T::zero(); l * d];
    for (i, row) in x.chunks_exact(d).enumerate() {
        for (c, &v) in row.iter().enumerate() {
            t[c * l + i] = v;
        }
    }
    t
}

fn untranspose<T: Real>(t: &[T], l: usize, d: usize, out: &mut [T]) {
    for (i, row) in out.chunks_exact_mut(d).enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            *v += t[c * l + i];
        }
    }
}

/// Probabilities of query row `qi` against all keys, written to `p`.
fn probs_row<T: Real>(qi: &[T], kt: &[T], scale: T, p: &mut [T]) {
    let l = p.len();
    p.fill(T::zero());
    for (c, &qc) in qi.iter().enumerate() {
        lanes::axpy(qc * scale, &kt[c * l..(c + 1) * l], p);
    }
    softmax_rows(p, l);
}

/// Full `B x L x L` attention weights (inspection helper; not used by the
/// training path).
pub fn probabilities<T: Real>(g: AttnGeom, q: &[T], k: &[T], scale: T) -> Vec<T> {
    let (l, d) = (g.len, g.dim);
    let mut out = vec![T::zero(); g.batch * l * l];
    for b in 0..g.batch {
        let r = g.slice(b);
        let kt = transpose(&k[r.clone()], l, d);
        for (i, p) in out[b * l * l..][..l * l].chunks_exact_mut(l).enumerate() {
            probs_row(&q[r.start + i * d..][..d], &kt, scale, p);
        }
    }
    out
}

pub fn forward<T: Real>(g: AttnGeom, q: &[T], k: &[T], v: &[T], scale: T) -> Vec<T> {
    let (l, d) = (g.len, g.dim);
    let mut out = vec![T::zero(); q.len()];
    let mut p = vec![T::zero(); l];
    for b in 0..g.batch {
        let r = g.slice(b);
        let kt = transpose(&k[r.clone()], l, d);
        let vt = transpose(&v[r.clone()], l, d);
        for (qi, oi) in q[r.clone()].chunks_exact(d).zip(out[r].chunks_exact_mut(d)) {
            probs_row(qi, &kt, scale, &mut p);
            for (c, o) in oi.iter_mut().enumerate() {
                *o = lanes::dot(&p, &vt[c * l..(c + 1) * l]);
            }
        }
    }
    out
}

/// Returns `(dq, dk, dv)`.
pub fn backward<T: Real>(
    g: AttnGeom,
    q: &[T],
    k: &[T],
    v: &[T],
    scale: T,
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (l, d) = (g.len, g.dim);
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut p = vec![T::zero(); l];
    let mut dp = vec![T::zero(); l];
    for b in 0..g.batch {
        let r = g.slice(b);
        let kt = transpose(&k[r.clone()], l, d);
        let vt = transpose(&v[r.clone()], l, d);
        let mut dkt = vec![T::zero(); l * d];
        let mut dvt = vec![T::zero(); l * d];
        let rows = q[r.clone()].chunks_exact(d).zip(dout[r.clone()].chunks_exact(d));
        for ((qi, doi), dqi) in rows.zip(dq[r.clone()].chunks_exact_mut(d)) {
            probs_row(qi, &kt, scale, &mut p);
            // dP = dO · Vᵀ and dV += Pᵀ · dO, one value column at a time
            dp.fill(T::zero());
            for (c, &g) in doi.iter().enumerate() {
                let col = c * l..(c + 1) * l;
                lanes::axpy(g, &vt[col.clone()], &mut dp);
                lanes::axpy(g, &p, &mut dvt[col]);
            }
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)), stored back into dp
            let dot = lanes::dot(&p, &dp);
            for (dpv, &pv) in dp.iter_mut().zip(&p) {
                *dpv = pv * (*dpv - dot);
            }
            // dQ = scale · dS · K and dK += scale · dSᵀ · Q
            for (c, (dqc, &qc)) in dqi.iter_mut().zip(qi).enumerate() {
                let col = c * l..(c + 1) * l;
                *dqc = scale * lanes::dot(&dp, &kt[col.clone()]);
                lanes::axpy(scale * qc, &dp, &mut dkt[col]);
            }
        }
        untranspose(&dkt, l, d, &mut dk[r.clone()]);
        untranspose(&dvt, l, d, &mut dv[r]);
    }
    (dq, dk, dv)
}
