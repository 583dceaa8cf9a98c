use crate::error::{shape_err, Result};
use crate::real::Real;

/// Batched `... x M x K` times `... x K x N`.
///
/// Leading extents must match exactly, or the right operand may be a plain
/// `K x N` matrix shared by every batch slice.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatMulGeom {
    pub lead: Vec<usize>,
    pub batch: usize,
    pub m: usize,
    pub k: usize,
    pub n: usize,
    pub shared_rhs: bool,
}

impl MatMulGeom {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err("matmul", format!("operands must be at least 2-D, got {a:?} and {b:?}")));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", format!("inner extents differ: {a:?} x {b:?}")));
        }
        let lead = a[..a.len() - 2].to_vec();
        let shared_rhs = b.len() == 2 && !lead.is_empty();
        if !shared_rhs && b[..b.len() - 2] != lead[..] {
            return Err(shape_err("matmul", format!("leading extents differ: {a:?} x {b:?}")));
        }
        Ok(Self {
            batch: lead.iter().product(),
            lead,
            m,
            k,
            n,
            shared_rhs,
        })
    }

    pub fn out_dims(&self) -> Vec<usize> {
        let mut d = self.lead.clone();
        d.extend([self.m, self.n]);
        d
    }

    fn rhs_offset(&self, i: usize) -> usize {
        if self.shared_rhs {
            0
        } else {
            i * self.k * self.n
        }
    }

    pub fn forward<T: Real>(&self, a: &[T], b: &[T]) -> Vec<T> {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut c = vec![T::zero(); self.batch * m * n];
        for i in 0..self.batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                (&a[i * m * k..], k, 1),
                (&b[self.rhs_offset(i)..], n, 1),
                T::zero(),
                (&mut c[i * m * n..], n, 1),
            );
        }
        c
    }

    pub fn backward<T: Real>(
        &self,
        a: &[T],
        b: &[T],
        dc: &[T],
        need: [bool; 2],
    ) -> (Option<Vec<T>>, Option<Vec<T>>) {
        let (m, k, n) = (self.m, self.k, self.n);
        let mut da = need[0].then(|| vec![T::zero(); a.len()]);
        let mut db = need[1].then(|| vec![T::zero(); b.len()]);
        for i in 0..self.batch {
            let dc_i = &dc[i * m * n..];
            if let Some(da) = da.as_mut() {
                // dA = dC · Bᵀ
                T::gemm(
                    m,
                    n,
                    k,
                    T::one(),
                    (dc_i, n, 1),
                    (&b[self.rhs_offset(i)..], 1, n),
                    T::zero(),
                    (&mut da[i * m * k..], k, 1),
                );
            }
            if let Some(db) = db.as_mut() {
                // dB (+)= Aᵀ · dC
                let beta = if self.shared_rhs { T::one() } else { T::zero() };
                let off = self.rhs_offset(i);
                T::gemm(
                    k,
                    m,
                    n,
                    T::one(),
                    (&a[i * m * k..], 1, k),
                    (dc_i, n, 1),
                    beta,
                    (&mut db[off..], n, 1),
                );
            }
        }
        (da, db)
    }
}
