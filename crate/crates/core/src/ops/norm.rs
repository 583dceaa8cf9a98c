//! Batch and layer normalization kernels.
//!
//! Tensors are viewed as `N x C x S` where `S` is the product of the trailing
//! (spatial) extents. Batch normalization reduces over `N x S` for each
//! channel; layer normalization reduces over `C` at each `(n, s)` position.

use crate::real::Real;

pub const NORM_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug)]
pub struct NormGeom {
    pub batch: usize,
    pub channels: usize,
    pub spatial: usize,
}

impl NormGeom {
    pub fn of(dims: &[usize]) -> Option<Self> {
        if dims.len() < 2 {
            return None;
        }
        Some(Self {
            batch: dims[0],
            channels: dims[1],
            spatial: dims[2..].iter().product(),
        })
    }

    #[inline]
    fn at(&self, n: usize, c: usize, s: usize) -> usize {
        (n * self.channels + c) * self.spatial + s
    }
}

/// Saved context for the backward pass.
#[derive(Clone, Debug)]
pub struct NormSaved<T> {
    pub xhat: Vec<T>,
    /// Per channel (batch kind) or per position (layer kind).
    pub inv_std: Vec<T>,
    /// Whether the statistics came from the input itself (train-mode batch
    /// norm and layer norm) rather than fixed running estimates.
    pub batch_stats: bool,
}

/// Per-channel mean and biased variance over `N x S`.
pub fn channel_moments<T: Real>(g: NormGeom, x: &[T]) -> (Vec<T>, Vec<T>) {
    let count = T::of((g.batch * g.spatial) as f64);
    let mut mean = vec![T::zero(); g.channels];
    let mut var = vec![T::zero(); g.channels];
    for c in 0..g.channels {
        let mut acc = T::zero();
        for n in 0..g.batch {
            acc += x[g.at(n, c, 0)..][..g.spatial].iter().copied().sum::<T>();
        }
        let m = acc / count;
        let mut sq = T::zero();
        for n in 0..g.batch {
            for &v in &x[g.at(n, c, 0)..][..g.spatial] {
                sq += (v - m) * (v - m);
            }
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

/// Batch normalization with the given per-channel statistics.
pub fn batch_norm_forward<T: Real>(
    g: NormGeom,
    x: &[T],
    scale: &[T],
    shift: &[T],
    mean: &[T],
    var: &[T],
    batch_stats: bool,
) -> (Vec<T>, NormSaved<T>) {
    let eps = T::of(NORM_EPS);
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let base = g.at(n, c, 0);
            for s in 0..g.spatial {
                let h = (x[base + s] - mean[c]) * inv_std[c];
                xhat[base + s] = h;
                y[base + s] = scale[c] * h + shift[c];
            }
        }
    }
    (
        y,
        NormSaved {
            xhat,
            inv_std,
            batch_stats,
        },
    )
}

/// Returns `(dx, dscale, dshift)`.
pub fn batch_norm_backward<T: Real>(
    g: NormGeom,
    saved: &NormSaved<T>,
    scale: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dscale = vec![T::zero(); g.channels];
    let mut dshift = vec![T::zero(); g.channels];
    for n in 0..g.batch {
        for c in 0..g.channels {
            let base = g.at(n, c, 0);
            for s in 0..g.spatial {
                dscale[c] += dy[base + s] * saved.xhat[base + s];
                dshift[c] += dy[base + s];
            }
        }
    }
    let count = T::of((g.batch * g.spatial) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    for c in 0..g.channels {
        let k = scale[c] * saved.inv_std[c];
        // Σ dxhat = γ·Σdy, Σ dxhat·xhat = γ·Σ dy·xhat
        let mean_d = dshift[c] / count;
        let mean_dh = dscale[c] / count;
        for n in 0..g.batch {
            let base = g.at(n, c, 0);
            for s in 0..g.spatial {
                let i = base + s;
                dx[i] = if saved.batch_stats {
                    k * (dy[i] - mean_d - saved.xhat[i] * mean_dh)
                } else {
                    k * dy[i]
                };
            }
        }
    }
    (dx, dscale, dshift)
}

pub fn layer_norm_forward<T: Real>(
    g: NormGeom,
    x: &[T],
    scale: &[T],
    shift: &[T],
) -> (Vec<T>, NormSaved<T>) {
    let eps = T::of(NORM_EPS);
    let count = T::of(g.channels as f64);
    let mut inv_std = vec![T::zero(); g.batch * g.spatial];
    let mut xhat = vec![T::zero(); x.len()];
    let mut y = vec![T::zero(); x.len()];
    let mut col = vec![T::zero(); g.channels];
    for n in 0..g.batch {
        for s in 0..g.spatial {
            for (c, v) in col.iter_mut().enumerate() {
                *v = x[g.at(n, c, s)];
            }
            let mean = col.iter().copied().sum::<T>() / count;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[n * g.spatial + s] = inv;
            for (c, &v) in col.iter().enumerate() {
                let i = g.at(n, c, s);
                let h = (v - mean) * inv;
                xhat[i] = h;
                y[i] = scale[c] * h + shift[c];
            }
        }
    }
    (
        y,
        NormSaved {
            xhat,
            inv_std,
            batch_stats: true,
        },
    )
}

pub fn layer_norm_backward<T: Real>(
    g: NormGeom,
    saved: &NormSaved<T>,
    scale: &[T],
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let count = T::of(g.channels as f64);
    let mut dscale = vec![T::zero(); g.channels];
    let mut dshift = vec![T::zero(); g.channels];
    let mut dx = vec![T::zero(); dy.len()];
    for n in 0..g.batch {
        for s in 0..g.spatial {
            let mut sum_d = T::zero();
            let mut sum_dh = T::zero();
            for c in 0..g.channels {
                let i = g.at(n, c, s);
                let dh = dy[i] * scale[c];
                sum_d += dh;
                sum_dh += dh * saved.xhat[i];
                dscale[c] += dy[i] * saved.xhat[i];
                dshift[c] += dy[i];
            }
            let inv = saved.inv_std[n * g.spatial + s];
            for c in 0..g.channels {
                let i = g.at(n, c, s);
                let dh = dy[i] * scale[c];
                dx[i] = inv * (dh - sum_d / count - saved.xhat[i] * sum_dh / count);
            }
        }
    }
    (dx, dscale, dshift)
}
