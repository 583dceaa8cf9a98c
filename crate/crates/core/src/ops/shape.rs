//! Pure data-movement kernels: permutation, concatenation, pixel
//! (un)shuffle, reflection padding and cropping.

use crate::error::{shape_err, Result};
use crate::real::Real;

fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = vec![1; dims.len()];
    for i in (0..dims.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * dims[i + 1];
    }
    s
}

pub fn check_perm(dims: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    let mut seen = vec![false; dims.len()];
    if perm.len() != dims.len() {
        return Err(shape_err("permute", format!("{perm:?} for rank {}", dims.len())));
    }
    for &p in perm {
        if p >= dims.len() || seen[p] {
            return Err(shape_err("permute", format!("{perm:?} is not a permutation")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| dims[p]).collect())
}

/// `out[i_0, .., i_r] = x[j]` where axis `k` of the output is axis `perm[k]`
/// of the input.
pub fn permute<T: Real>(x: &[T], dims: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(dims);
    let out_dims: Vec<usize> = perm.iter().map(|&p| dims[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    let mut idx = vec![0usize; out_dims.len()];
    let mut off = 0usize;
    for _ in 0..x.len() {
        out.push(x[off]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_dims[ax] {
                break;
            }
            off -= src_strides[ax] * out_dims[ax];
            idx[ax] = 0;
        }
    }
    out
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Splits `dims` around `axis` into (outer count, inner block size per unit).
pub fn axis_split(dims: &[usize], axis: usize) -> (usize, usize) {
    (dims[..axis].iter().product(), dims[axis + 1..].iter().product())
}

pub fn concat<T: Real>(parts: &[(&[T], &[usize])], axis: usize) -> Vec<T> {
    let (outer, inner) = axis_split(parts[0].1, axis);
    let total: usize = parts.iter().map(|p| p.0.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, dims) in parts {
            let block = dims[axis] * inner;
            out.extend_from_slice(&data[o * block..][..block]);
        }
    }
    out
}

fn dims4(dims: &[usize], op: &'static str) -> Result<[usize; 4]> {
    dims.try_into()
        .map_err(|_| shape_err(op, format!("expected a 4-D tensor, got {dims:?}")))
}

pub fn unshuffle_dims(dims: &[usize], r: usize) -> Result<[usize; 4]> {
    let [n, c, h, w] = dims4(dims, "pixel_unshuffle")?;
    if r == 0 || h % r != 0 || w % r != 0 {
        return Err(shape_err(
            "pixel_unshuffle",
            format!("spatial extents {h}x{w} not divisible by {r}"),
        ));
    }
    Ok([n, c * r * r, h / r, w / r])
}

pub fn shuffle_dims(dims: &[usize], r: usize) -> Result<[usize; 4]> {
    let [n, c, h, w] = dims4(dims, "pixel_shuffle")?;
    if r == 0 || c % (r * r) != 0 {
        return Err(shape_err(
            "pixel_shuffle",
            format!("{c} channels not divisible by {}", r * r),
        ));
    }
    Ok([n, c / (r * r), h * r, w * r])
}

/// Visits every (low-res index, high-res index) pair of the channel ordering
/// `c·r² + dy·r + dx`, given the high-resolution `N x C x H x W` extents.
fn for_each_pair(hi: [usize; 4], r: usize, mut f: impl FnMut(usize, usize)) {
    let [n, c, h, w] = hi;
    let (lh, lw) = (h / r, w / r);
    for b in 0..n {
        for ch in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let lc = ch * r * r + dy * r + dx;
                    for i in 0..lh {
                        let lo_row = ((b * c * r * r + lc) * lh + i) * lw;
                        let hi_row = ((b * c + ch) * h + i * r + dy) * w;
                        for j in 0..lw {
                            f(lo_row + j, hi_row + j * r + dx);
                        }
                    }
                }
            }
        }
    }
}

/// `out[n][c·r²+dy·r+dx][i][j] = x[n][c][i·r+dy][j·r+dx]`.
pub fn pixel_unshuffle<T: Real>(x: &[T], dims: [usize; 4], r: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for_each_pair(dims, r, |lo, hi| out[lo] = x[hi]);
    out
}

/// Exact inverse of [`pixel_unshuffle`]; `lo_dims` is the input's shape.
pub fn pixel_shuffle<T: Real>(x: &[T], lo_dims: [usize; 4], r: usize) -> Vec<T> {
    let [n, c, h, w] = lo_dims;
    let hi = [n, c / (r * r), h * r, w * r];
    let mut out = vec![T::zero(); x.len()];
    for_each_pair(hi, r, |lo, hi| out[hi] = x[lo]);
    out
}

fn reflect(i: usize, len: usize) -> usize {
    // Mirror without repeating the edge sample: len=4 → 0 1 2 3 2 1 0 ...
    if len == 1 {
        return 0;
    }
    let period = 2 * (len - 1);
    let m = i % period;
    if m < len {
        m
    } else {
        period - m
    }
}

/// Reflection-pads the bottom and right edges of an `N x C x H x W` tensor.
pub fn pad_reflect<T: Real>(x: &[T], dims: [usize; 4], bottom: usize, right: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (ph, pw) = (h + bottom, w + right);
    let mut out = Vec::with_capacity(n * c * ph * pw);
    for plane in x.chunks_exact(h * w).take(n * c) {
        for i in 0..ph {
            let row = &plane[reflect(i, h) * w..][..w];
            for j in 0..pw {
                out.push(row[reflect(j, w)]);
            }
        }
    }
    out
}

pub fn pad_reflect_backward<T: Real>(
    dy: &[T],
    dims: [usize; 4],
    bottom: usize,
    right: usize,
) -> Vec<T> {
    let [n, c, h, w] = dims;
    let (ph, pw) = (h + bottom, w + right);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (p, plane) in dy.chunks_exact(ph * pw).enumerate() {
        let dst = &mut dx[p * h * w..][..h * w];
        for i in 0..ph {
            for j in 0..pw {
                dst[reflect(i, h) * w + reflect(j, w)] += plane[i * pw + j];
            }
        }
    }
    dx
}

/// Keeps the top-left `h x w` window of every plane.
pub fn crop<T: Real>(x: &[T], dims: [usize; 4], h: usize, w: usize) -> Vec<T> {
    let [_, _, ih, iw] = dims;
    let mut out = Vec::new();
    for plane in x.chunks_exact(ih * iw) {
        for i in 0..h {
            out.extend_from_slice(&plane[i * iw..][..w]);
        }
    }
    out
}

pub fn crop_backward<T: Real>(dy: &[T], dims: [usize; 4], h: usize, w: usize) -> Vec<T> {
    let [n, c, ih, iw] = dims;
    let mut dx = vec![T::zero(); n * c * ih * iw];
    for (p, plane) in dy.chunks_exact(h * w).enumerate() {
        for i in 0..h {
            dx[p * ih * iw + i * iw..][..w].copy_from_slice(&plane[i * w..][..w]);
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let dims = [2, 3, 4];
        let x: Vec<f64> = (0..24).map(f64::from).collect();
        let y = permute(&x, &dims, &[2, 0, 1]);
        // y[k][i][j] = x[i][j][k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y[(k * 2 + i) * 3 + j], x[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&y, &[4, 2, 3], &inverse_perm(&[2, 0, 1]));
        assert_eq!(back, x);
    }

    #[test]
    fn reflection_indices() {
        let got: Vec<usize> = (0..8).map(|i| reflect(i, 4)).collect();
        assert_eq!(got, [0, 1, 2, 3, 2, 1, 0, 1]);
        assert_eq!(reflect(5, 1), 0);
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let x: Vec<f32> = (0..2 * 3 * 5).map(|v| v as f32).collect();
        let dims = [1, 2, 3, 5];
        let padded = pad_reflect(&x, dims, 1, 3);
        assert_eq!(padded.len(), 2 * 4 * 8);
        // bottom row mirrors row 1, right column 5 mirrors column 3
        assert_eq!(padded[3 * 8], x[5]);
        assert_eq!(padded[5], x[3]);
        assert_eq!(crop(&padded, [1, 2, 4, 8], 3, 5), x);
    }
}
