//! 2-D cross-correlation with zero padding, lowered to GEMM. Stride-1
//! kernels use one GEMM per tap over a padded copy of the input; other
//! strides go through im2col.

use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

fn out_extent(len: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    let padded = len + 2 * padding;
    if kernel > padded {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kernel} larger than padded extent {padded}"),
        ));
    }
    if (padded - kernel) % stride != 0 {
        return Err(shape_err(
            "conv2d",
            format!("extent {len} with kernel {kernel}, stride {stride}, padding {padding} is not integral"),
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

impl ConvGeom {
    pub fn new(x: &[usize], w: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if x.len() != 4 || w.len() != 4 {
            return Err(shape_err(
                "conv2d",
                format!("expected 4-D input and weight, got {x:?} and {w:?}"),
            ));
        }
        if w[2] != w[3] {
            return Err(shape_err("conv2d", format!("kernel must be square, got {w:?}")));
        }
        if x[1] != w[1] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels but weight expects {}", x[1], w[1]),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be at least 1"));
        }
        let kernel = w[2];
        Ok(Self {
            batch: x[0],
            in_channels: x[1],
            height: x[2],
            width: x[3],
            out_channels: w[0],
            kernel,
            stride,
            padding,
            out_height: out_extent(x[2], kernel, stride, padding)?,
            out_width: out_extent(x[3], kernel, stride, padding)?,
        })
    }

    pub fn out_dims(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_height, self.out_width]
    }

    fn pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn image_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    fn out_plane(&self) -> usize {
        self.out_height * self.out_width
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// Output columns `lo..hi` whose input column `ox·s + kx − p` lies inside
    /// the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let (s, p) = (self.stride, self.padding);
        let lo = p.saturating_sub(kx).div_ceil(s);
        let hi = if self.width + p > kx {
            ((self.width + p - kx - 1) / s + 1).min(self.out_width)
        } else {
            0
        };
        (lo.min(hi), hi)
    }

    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let src = &img[c * self.height * self.width..][..self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * plane..][..plane];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..self.out_height {
                        let line = &mut dst[oy * self.out_width..][..self.out_width];
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= self.height {
                            line.fill(T::zero());
                            continue;
                        }
                        line[..lo].fill(T::zero());
                        line[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        let src_row = &src[iy * self.width..][..self.width];
                        let start = lo * s + kx - p;
                        if s == 1 {
                            line[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for (v, &x) in line[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(s)) {
                                *v = x;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let (k, s, p) = (self.kernel, self.stride, self.padding);
        let plane = self.out_plane();
        for c in 0..self.in_channels {
            let dst = &mut img[c * self.height * self.width..][..self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * plane..][..plane];
                    let (lo, hi) = self.valid_cols(kx);
                    if lo == hi {
                        continue;
                    }
                    for oy in 0..self.out_height {
                        let iy = (oy * s + ky).wrapping_sub(p);
                        if iy >= self.height {
                            continue;
                        }
                        let line = &src[oy * self.out_width..][lo..hi];
                        let start = lo * s + kx - p;
                        let dst_row = &mut dst[iy * self.width..][..self.width];
                        if s == 1 {
                            for (d, &v) in dst_row[start..start + (hi - lo)].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst_row[start..].iter_mut().step_by(s).zip(line) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward<T: Real>(&self, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
        let plane = self.out_plane();
        let patch = self.patch_len();
        let out_len = self.out_channels * plane;
        let mut out = vec![T::zero(); self.batch * out_len];
        if self.shifted() {
            self.forward_shifted(x, w, bias, &mut out);
            return out;
        }
        let mut cols = if self.pointwise() {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        for n in 0..self.batch {
            let img = &x[n * self.image_len()..][..self.image_len()];
            let y = &mut out[n * out_len..][..out_len];
            if let Some(b) = bias {
                for (o, row) in y.chunks_exact_mut(plane).enumerate() {
                    row.fill(b[o]);
                }
            }
            let cols_ref: &[T] = if self.pointwise() {
                img
            } else {
                self.im2col(img, &mut cols);
                &cols
            };
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                self.out_channels,
                patch,
                plane,
                T::one(),
                (w, patch, 1),
                (cols_ref, plane, 1),
                beta,
                (y, plane, 1),
            );
        }
        out
    }

    /// Gradients w.r.t. input, weight and bias (each only when requested).
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        dy: &[T],
        need: [bool; 3],
    ) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
        let plane = self.out_plane();
        let patch = self.patch_len();
        let out_len = self.out_channels * plane;
        let mut dx = need[0].then(|| vec![T::zero(); x.len()]);
        let mut dw = need[1].then(|| vec![T::zero(); w.len()]);
        let db = need[2].then(|| {
            let mut db = vec![T::zero(); self.out_channels];
            for n in 0..self.batch {
                for (o, row) in dy[n * out_len..][..out_len].chunks_exact(plane).enumerate() {
                    db[o] += row.iter().copied().sum::<T>();
                }
            }
            db
        });
        if self.shifted() {
            self.backward_shifted(x, w, dy, dx.as_deref_mut(), dw.as_deref_mut());
            return (dx, dw, db);
        }
        let pointwise = self.pointwise();
        let mut cols = if pointwise || !need[1] {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        let mut dcols = if pointwise || !need[0] {
            Vec::new()
        } else {
            vec![T::zero(); patch * plane]
        };
        for n in 0..self.batch {
            let dy_n = &dy[n * out_len..][..out_len];
            let img = &x[n * self.image_len()..][..self.image_len()];
            if let Some(dw) = dw.as_mut() {
                let cols_ref: &[T] = if pointwise {
                    img
                } else {
                    self.im2col(img, &mut cols);
                    &cols
                };
                // dW += dY · colsᵀ
                T::gemm(
                    self.out_channels,
                    plane,
                    patch,
                    T::one(),
                    (dy_n, plane, 1),
                    (cols_ref, 1, plane),
                    T::one(),
                    (dw, patch, 1),
                );
            }
            if let Some(dx) = dx.as_mut() {
                let dimg = &mut dx[n * self.image_len()..][..self.image_len()];
                if pointwise {
                    T::gemm(
                        patch,
                        self.out_channels,
                        plane,
                        T::one(),
                        (w, 1, patch),
                        (dy_n, plane, 1),
                        T::zero(),
                        (dimg, plane, 1),
                    );
                } else {
                    // dcols = Wᵀ · dY
                    T::gemm(
                        patch,
                        self.out_channels,
                        plane,
                        T::one(),
                        (w, 1, patch),
                        (dy_n, plane, 1),
                        T::zero(),
                        (&mut dcols, plane, 1),
                    );
                    self.col2im(&dcols, dimg);
                }
            }
        }
        (dx, dw, db)
    }
}

/// Stride-1 convolutions with a spatial kernel run as one GEMM per kernel
/// tap over a zero-padded copy of the input, with no `im2col` buffer.
/// Outputs are computed on the padded row pitch `Wp`, so tap `(ky, kx)`
/// reads the padded image at the flat offset `ky·Wp + kx`; the `k − 1`
/// columns at the end of each output row are scratch and get discarded.
impl ConvGeom {
    fn shifted(&self) -> bool {
        self.stride == 1 && self.kernel > 1
    }

    fn padded_pitch(&self) -> (usize, usize) {
        (self.height + 2 * self.padding, self.width + 2 * self.padding)
    }

    /// Length of the flat output run on the padded pitch.
    fn run(&self) -> usize {
        let (_, wp) = self.padded_pitch();
        (self.out_height - 1) * wp + self.out_width
    }

    fn tap_offsets(&self) -> Vec<usize> {
        let (_, wp) = self.padded_pitch();
        let k = self.kernel;
        (0..k * k).map(|t| (t / k) * wp + t % k).collect()
    }

    /// Copies `img` into the interior of `xp`; the border is never written
    /// and stays zero across calls.
    fn pad_into<T: Real>(&self, img: &[T], xp: &mut [T]) {
        let (hp, wp) = self.padded_pitch();
        let (h, w, p) = (self.height, self.width, self.padding);
        for (src, dst) in img.chunks_exact(h * w).zip(xp.chunks_exact_mut(hp * wp)) {
            for (row, line) in src.chunks_exact(w).enumerate() {
                dst[(row + p) * wp + p..][..w].copy_from_slice(line);
            }
        }
    }

    fn forward_shifted<T: Real>(&self, x: &[T], w: &[T], bias: Option<&[T]>, out: &mut [T]) {
        let (hp, wp) = self.padded_pitch();
        let (run, patch, taps) = (self.run(), self.patch_len(), self.kernel * self.kernel);
        let (ow, plane) = (self.out_width, self.out_plane());
        let mut xp = vec![T::zero(); self.in_channels * hp * wp];
        let mut yw = vec![T::zero(); self.out_channels * run];
        for (img, y) in x
            .chunks_exact(self.image_len())
            .zip(out.chunks_exact_mut(self.out_channels * plane))
        {
            self.pad_into(img, &mut xp);
            for (t, &off) in self.tap_offsets().iter().enumerate() {
                let beta = if t == 0 { T::zero() } else { T::one() };
                T::gemm(
                    self.out_channels,
                    self.in_channels,
                    run,
                    T::one(),
                    (&w[t..], patch, taps),
                    (&xp[off..], hp * wp, 1),
                    beta,
                    (&mut yw, run, 1),
                );
            }
            for (o, (dst, src)) in y.chunks_exact_mut(plane).zip(yw.chunks_exact(run)).enumerate() {
                let b = bias.map_or(T::zero(), |b| b[o]);
                for (line, wide) in dst.chunks_exact_mut(ow).zip(src.chunks(wp)) {
                    for (v, &s) in line.iter_mut().zip(wide) {
                        *v = s + b;
                    }
                }
            }
        }
    }

    fn backward_shifted<T: Real>(
        &self,
        x: &[T],
        w: &[T],
        dy: &[T],
        mut dx: Option<&mut [T]>,
        mut dw: Option<&mut [T]>,
    ) {
        let (hp, wp) = self.padded_pitch();
        let (run, patch, taps) = (self.run(), self.patch_len(), self.kernel * self.kernel);
        let (ow, plane, p) = (self.out_width, self.out_plane(), self.padding);
        let offsets = self.tap_offsets();
        let padded_len = self.in_channels * hp * wp;
        let mut xp = if dw.is_some() { vec![T::zero(); padded_len] } else { Vec::new() };
        let mut dxp = if dx.is_some() { vec![T::zero(); padded_len] } else { Vec::new() };
        // scratch columns stay zero so they contribute nothing
        let mut dyw = vec![T::zero(); self.out_channels * run];
        for n in 0..self.batch {
            let dy_n = &dy[n * self.out_channels * plane..][..self.out_channels * plane];
            for (src, wide) in dy_n.chunks_exact(plane).zip(dyw.chunks_exact_mut(run)) {
                for (line, dst) in src.chunks_exact(ow).zip(wide.chunks_mut(wp)) {
                    dst[..ow].copy_from_slice(line);
                }
            }
            if let Some(dx) = dx.as_deref_mut() {
                dxp.fill(T::zero());
                for (t, &off) in offsets.iter().enumerate() {
                    T::gemm(
                        self.in_channels,
                        self.out_channels,
                        run,
                        T::one(),
                        (&w[t..], taps, patch),
                        (&dyw, run, 1),
                        T::one(),
                        (&mut dxp[off..], hp * wp, 1),
                    );
                }
                let dimg = &mut dx[n * self.image_len()..][..self.image_len()];
                let (h, wd) = (self.height, self.width);
                for (dst, src) in dimg.chunks_exact_mut(h * wd).zip(dxp.chunks_exact(hp * wp)) {
                    for (row, line) in dst.chunks_exact_mut(wd).enumerate() {
                        line.copy_from_slice(&src[(row + p) * wp + p..][..wd]);
                    }
                }
            }
            if let Some(dw) = dw.as_deref_mut() {
                self.pad_into(&x[n * self.image_len()..][..self.image_len()], &mut xp);
                // dW[:, :, tap] += dY · shifted(xp)ᵀ
                for (t, &off) in offsets.iter().enumerate() {
                    T::gemm(
                        self.out_channels,
                        run,
                        self.in_channels,
                        T::one(),
                        (&dyw, run, 1),
                        (&xp[off..], 1, hp * wp),
                        T::one(),
                        (&mut dw[t..], patch, taps),
                    );
                }
            }
        }
    }
}
