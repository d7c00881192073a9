//! Slice-level forward/backward kernels used by [`super::Graph`].
//!
//! Convolutions lower to GEMM through im2col, one sample at a time (or one
//! GEMM for the whole batch on small images). Batch samples are processed in
//! parallel; cross-sample reductions (weight and
//! bias gradients) are summed in sample order so results do not depend on
//! scheduling.

use rayon::prelude::*;

use super::Scalar;

/// Sliding-window geometry over a `(channels, h, w)` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Window {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Window {
    /// `None` unless `(h + 2p - k)` is a nonnegative multiple of the stride.
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Window> {
        if k == 0 || stride == 0 || h + 2 * pad < k || w + 2 * pad < k {
            return None;
        }
        let (sh, sw) = (h + 2 * pad - k, w + 2 * pad - k);
        if sh % stride != 0 || sw % stride != 0 {
            return None;
        }
        Some(Window { channels, h, w, k, stride, pad, oh: sh / stride + 1, ow: sw / stride + 1 })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Output columns `ox` whose input column `ox*s + kx - p` is in range.
    #[inline]
    fn valid_ox(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        // ox*s + kx >= p  and  ox*s + kx - p < w
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s).min(self.ow) };
        let hi_excl = if self.w + self.pad > kx { (self.w + self.pad - kx).div_ceil(s).min(self.ow) } else { 0 };
        (lo, hi_excl.max(lo))
    }

    /// Unfolds one image into `cols` of shape `(C*k*k, oh*ow)`.
    pub fn im2col<T: Scalar>(&self, img: &[T], cols: &mut [T]) {
        self.im2col_ld(img, cols, self.col_cols());
    }

    /// [`Window::im2col`] into a matrix whose rows are `ld` apart.
    pub fn im2col_ld<T: Scalar>(&self, img: &[T], cols: &mut [T], ld: usize) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let ncol = self.col_cols();
        for c in 0..self.channels {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ld..row * ld + ncol];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let out = &mut dst[oy * self.ow..(oy + 1) * self.ow];
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            out.fill(T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        out[..lo].fill(T::zero());
                        out[hi..].fill(T::zero());
                        if lo == hi {
                            continue;
                        }
                        if s == 1 {
                            let start = lo + kx - p;
                            out[lo..hi].copy_from_slice(&src[start..start + (hi - lo)]);
                        } else {
                            for ox in lo..hi {
                                out[ox] = src[ox * s + kx - p];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Window::im2col`]: accumulates `cols` back into `img`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], img: &mut [T]) {
        self.col2im_ld(cols, img, self.col_cols());
    }

    pub fn col2im_ld<T: Scalar>(&self, cols: &[T], img: &mut [T], ld: usize) {
        let (k, s, p) = (self.k, self.stride, self.pad);
        let ncol = self.col_cols();
        for c in 0..self.channels {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ld..row * ld + ncol];
                    let (lo, hi) = self.valid_ox(kx);
                    for oy in 0..self.oh {
                        let iy = (oy * s + ky) as isize - p as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let line = &src[oy * self.ow..(oy + 1) * self.ow];
                        if lo == hi {
                            continue;
                        }
                        if s == 1 {
                            let start = lo + kx - p;
                            dst[start..start + (hi - lo)].iter_mut().zip(&line[lo..hi]).for_each(|(d, &v)| *d += v);
                        } else {
                            for ox in lo..hi {
                                dst[ox * s + kx - p] += line[ox];
                            }
                        }
                    }
                }
            }
        }
    }

    fn is_identity(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// `C = A * B` for strided `A (m x k)`, `B (k x n)`, `C (m x n)`; computed
/// as `C^T = B^T * A^T` when that puts the larger extent first.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], rsa: isize, csa: isize, b: &[T], rsb: isize, csb: isize, c: &mut [T], rsc: isize, csc: isize) {
    if m < n {
        T::gemm(n, k, m, T::one(), b, csb, rsb, a, csa, rsa, T::zero(), c, csc, rsc);
    } else {
        T::gemm(m, k, n, T::one(), a, rsa, csa, b, rsb, csb, T::zero(), c, rsc, csc);
    }
}

/// Convolutions with at most this many output pixels per sample run as one
/// GEMM over the whole batch.
pub const BATCHED_COLS: usize = 256;

/// im2col of every sample side by side: `(C*k*k, n*oh*ow)`.
fn batch_cols<T: Scalar>(x: &[T], n: usize, win: &Window) -> Vec<T> {
    let (rows, ncol) = (win.col_rows(), win.col_cols());
    let in_per = win.channels * win.h * win.w;
    let wide = n * ncol;
    let mut cols = vec![T::zero(); rows * wide];
    for s in 0..n {
        win.im2col_ld(&x[s * in_per..(s + 1) * in_per], &mut cols[s * ncol..], wide);
    }
    cols
}

/// Cross-correlation forward. `x`: `(n, ci, h, w)`, `weight`: `(co, ci, k, k)`.
pub fn conv2d_forward<T: Scalar>(x: &[T], n: usize, win: &Window, weight: &[T], co: usize, bias: Option<&[T]>) -> Vec<T> {
    let in_per = win.channels * win.h * win.w;
    let out_per = co * win.col_cols();
    let (rows, ncol) = (win.col_rows(), win.col_cols());
    let mut out = vec![T::zero(); n * out_per];
    if n > 1 && ncol <= BATCHED_COLS {
        let wide = n * ncol;
        let cols = batch_cols(x, n, win);
        let mut yw = vec![T::zero(); co * wide];
        matmul(co, rows, wide, weight, rows as isize, 1, &cols, wide as isize, 1, &mut yw, wide as isize, 1);
        for (s, y) in out.chunks_mut(out_per.max(1)).enumerate() {
            for (o, dst) in y.chunks_mut(ncol).enumerate() {
                dst.copy_from_slice(&yw[o * wide + s * ncol..o * wide + (s + 1) * ncol]);
                if let Some(b) = bias {
                    dst.iter_mut().for_each(|v| *v += b[o]);
                }
            }
        }
        return out;
    }
    let scratch = if win.is_identity() { 0 } else { rows * ncol };
    out.par_chunks_mut(out_per.max(1)).enumerate().for_each_init(|| vec![T::zero(); scratch], |cols_buf, (s, y)| {
        let img = &x[s * in_per..(s + 1) * in_per];
        let cols: &[T] = if win.is_identity() {
            img
        } else {
            win.im2col(img, cols_buf);
            cols_buf
        };
        matmul(co, rows, ncol, weight, rows as isize, 1, cols, ncol as isize, 1, y, ncol as isize, 1);
        if let Some(b) = bias {
            for (o, chunk) in y.chunks_mut(ncol).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

/// Returns `(dx, dweight, dbias)` for [`conv2d_forward`]; `dx` only when requested.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    win: &Window,
    weight: &[T],
    co: usize,
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let in_per = win.channels * win.h * win.w;
    let (rows, ncol) = (win.col_rows(), win.col_cols());
    let out_per = co * ncol;
    if n > 1 && ncol <= BATCHED_COLS {
        let wide = n * ncol;
        let mut g = vec![T::zero(); co * wide];
        for s in 0..n {
            for o in 0..co {
                g[o * wide + s * ncol..o * wide + (s + 1) * ncol].copy_from_slice(&dy[s * out_per + o * ncol..s * out_per + (o + 1) * ncol]);
            }
        }
        let dw = want_dw.then(|| {
            let cols = batch_cols(x, n, win);
            let mut dw = vec![T::zero(); co * rows];
            matmul(co, wide, rows, &g, wide as isize, 1, &cols, 1, wide as isize, &mut dw, rows as isize, 1);
            dw
        });
        let dx = want_dx.then(|| {
            let mut dcols = vec![T::zero(); rows * wide];
            matmul(rows, co, wide, weight, 1, rows as isize, &g, wide as isize, 1, &mut dcols, wide as isize, 1);
            let mut dx = vec![T::zero(); n * in_per];
            for (s, img) in dx.chunks_mut(in_per.max(1)).enumerate() {
                win.col2im_ld(&dcols[s * ncol..], img, wide);
            }
            dx
        });
        let db = (0..co).map(|o| g[o * wide..(o + 1) * wide].iter().copied().sum::<T>()).collect();
        return (dx, dw, db);
    }
    let scratch = if win.is_identity() { 0 } else { rows * ncol };
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map_init(|| (vec![T::zero(); scratch], vec![T::zero(); rows * ncol]), |(cols_buf, dcols), s| {
            let img = &x[s * in_per..(s + 1) * in_per];
            let g = &dy[s * out_per..(s + 1) * out_per];
            let dw = want_dw.then(|| {
                let mut dw = vec![T::zero(); co * rows];
                let cols: &[T] = if win.is_identity() {
                    img
                } else {
                    win.im2col(img, cols_buf);
                    cols_buf
                };
                // dW (co x rows) = dY (co x ncol) * cols^T (ncol x rows)
                matmul(co, ncol, rows, g, ncol as isize, 1, cols, 1, ncol as isize, &mut dw, rows as isize, 1);
                dw
            });
            let dx = want_dx.then(|| {
                // dcols (rows x ncol) = W^T (rows x co) * dY (co x ncol)
                matmul(rows, co, ncol, weight, 1, rows as isize, g, ncol as isize, 1, dcols, ncol as isize, 1);
                if win.is_identity() {
                    dcols.clone()
                } else {
                    let mut dx = vec![T::zero(); in_per];
                    win.col2im(dcols, &mut dx);
                    dx
                }
            });
            (dx, dw)
        })
        .collect();

    let mut db = vec![T::zero(); co];
    for s in 0..n {
        for (o, b) in db.iter_mut().enumerate() {
            let start = s * out_per + o * ncol;
            *b += dy[start..start + ncol].iter().copied().sum::<T>();
        }
    }
    let mut dx_all = want_dx.then(|| Vec::with_capacity(n * in_per));
    let mut dw_all = want_dw.then(|| vec![T::zero(); co * rows]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b);
        }
    }
    (dx_all, dw_all, db)
}

/// Transposed convolution, padding 0. `x`: `(n, ci, h, w)`,
/// `weight`: `(ci, co, k, k)`. `win` describes the *output* image
/// `(co, oh_t, ow_t)` seen as the input of a regular convolution whose
/// output grid is `(h, w)`.
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], n: usize, ci: usize, win: &Window, weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (rows, ncol) = (win.col_rows(), win.col_cols());
    let in_per = ci * ncol;
    let out_per = win.channels * win.h * win.w;
    let mut out = vec![T::zero(); n * out_per];
    out.par_chunks_mut(out_per.max(1)).enumerate().for_each_init(|| vec![T::zero(); rows * ncol], |cols, (s, y)| {
        let xs = &x[s * in_per..(s + 1) * in_per];
        // cols (rows x ncol) = W^T (rows x ci) * x (ci x ncol)
        matmul(rows, ci, ncol, weight, 1, rows as isize, xs, ncol as isize, 1, cols, ncol as isize, 1);
        win.col2im(cols, y);
        if let Some(b) = bias {
            let plane = win.h * win.w;
            for (o, chunk) in y.chunks_mut(plane).enumerate() {
                chunk.iter_mut().for_each(|v| *v += b[o]);
            }
        }
    });
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    win: &Window,
    weight: &[T],
    dy: &[T],
    want_dx: bool,
    want_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>, Vec<T>) {
    let (rows, ncol) = (win.col_rows(), win.col_cols());
    let in_per = ci * ncol;
    let out_per = win.channels * win.h * win.w;
    let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
        .into_par_iter()
        .map_init(|| vec![T::zero(); rows * ncol], |dcols, s| {
            let xs = &x[s * in_per..(s + 1) * in_per];
            let g = &dy[s * out_per..(s + 1) * out_per];
            win.im2col(g, dcols);
            let dx = want_dx.then(|| {
                let mut dx = vec![T::zero(); in_per];
                // dx (ci x ncol) = W (ci x rows) * dcols (rows x ncol)
                matmul(ci, rows, ncol, weight, rows as isize, 1, &dcols, ncol as isize, 1, &mut dx, ncol as isize, 1);
                dx
            });
            let dw = want_dw.then(|| {
                let mut dw = vec![T::zero(); ci * rows];
                // dW (ci x rows) = x (ci x ncol) * dcols^T (ncol x rows)
                matmul(ci, ncol, rows, xs, ncol as isize, 1, &dcols, 1, ncol as isize, &mut dw, rows as isize, 1);
                dw
            });
            (dx, dw)
        })
        .collect();
    let plane = win.h * win.w;
    let mut db = vec![T::zero(); win.channels];
    for s in 0..n {
        for (o, b) in db.iter_mut().enumerate() {
            let start = s * out_per + o * plane;
            *b += dy[start..start + plane].iter().copied().sum::<T>();
        }
    }
    let mut dx_all = want_dx.then(|| Vec::with_capacity(n * in_per));
    let mut dw_all = want_dw.then(|| vec![T::zero(); ci * rows]);
    for (dx, dw) in per_sample {
        if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
            all.extend_from_slice(&dx);
        }
        if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
            all.iter_mut().zip(&dw).for_each(|(a, b)| *a += *b);
        }
    }
    (dx_all, dw_all, db)
}

/// Max pooling with `-inf` padding. Returns outputs and, per output, the flat
/// input index of the first maximal element in row-major window order.
pub fn maxpool_forward<T: Scalar>(x: &[T], planes: usize, win: &Window) -> (Vec<T>, Vec<u32>) {
    let (h, w, k, s, p) = (win.h, win.w, win.k, win.stride, win.pad);
    let out_plane = win.oh * win.ow;
    let mut out = vec![T::zero(); planes * out_plane];
    let mut arg = vec![0u32; planes * out_plane];
    out.par_chunks_mut(out_plane)
        .zip(arg.par_chunks_mut(out_plane))
        .enumerate()
        .for_each(|(pl, (y, a))| {
            let base = pl * h * w;
            let src = &x[base..base + h * w];
            for oy in 0..win.oh {
                let y0 = (oy * s) as isize - p as isize;
                let ys = y0.max(0) as usize..((y0 + k as isize).min(h as isize)) as usize;
                for ox in 0..win.ow {
                    let x0 = (ox * s) as isize - p as isize;
                    let xs = x0.max(0) as usize..((x0 + k as isize).min(w as isize)) as usize;
                    let mut best = T::neg_infinity();
                    let mut best_idx = 0usize;
                    for iy in ys.clone() {
                        for ix in xs.clone() {
                            let v = src[iy * w + ix];
                            if v > best {
                                best = v;
                                best_idx = iy * w + ix;
                            }
                        }
                    }
                    let o = oy * win.ow + ox;
                    y[o] = best;
                    a[o] = (base + best_idx) as u32;
                }
            }
        });
    (out, arg)
}

/// Per-axis bilinear taps for 2x upsampling with half-pixel centres:
/// `src = (dst + 0.5) / 2 - 0.5`, clamped to `[0, n - 1]`.
pub fn upsample_taps(n: usize) -> Vec<(usize, usize, f64)> {
    (0..2 * n)
        .map(|d| {
            let src = ((d as f64 + 0.5) / 2.0 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

pub fn upsample_forward<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * oh * ow];
    out.par_chunks_mut(oh * ow).enumerate().for_each(|(pl, y)| {
        let src = &x[pl * h * w..(pl + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::from_f64(ly), T::from_f64(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                y[oy * ow + ox] = hy * (hx * src[y0 * w + x0] + lx * src[y0 * w + x1])
                    + ly * (hx * src[y1 * w + x0] + lx * src[y1 * w + x1]);
            }
        }
    });
    out
}

pub fn upsample_backward<T: Scalar>(dy: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let ty = upsample_taps(h);
    let tx = upsample_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    dx.par_chunks_mut(h * w).enumerate().for_each(|(pl, g)| {
        let src = &dy[pl * oh * ow..(pl + 1) * oh * ow];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let (ly, hy) = (T::from_f64(ly), T::from_f64(1.0 - ly));
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let (lx, hx) = (T::from_f64(lx), T::from_f64(1.0 - lx));
                let v = src[oy * ow + ox];
                g[y0 * w + x0] += hy * hx * v;
                g[y0 * w + x1] += hy * lx * v;
                g[y1 * w + x0] += ly * hx * v;
                g[y1 * w + x1] += ly * lx * v;
            }
        }
    });
    dx
}
