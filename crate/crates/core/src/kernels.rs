//! Slice-level forward and backward kernels used by the autodiff graph.
//!
//! All image buffers are `N x C x H x W`, row-major.

use rayon::prelude::*;

use crate::tensor::Real;

/// Output extent of a sliding window.
#[inline]
pub fn window_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    fn cols_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    /// 1x1, stride 1, no padding: the input plane is already the column matrix.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Range of output columns `ox` whose input column `ox*stride + kj - pad`
/// lies inside `[0, w)`.
#[inline]
fn valid_cols(g: &ConvGeom, kj: usize) -> (usize, usize) {
    let lo = if g.pad > kj { (g.pad - kj).div_ceil(g.stride) } else { 0 };
    let hi = if g.w + g.pad > kj {
        (g.w + g.pad - kj).div_ceil(g.stride).min(g.ow)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Writes the column matrix of one item into `cols`, a `K x ld` row-major
/// buffer, starting at column `offset`.
fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T], ld: usize, offset: usize) {
    let mut row = 0;
    for ci in 0..g.c_in {
        let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let dst = &mut cols[row * ld + offset..row * ld + offset + g.oh * g.ow];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo == hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        drow[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                    } else {
                        for (ox, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[(ox + lo) * g.stride + kj - g.pad];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates one item's columns into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, ld: usize, offset: usize, dx: &mut [T]) {
    let mut row = 0;
    for ci in 0..g.c_in {
        let dxc = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let (lo, hi) = valid_cols(g, kj);
                let src = &cols[row * ld + offset..row * ld + offset + g.oh * g.ow];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let srow = &src[oy * g.ow..(oy + 1) * g.ow];
                    if lo == hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let start = lo + kj - g.pad;
                        for (d, s) in drow[start..start + hi - lo].iter_mut().zip(&srow[lo..hi]) {
                            *d += *s;
                        }
                    } else {
                        for ox in lo..hi {
                            drow[ox * g.stride + kj - g.pad] += srow[ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Column matrix of the whole batch: `K x (N*P)`, item `i` occupying
/// columns `[i*P, (i+1)*P)`.
fn batch_cols<T: Real>(x: &[T], g: &ConvGeom, parallel: bool) -> Vec<T> {
    let plane = g.oh * g.ow;
    let k = g.cols_rows();
    let ld = g.n * plane;
    let in_len = g.c_in * g.h * g.w;
    if g.is_pointwise() {
        // Rows are input channels; just interleave items.
        let mut cols = vec![T::zero(); k * ld];
        for i in 0..g.n {
            for c in 0..k {
                cols[c * ld + i * plane..c * ld + (i + 1) * plane]
                    .copy_from_slice(&x[i * in_len + c * plane..i * in_len + (c + 1) * plane]);
            }
        }
        return cols;
    }
    let mut cols = vec![T::zero(); k * ld];
    if parallel && g.n > 1 {
        // Each item fills its own column block; build per item, then place.
        let parts: Vec<Vec<T>> = (0..g.n)
            .into_par_iter()
            .map(|i| {
                let mut part = vec![T::zero(); k * plane];
                im2col(&x[i * in_len..(i + 1) * in_len], g, &mut part, plane, 0);
                part
            })
            .collect();
        for (i, part) in parts.iter().enumerate() {
            for r in 0..k {
                cols[r * ld + i * plane..r * ld + (i + 1) * plane].copy_from_slice(&part[r * plane..(r + 1) * plane]);
            }
        }
    } else {
        for i in 0..g.n {
            im2col(&x[i * in_len..(i + 1) * in_len], g, &mut cols, ld, i * plane);
        }
    }
    cols
}

/// Cross-correlation forward pass (no kernel flip), one GEMM for the batch.
pub(crate) fn conv2d_forward<T: Real>(x: &[T], wt: &[T], bias: Option<&[T]>, g: &ConvGeom, parallel: bool) -> Vec<T> {
    let plane = g.oh * g.ow;
    let k = g.cols_rows();
    if g.n == 1 && g.is_pointwise() {
        let mut out = vec![T::zero(); g.c_out * plane];
        let beta = fill_bias(&mut out, bias, plane);
        T::gemm(g.c_out, k, plane, wt, false, x, false, &mut out, beta);
        return out;
    }
    let cols = batch_cols(x, g, parallel);
    let ld = g.n * plane;
    let mut wide = vec![T::zero(); g.c_out * ld];
    T::gemm(g.c_out, k, ld, wt, false, &cols, false, &mut wide, T::zero());
    let mut out = vec![T::zero(); g.n * g.c_out * plane];
    for i in 0..g.n {
        for co in 0..g.c_out {
            let b = bias.map_or(T::zero(), |b| b[co]);
            let dst = &mut out[(i * g.c_out + co) * plane..(i * g.c_out + co + 1) * plane];
            let src = &wide[co * ld + i * plane..co * ld + (i + 1) * plane];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s + b;
            }
        }
    }
    out
}

fn fill_bias<T: Real>(out: &mut [T], bias: Option<&[T]>, plane: usize) -> T {
    match bias {
        Some(b) => {
            for (co, chunk) in out.chunks_mut(plane).enumerate() {
                chunk.fill(b[co]);
            }
            T::one()
        }
        None => T::zero(),
    }
}

pub(crate) struct ConvGrads<T> {
    pub dx: Option<Vec<T>>,
    pub dw: Option<Vec<T>>,
    pub db: Option<Vec<T>>,
}

/// Gradients of the convolution. The batch is reduced inside single GEMMs
/// whose summation order does not depend on `parallel`.
pub(crate) fn conv2d_backward<T: Real>(
    x: &[T],
    wt: &[T],
    gy: &[T],
    g: &ConvGeom,
    want: (bool, bool, bool),
    parallel: bool,
) -> ConvGrads<T> {
    let (want_dx, want_dw, want_db) = want;
    let plane = g.oh * g.ow;
    let k = g.cols_rows();
    let ld = g.n * plane;
    let out_len = g.c_out * plane;
    let in_len = g.c_in * g.h * g.w;

    // gY rearranged to c_out x (N*P)
    let mut gy_wide = vec![T::zero(); g.c_out * ld];
    for i in 0..g.n {
        for co in 0..g.c_out {
            gy_wide[co * ld + i * plane..co * ld + (i + 1) * plane]
                .copy_from_slice(&gy[i * out_len + co * plane..i * out_len + (co + 1) * plane]);
        }
    }

    let dw = want_dw.then(|| {
        let cols = batch_cols(x, g, parallel);
        let mut dw = vec![T::zero(); g.c_out * k];
        T::gemm(g.c_out, ld, k, &gy_wide, false, &cols, true, &mut dw, T::zero());
        dw
    });
    let dx = want_dx.then(|| {
        let mut dcols = vec![T::zero(); k * ld];
        T::gemm(k, g.c_out, ld, wt, true, &gy_wide, false, &mut dcols, T::zero());
        let mut dx = vec![T::zero(); g.n * in_len];
        if g.is_pointwise() {
            for i in 0..g.n {
                for c in 0..k {
                    dx[i * in_len + c * plane..i * in_len + (c + 1) * plane]
                        .copy_from_slice(&dcols[c * ld + i * plane..c * ld + (i + 1) * plane]);
                }
            }
        } else if parallel && g.n > 1 {
            dx.par_chunks_mut(in_len)
                .enumerate()
                .for_each(|(i, d)| col2im(&dcols, g, ld, i * plane, d));
        } else {
            for (i, d) in dx.chunks_mut(in_len).enumerate() {
                col2im(&dcols, g, ld, i * plane, d);
            }
        }
        dx
    });
    let db = want_db.then(|| gy_wide.chunks(ld).map(|row| row.iter().copied().sum::<T>()).collect());
    ConvGrads { dx, dw, db }
}

/// Max pooling without padding. Returns the output and, per output cell,
/// the flat input index of the first maximum in row-major window order.
pub(crate) fn max_pool_forward<T: Real>(
    x: &[T],
    dims: [usize; 4],
    k: usize,
    stride: usize,
) -> (Vec<T>, Vec<u32>, usize, usize) {
    let [n, c, h, w] = dims;
    let oh = window_out(h, k, stride, 0);
    let ow = window_out(w, k, stride, 0);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                let mut best_v = x[best];
                for ki in 0..k {
                    for kj in 0..k {
                        let idx = base + (oy * stride + ki) * w + ox * stride + kj;
                        if x[idx] > best_v {
                            best_v = x[idx];
                            best = idx;
                        }
                    }
                }
                out.push(best_v);
                arg.push(best as u32);
            }
        }
    }
    (out, arg, oh, ow)
}

/// Average pooling with zero padding counted in the divisor.
pub(crate) fn avg_pool_forward<T: Real>(
    x: &[T],
    dims: [usize; 4],
    k: usize,
    stride: usize,
    pad: usize,
) -> (Vec<T>, usize, usize) {
    let [n, c, h, w] = dims;
    let oh = window_out(h, k, stride, pad);
    let ow = window_out(w, k, stride, pad);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = T::zero();
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            acc += x[base + iy as usize * w + ix as usize];
                        }
                    }
                }
                out.push(acc * inv);
            }
        }
    }
    (out, oh, ow)
}

pub(crate) fn avg_pool_backward<T: Real>(gy: &[T], dims: [usize; 4], k: usize, stride: usize, pad: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let oh = window_out(h, k, stride, pad);
    let ow = window_out(w, k, stride, pad);
    let inv = T::one() / T::from_f64((k * k) as f64);
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gy[plane * oh * ow + oy * ow + ox] * inv;
                for ki in 0..k {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kj in 0..k {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dx[base + iy as usize * w + ix as usize] += g;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Bin boundaries of adaptive pooling: `[floor(i*len/out), ceil((i+1)*len/out))`.
#[inline]
pub fn adaptive_bin(i: usize, len: usize, out: usize) -> (usize, usize) {
    let start = i * len / out;
    let end = ((i + 1) * len).div_ceil(out);
    (start, end)
}

pub(crate) fn adaptive_avg_forward<T: Real>(x: &[T], dims: [usize; 4], oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let mut acc = T::zero();
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        acc += x[base + iy * w + ix];
                    }
                }
                out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
            }
        }
    }
    out
}

pub(crate) fn adaptive_avg_backward<T: Real>(gy: &[T], dims: [usize; 4], oh: usize, ow: usize) -> Vec<T> {
    let [n, c, h, w] = dims;
    let mut dx = vec![T::zero(); n * c * h * w];
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            let (y0, y1) = adaptive_bin(oy, h, oh);
            for ox in 0..ow {
                let (x0, x1) = adaptive_bin(ox, w, ow);
                let g = gy[plane * oh * ow + oy * ow + ox] / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        dx[base + iy * w + ix] += g;
                    }
                }
            }
        }
    }
    dx
}
