//! Forward and adjoint kernels for the image primitives.
//!
//! Everything here works on raw `C×H×W` buffers; shape validation happens in
//! the graph layer.

use crate::scalar::{gemm, MatRef, Scalar};

/// Geometry of one 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        ((self.h + 2 * self.pad - self.k) / self.stride + 1, (self.w + 2 * self.pad - self.k) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel offset `koff`.
#[inline]
fn valid_range(out_len: usize, in_len: usize, koff: usize, stride: usize, pad: usize) -> (usize, usize) {
    // input index = o*stride + koff - pad must lie in [0, in_len)
    let lo = if koff >= pad { 0 } else { (pad - koff).div_ceil(stride) };
    let hi = if in_len + pad > koff { ((in_len + pad - koff - 1) / stride + 1).min(out_len) } else { 0 };
    (lo, hi.max(lo))
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    col.iter_mut().for_each(|v| *v = T::zero());
    for ci in 0..g.c_in {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_range(oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = valid_range(ow, g.w, kx, g.stride, g.pad);
                let row = ((ci * g.k + ky) * g.k + kx) * l;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    if g.stride == 1 {
                        let ix0 = x0 + kx - g.pad;
                        dst[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                    } else {
                        for ox in x0..x1 {
                            dst[ox] = src[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (y0, y1) = valid_range(oh, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (x0, x1) = valid_range(ow, g.w, kx, g.stride, g.pad);
                let row = ((ci * g.k + ky) * g.k + kx) * l;
                for oy in y0..y1 {
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &col[row + oy * ow..row + (oy + 1) * ow];
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    for ox in x0..x1 {
                        dst[ox * g.stride + kx - g.pad] += src[ox];
                    }
                }
            }
        }
    }
}

/// Output `C_out×H_out×W_out` of a cross-correlation with optional bias.
pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let mut out = vec![T::zero(); g.c_out * l];
    if let Some(b) = bias {
        for (co, chunk) in out.chunks_mut(l).enumerate() {
            chunk.iter_mut().for_each(|v| *v = b[co]);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    let wm = MatRef::new(w, g.c_out, g.col_rows());
    if g.is_pointwise() {
        gemm(wm, MatRef::new(x, g.c_in, l), beta, &mut out);
    } else {
        let mut col = vec![T::zero(); g.col_rows() * l];
        im2col(x, g, &mut col);
        gemm(wm, MatRef::new(&col, g.col_rows(), l), beta, &mut out);
    }
    out
}

/// Gradients of a convolution. Each requested buffer is accumulated into.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    gout: &[T],
    g: &ConvGeom,
    dx: Option<&mut [T]>,
    dw: Option<&mut [T]>,
    db: Option<&mut [T]>,
) {
    let (oh, ow) = g.out_hw();
    let l = oh * ow;
    let gm = MatRef::new(gout, g.c_out, l);
    if let Some(db) = db {
        for (co, chunk) in gout.chunks(l).enumerate() {
            db[co] += chunk.iter().copied().sum::<T>();
        }
    }
    let col_owned;
    let col: &[T] = if g.is_pointwise() {
        x
    } else if dw.is_some() {
        let mut c = vec![T::zero(); g.col_rows() * l];
        im2col(x, g, &mut c);
        col_owned = c;
        &col_owned
    } else {
        &[]
    };
    if let Some(dw) = dw {
        gemm(gm, MatRef::new(col, g.col_rows(), l).t(), T::one(), dw);
    }
    if let Some(dx) = dx {
        let wt = MatRef::new(w, g.c_out, g.col_rows()).t();
        if g.is_pointwise() {
            gemm(wt, gm, T::one(), dx);
        } else {
            let mut dcol = vec![T::zero(); g.col_rows() * l];
            gemm(wt, gm, T::zero(), &mut dcol);
            col2im(&dcol, g, dx);
        }
    }
}

/// Per-channel normalization statistics saved for the backward pass.
pub struct NormCache<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
}

pub fn instance_norm_forward<T: Scalar>(
    x: &[T],
    c: usize,
    hw: usize,
    gamma: &[T],
    beta: &[T],
    eps: T,
) -> (Vec<T>, NormCache<T>) {
    let mut y = vec![T::zero(); c * hw];
    let mut xhat = vec![T::zero(); c * hw];
    let mut inv_std = vec![T::zero(); c];
    let n = T::c(hw as f64);
    for ch in 0..c {
        let xs = &x[ch * hw..(ch + 1) * hw];
        let mean = xs.iter().copied().sum::<T>() / n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let is = T::one() / (var + eps).sqrt();
        inv_std[ch] = is;
        let xh = &mut xhat[ch * hw..(ch + 1) * hw];
        let ys = &mut y[ch * hw..(ch + 1) * hw];
        for i in 0..hw {
            xh[i] = (xs[i] - mean) * is;
            ys[i] = gamma[ch] * xh[i] + beta[ch];
        }
    }
    (y, NormCache { xhat, inv_std })
}

#[allow(clippy::too_many_arguments)]
pub fn instance_norm_backward<T: Scalar>(
    gout: &[T],
    cache: &NormCache<T>,
    c: usize,
    hw: usize,
    gamma: &[T],
    dx: Option<&mut [T]>,
    dgamma: Option<&mut [T]>,
    dbeta: Option<&mut [T]>,
) {
    let n = T::c(hw as f64);
    let mut sum_g = vec![T::zero(); c];
    let mut sum_gx = vec![T::zero(); c];
    for ch in 0..c {
        let gs = &gout[ch * hw..(ch + 1) * hw];
        let xh = &cache.xhat[ch * hw..(ch + 1) * hw];
        sum_g[ch] = gs.iter().copied().sum();
        sum_gx[ch] = gs.iter().zip(xh).map(|(&a, &b)| a * b).sum();
    }
    if let Some(dg) = dgamma {
        for ch in 0..c {
            dg[ch] += sum_gx[ch];
        }
    }
    if let Some(db) = dbeta {
        for ch in 0..c {
            db[ch] += sum_g[ch];
        }
    }
    if let Some(dx) = dx {
        for ch in 0..c {
            let gs = &gout[ch * hw..(ch + 1) * hw];
            let xh = &cache.xhat[ch * hw..(ch + 1) * hw];
            let d = &mut dx[ch * hw..(ch + 1) * hw];
            // dxhat = g*gamma; dx = inv_std/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
            let k = gamma[ch] * cache.inv_std[ch] / n;
            let sg = sum_g[ch];
            let sgx = sum_gx[ch];
            for i in 0..hw {
                d[i] += k * (n * gs[i] - sg - xh[i] * sgx);
            }
        }
    }
}

/// Non-overlapping `k×k` max pooling; returns output and flat argmax indices.
pub fn max_pool_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / k, w / k);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + oy * k * w + ox * k;
                for dy in 0..k {
                    for dx in 0..k {
                        let idx = ch * h * w + (oy * k + dy) * w + ox * k + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::c((k * k) as f64);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut s = T::zero();
                for dy in 0..k {
                    for dx in 0..k {
                        s += x[ch * h * w + (oy * k + dy) * w + ox * k + dx];
                    }
                }
                out.push(s * inv);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Scalar>(gout: &[T], c: usize, h: usize, w: usize, k: usize, dx: &mut [T]) {
    let (oh, ow) = (h / k, w / k);
    let inv = T::one() / T::c((k * k) as f64);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = gout[(ch * oh + oy) * ow + ox] * inv;
                for dy in 0..k {
                    for ddx in 0..k {
                        dx[ch * h * w + (oy * k + dy) * w + ox * k + ddx] += g;
                    }
                }
            }
        }
    }
}

/// Source taps for half-pixel-centred bilinear resampling along one axis.
fn bilinear_taps(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of a `C×H×W` buffer to `C×oh×ow`.
pub fn bilinear_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let p = &x[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, ly) in &ty {
            let ly = T::c(ly);
            for &(x0, x1, lx) in &tx {
                let lx = T::c(lx);
                let top = p[y0 * w + x0] * (T::one() - lx) + p[y0 * w + x1] * lx;
                let bot = p[y1 * w + x0] * (T::one() - lx) + p[y1 * w + x1] * lx;
                out.push(top * (T::one() - ly) + bot * ly);
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn bilinear_backward<T: Scalar>(gout: &[T], c: usize, h: usize, w: usize, oh: usize, ow: usize, dx: &mut [T]) {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    for ch in 0..c {
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            let ly = T::c(ly);
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let lx = T::c(lx);
                let g = gout[(ch * oh + oy) * ow + ox];
                d[y0 * w + x0] += g * (T::one() - ly) * (T::one() - lx);
                d[y0 * w + x1] += g * (T::one() - ly) * lx;
                d[y1 * w + x0] += g * ly * (T::one() - lx);
                d[y1 * w + x1] += g * ly * lx;
            }
        }
    }
}

pub fn nearest_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(x[ch * h * w + (oy / f) * w + ox / f]);
            }
        }
    }
    out
}

pub fn nearest_backward<T: Scalar>(gout: &[T], c: usize, h: usize, w: usize, f: usize, dx: &mut [T]) {
    let (oh, ow) = (h * f, w * f);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                dx[ch * h * w + (oy / f) * w + ox / f] += gout[(ch * oh + oy) * ow + ox];
            }
        }
    }
}

/// `(outer, axis, inner)` decomposition of a shape around one axis.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_forward<T: Scalar>(x: &[T], shape: &[usize], axis: usize) -> Vec<T> {
    let (outer, n, inner) = split_axis(shape, axis);
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let m = (0..n).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for j in 0..n {
                let e = (x[at(j)] - m).exp();
                y[at(j)] = e;
                s += e;
            }
            for j in 0..n {
                y[at(j)] /= s;
            }
        }
    }
    y
}

pub fn softmax_backward<T: Scalar>(y: &[T], gout: &[T], shape: &[usize], axis: usize, dx: &mut [T]) {
    let (outer, n, inner) = split_axis(shape, axis);
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * n * inner + j * inner + i;
            let dot: T = (0..n).map(|j| gout[at(j)] * y[at(j)]).sum();
            for j in 0..n {
                dx[at(j)] += y[at(j)] * (gout[at(j)] - dot);
            }
        }
    }
}
