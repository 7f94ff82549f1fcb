//! Raw loops behind the graph ops.
//!
//! Forward reductions always accumulate in increasing index order along the
//! reduced axis. Zero-valued terms therefore never change a result, which is
//! what makes a masked network and its extracted sub-network bit-identical.

use super::Element;

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn gemm_nn<E: Element>(m: usize, n: usize, k: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &aik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aik * bv;
            }
        }
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub(crate) fn gemm_tn<E: Element>(m: usize, n: usize, k: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for kk in 0..k {
        let b_row = &b[kk * n..(kk + 1) * n];
        for i in 0..m {
            let aki = a[kk * m + i];
            if aki == E::zero() {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aki * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T`
pub(crate) fn gemm_nt<E: Element>(m: usize, n: usize, k: usize, a: &[E], b: &[E], c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            c[i * n + j] += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    }
}

/// Eight-lane dot product with a fixed association order.
pub(crate) fn dot<E: Element>(a: &[E], b: &[E]) -> E {
    let mut acc = [E::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        for l in 0..8 {
            acc[l] += a[c * 8 + l] * b[c * 8 + l];
        }
    }
    let mut tail = E::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub(crate) fn out_extent(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 || input + 2 * pad < kernel {
        return None;
    }
    Some((input + 2 * pad - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub sh: usize,
    pub sw: usize,
    pub ph: usize,
    pub pw: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.sh == 1 && self.sw == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Lowers NCHW input to a `[c_in*kh*kw, n*ho*wo]` column matrix.
pub(crate) fn im2col<E: Element>(x: &[E], g: &ConvGeom) -> Vec<E> {
    let p = g.pixels();
    let np = g.n * p;
    let mut cols = vec![E::zero(); g.patch() * np];
    if g.is_pointwise() {
        for n in 0..g.n {
            for c in 0..g.c_in {
                let src = &x[(n * g.c_in + c) * p..(n * g.c_in + c + 1) * p];
                cols[c * np + n * p..c * np + (n + 1) * p].copy_from_slice(src);
            }
        }
        return cols;
    }
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
                    for oy in 0..g.ho {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let in_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = in_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im<E: Element>(cols: &[E], g: &ConvGeom) -> Vec<E> {
    let p = g.pixels();
    let np = g.n * p;
    let mut x = vec![E::zero(); g.n * g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * np..(row + 1) * np];
                for n in 0..g.n {
                    let plane_off = (n * g.c_in + c) * g.h * g.w;
                    for oy in 0..g.ho {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = n * p + oy * g.wo;
                        for ox in 0..g.wo {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix >= 0 && ix < g.w as isize {
                                x[plane_off + iy as usize * g.w + ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Returns the NCHW output and the column matrix kept for backward.
pub(crate) fn conv2d_forward<E: Element>(x: &[E], w: &[E], g: &ConvGeom) -> (Vec<E>, Vec<E>) {
    let cols = im2col(x, g);
    let np = g.n * g.pixels();
    let mut oc = vec![E::zero(); g.c_out * np];
    gemm_nn(g.c_out, np, g.patch(), w, &cols, &mut oc);
    (channel_major_to_nchw(&oc, g.n, g.c_out, g.pixels()), cols)
}

/// Gradients w.r.t. input and weight.
pub(crate) fn conv2d_backward<E: Element>(
    dy: &[E],
    w: &[E],
    cols: &[E],
    g: &ConvGeom,
) -> (Vec<E>, Vec<E>) {
    let np = g.n * g.pixels();
    let dyc = nchw_to_channel_major(dy, g.n, g.c_out, g.pixels());
    let mut dw = vec![E::zero(); g.c_out * g.patch()];
    gemm_nt(g.c_out, g.patch(), np, &dyc, cols, &mut dw);
    let mut dcols = vec![E::zero(); g.patch() * np];
    gemm_tn(g.patch(), np, g.c_out, w, &dyc, &mut dcols);
    (col2im(&dcols, g), dw)
}

pub(crate) fn channel_major_to_nchw<E: Element>(src: &[E], n: usize, c: usize, p: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n * c * p];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * p..(ni * c + ci + 1) * p]
                .copy_from_slice(&src[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]);
        }
    }
    out
}

pub(crate) fn nchw_to_channel_major<E: Element>(src: &[E], n: usize, c: usize, p: usize) -> Vec<E> {
    let mut out = vec![E::zero(); n * c * p];
    for ni in 0..n {
        for ci in 0..c {
            out[ci * n * p + ni * p..ci * n * p + (ni + 1) * p]
                .copy_from_slice(&src[(ni * c + ci) * p..(ni * c + ci + 1) * p]);
        }
    }
    out
}

/// Depthwise convolution; `g.c_in == g.c_out`, weight is `[c, kh, kw]`.
pub(crate) fn depthwise_forward<E: Element>(x: &[E], w: &[E], g: &ConvGeom) -> Vec<E> {
    let mut out = vec![E::zero(); g.n * g.c_out * g.pixels()];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let plane = &x[(n * g.c_in + c) * g.h * g.w..(n * g.c_in + c + 1) * g.h * g.w];
            let kern = &w[c * g.kh * g.kw..(c + 1) * g.kh * g.kw];
            let dst = &mut out[(n * g.c_in + c) * g.pixels()..(n * g.c_in + c + 1) * g.pixels()];
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let mut acc = E::zero();
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            acc += kern[ky * g.kw + kx] * plane[iy as usize * g.w + ix as usize];
                        }
                    }
                    dst[oy * g.wo + ox] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<E: Element>(
    dy: &[E],
    x: &[E],
    w: &[E],
    g: &ConvGeom,
) -> (Vec<E>, Vec<E>) {
    let mut dx = vec![E::zero(); x.len()];
    let mut dw = vec![E::zero(); w.len()];
    for n in 0..g.n {
        for c in 0..g.c_in {
            let off_in = (n * g.c_in + c) * g.h * g.w;
            let off_out = (n * g.c_in + c) * g.pixels();
            for oy in 0..g.ho {
                for ox in 0..g.wo {
                    let d = dy[off_out + oy * g.wo + ox];
                    if d == E::zero() {
                        continue;
                    }
                    for ky in 0..g.kh {
                        let iy = (oy * g.sh + ky) as isize - g.ph as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        for kx in 0..g.kw {
                            let ix = (ox * g.sw + kx) as isize - g.pw as isize;
                            if ix < 0 || ix >= g.w as isize {
                                continue;
                            }
                            let xi = off_in + iy as usize * g.w + ix as usize;
                            let wi = c * g.kh * g.kw + ky * g.kw + kx;
                            dw[wi] += d * x[xi];
                            dx[xi] += d * w[wi];
                        }
                    }
                }
            }
        }
    }
    (dx, dw)
}

/// Max pooling without padding. Returns output and the flat argmax index per
/// output element (first maximum wins on ties).
pub(crate) fn max_pool_forward<E: Element>(
    x: &[E],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
) -> (Vec<E>, Vec<usize>, usize, usize) {
    let ho = (h - k) / s + 1;
    let wo = (w - k) / s + 1;
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let off = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = off + oy * s * w + ox * s;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = off + (oy * s + ky) * w + ox * s + kx;
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
    (out, arg, ho, wo)
}
