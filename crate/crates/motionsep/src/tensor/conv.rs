//! Transposed 2-D convolution kernels: forward, input gradient and
//! weight gradient.
//!
//! Layouts: input `[c_in, h, w]`, weight `[c_in, c_out, k, k]`,
//! output `[c_out, oh, ow]` with `oh = (h-1)*stride - 2*padding + k`.
//!
//! The spatial extents here are tiny (a 1x1 latent map growing to
//! ~100x100), so each kernel is written as a gather whose innermost
//! contraction runs over a channel axis made contiguous by a cheap
//! transpose; that keeps the hot loop a plain dot product or axpy.
//! Each output element is accumulated in a fixed sequential order
//! (kernel rows, kernel columns, channels innermost); parallelism is
//! only across independent output elements, so results do not depend
//! on the thread count.

use rayon::prelude::*;

use super::Real;

pub(crate) struct ConvDims {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Input position feeding padded output coordinate `o` through kernel
/// offset `j`, if any: `o + padding - j` must be a non-negative
/// multiple of the stride within the input extent.
#[inline]
fn source_index(o: usize, j: usize, stride: usize, padding: usize, extent: usize) -> Option<usize> {
    let t = (o + padding).checked_sub(j)?;
    if t % stride != 0 {
        return None;
    }
    let i = t / stride;
    (i < extent).then_some(i)
}

/// Eight-lane dot product with a fixed pairwise reduction, so the
/// compiler may vectorize it without changing the result.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let mut chunks_a = a.chunks_exact(8);
    let mut chunks_b = b.chunks_exact(8);
    for (ca, cb) in (&mut chunks_a).zip(&mut chunks_b) {
        for i in 0..8 {
            lanes[i] = lanes[i] + ca[i] * cb[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in chunks_a.remainder().iter().zip(chunks_b.remainder()) {
        tail = tail + x * y;
    }
    ((lanes[0] + lanes[1]) + (lanes[2] + lanes[3]))
        + ((lanes[4] + lanes[5]) + (lanes[6] + lanes[7]))
        + tail
}

/// `out[co][o] = sum_{kh,kw,ci} in[ci][src(o)] * w[ci][co][kh][kw]`.
/// Parallel over output channels.
pub(crate) fn forward<T: Real>(input: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    // in_t[ipx][ci], w_t[kh][kw][co][ci]: both contiguous over ci.
    let px = d.h * d.w;
    let kk = d.k * d.k;
    let mut in_t = vec![T::zero(); px * d.c_in];
    for ci in 0..d.c_in {
        for p in 0..px {
            in_t[p * d.c_in + ci] = input[ci * px + p];
        }
    }
    let mut w_t = vec![T::zero(); kk * d.c_out * d.c_in];
    for ci in 0..d.c_in {
        for co in 0..d.c_out {
            for t in 0..kk {
                w_t[(t * d.c_out + co) * d.c_in + ci] = weight[(ci * d.c_out + co) * kk + t];
            }
        }
    }

    let mut out = vec![T::zero(); d.c_out * d.oh * d.ow];
    let plane = d.oh * d.ow;
    out.par_chunks_mut(plane).enumerate().for_each(|(co, out_plane)| {
        for ohp in 0..d.oh {
            for owp in 0..d.ow {
                let mut acc = T::zero();
                for kh in 0..d.k {
                    let Some(ih) = source_index(ohp, kh, d.stride, d.padding, d.h) else {
                        continue;
                    };
                    for kw in 0..d.k {
                        let Some(iw) = source_index(owp, kw, d.stride, d.padding, d.w) else {
                            continue;
                        };
                        let ipx = ih * d.w + iw;
                        let a = &in_t[ipx * d.c_in..(ipx + 1) * d.c_in];
                        let t = kh * d.k + kw;
                        let b = &w_t[(t * d.c_out + co) * d.c_in..(t * d.c_out + co + 1) * d.c_in];
                        acc = acc + dot(a, b);
                    }
                }
                out_plane[ohp * d.ow + owp] = acc;
            }
        }
    });
    out
}

/// Gradient w.r.t. the input: the adjoint of `forward`, i.e. a strided
/// convolution of the output gradient with the same weights. Parallel
/// over input channels.
pub(crate) fn backward_input<T: Real>(grad_out: &[T], weight: &[T], d: &ConvDims) -> Vec<T> {
    // gout_t[opx][co], w_t[ci][kh][kw][co]: both contiguous over co.
    let opx = d.oh * d.ow;
    let kk = d.k * d.k;
    let mut gout_t = vec![T::zero(); opx * d.c_out];
    for co in 0..d.c_out {
        for p in 0..opx {
            gout_t[p * d.c_out + co] = grad_out[co * opx + p];
        }
    }
    let mut w_t = vec![T::zero(); d.c_in * kk * d.c_out];
    for ci in 0..d.c_in {
        for co in 0..d.c_out {
            for t in 0..kk {
                w_t[(ci * kk + t) * d.c_out + co] = weight[(ci * d.c_out + co) * kk + t];
            }
        }
    }

    let mut grad_in = vec![T::zero(); d.c_in * d.h * d.w];
    grad_in
        .par_chunks_mut(d.h * d.w)
        .enumerate()
        .for_each(|(ci, gin_plane)| {
            for ih in 0..d.h {
                let oh0 = ih * d.stride;
                for iw in 0..d.w {
                    let ow0 = iw * d.stride;
                    let mut acc = T::zero();
                    for kh in 0..d.k {
                        let oh = oh0 + kh;
                        if oh < d.padding || oh - d.padding >= d.oh {
                            continue;
                        }
                        for kw in 0..d.k {
                            let ow = ow0 + kw;
                            if ow < d.padding || ow - d.padding >= d.ow {
                                continue;
                            }
                            let p = (oh - d.padding) * d.ow + (ow - d.padding);
                            let a = &gout_t[p * d.c_out..(p + 1) * d.c_out];
                            let t = kh * d.k + kw;
                            let b = &w_t[(ci * kk + t) * d.c_out..(ci * kk + t + 1) * d.c_out];
                            acc = acc + dot(a, b);
                        }
                    }
                    gin_plane[ih * d.w + iw] = acc;
                }
            }
        });
    grad_in
}

/// Gradient w.r.t. the weights: `gw[ci][co][kh][kw] = sum_{ih,iw}
/// in[ci][ih][iw] * gout[co][ih*s+kh-p][iw*s+kw-p]`. The output
/// gradient is first gathered into `a[ipx][co][kh][kw]` (zero where
/// the tap falls outside), turning the per-channel update into an
/// axpy over a contiguous row. Parallel over input channels.
pub(crate) fn backward_weight<T: Real>(input: &[T], grad_out: &[T], d: &ConvDims) -> Vec<T> {
    let px = d.h * d.w;
    let kk = d.k * d.k;
    let row = d.c_out * kk;
    let mut gathered = vec![T::zero(); px * row];
    for ih in 0..d.h {
        let oh0 = ih * d.stride;
        for iw in 0..d.w {
            let ow0 = iw * d.stride;
            let g_row = &mut gathered[(ih * d.w + iw) * row..(ih * d.w + iw + 1) * row];
            for kh in 0..d.k {
                let oh = oh0 + kh;
                if oh < d.padding || oh - d.padding >= d.oh {
                    continue;
                }
                for kw in 0..d.k {
                    let ow = ow0 + kw;
                    if ow < d.padding || ow - d.padding >= d.ow {
                        continue;
                    }
                    let p = (oh - d.padding) * d.ow + (ow - d.padding);
                    for co in 0..d.c_out {
                        g_row[co * kk + kh * d.k + kw] = grad_out[co * d.oh * d.ow + p];
                    }
                }
            }
        }
    }

    let mut grad_w = vec![T::zero(); d.c_in * row];
    grad_w.par_chunks_mut(row).enumerate().for_each(|(ci, gw_row)| {
        let in_plane = &input[ci * px..(ci + 1) * px];
        for (p, &v) in in_plane.iter().enumerate() {
            let g_row = &gathered[p * row..(p + 1) * row];
            for (gw, &g) in gw_row.iter_mut().zip(g_row) {
                *gw = *gw + v * g;
            }
        }
    });
    grad_w
}
