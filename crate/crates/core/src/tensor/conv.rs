//! Convolution kernels on explicitly padded buffers.
//!
//! Padding is materialized once per call (circular columns for sphere mode,
//! zero rows always), which keeps the hot loops branch-free and contiguous.
//! The transpose convolution is the exact adjoint of a strided conv, built
//! from the same three kernels (forward, input-grad, weight-grad).
//!
//! Parallel loops split on disjoint output planes and reduce in a fixed
//! order, so results are bitwise independent of the worker count.

use rayon::prelude::*;

use super::{ConvSpec, PadMode, Scalar, Shape, Tensor};

/// Resolved sizes for one convolution application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub padded_h: usize,
    pub padded_w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub dilation: usize,
}

fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

/// Below this many scalar ops the rayon dispatch costs more than the math
/// (micro-model gradient checks hit these kernels tens of thousands of
/// times). The sequential path computes the identical result.
const PAR_WORK_THRESHOLD: usize = 1 << 18;

fn for_each_plane<T, F>(data: &mut [T], plane_len: usize, work: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    if work < PAR_WORK_THRESHOLD {
        for (i, chunk) in data.chunks_mut(plane_len).enumerate() {
            f(i, chunk);
        }
    } else {
        data.par_chunks_mut(plane_len)
            .enumerate()
            .for_each(|(i, chunk)| f(i, chunk));
    }
}

pub(crate) fn resolve_geom(spec: &ConvSpec, in_h: usize, in_w: usize) -> ConvGeom {
    let (kh, kw) = spec.kernel;
    let (s, d) = (spec.stride, spec.dilation);
    let out_h = ceil_div(in_h, s);
    let out_w = ceil_div(in_w, s);
    let need_h = (out_h - 1) * s + (kh - 1) * d + 1;
    let need_w = (out_w - 1) * s + (kw - 1) * d + 1;
    let total_h = need_h.saturating_sub(in_h);
    let total_w = need_w.saturating_sub(in_w);
    // Odd surplus goes to bottom/right.
    let pad_top = total_h / 2;
    let pad_left = total_w / 2;
    ConvGeom {
        in_h,
        in_w,
        out_h,
        out_w,
        pad_top,
        pad_left,
        padded_h: in_h + total_h,
        padded_w: in_w + total_w,
        kh,
        kw,
        stride: s,
        dilation: d,
    }
}

/// Output spatial dims of a conv ("same"-style, ceil(in/stride)).
pub fn conv_output_dims(spec: &ConvSpec, in_h: usize, in_w: usize) -> (usize, usize) {
    let g = resolve_geom(spec, in_h, in_w);
    (g.out_h, g.out_w)
}

/// Output spatial dims of a transpose conv: stride × input dims.
pub fn conv_transpose_output_dims(spec: &ConvSpec, in_h: usize, in_w: usize) -> (usize, usize) {
    (in_h * spec.stride, in_w * spec.stride)
}

/// Copies (n, c, h, w) into (n, c, padded_h, padded_w) with circular or zero
/// column padding and zero row padding.
pub(crate) fn pad_input<T: Scalar>(x: &Tensor<T>, g: &ConvGeom, mode: PadMode) -> Tensor<T> {
    let (n, c) = (x.shape.n, x.shape.c);
    let mut out = Tensor::zeros(Shape::new(n, c, g.padded_h, g.padded_w));
    let src_plane = g.in_h * g.in_w;
    let dst_plane = g.padded_h * g.padded_w;
    let work = n * c * dst_plane;
    for_each_plane(&mut out.data, dst_plane, work, |plane, dst| {
            let src = &x.data[plane * src_plane..(plane + 1) * src_plane];
            for py in 0..g.padded_h {
                let sy = py as isize - g.pad_top as isize;
                if sy < 0 || sy >= g.in_h as isize {
                    continue; // zero rows in both modes
                }
                let src_row = &src[sy as usize * g.in_w..(sy as usize + 1) * g.in_w];
                let dst_row = &mut dst[py * g.padded_w..(py + 1) * g.padded_w];
                match mode {
                    PadMode::Sphere => {
                        for (px, d) in dst_row.iter_mut().enumerate() {
                            let sx =
                                (px as isize - g.pad_left as isize).rem_euclid(g.in_w as isize);
                            *d = src_row[sx as usize];
                        }
                    }
                    PadMode::Zero => {
                        dst_row[g.pad_left..g.pad_left + g.in_w].copy_from_slice(src_row);
                    }
                }
            }
        });
    out
}

/// Folds a padded-shape gradient back onto (n, c, in_h, in_w): wrapped
/// columns accumulate into their source column, zero-pad margins are dropped.
pub(crate) fn fold_padded<T: Scalar>(pg: &Tensor<T>, g: &ConvGeom, mode: PadMode) -> Tensor<T> {
    let (n, c) = (pg.shape.n, pg.shape.c);
    let mut out = Tensor::zeros(Shape::new(n, c, g.in_h, g.in_w));
    let src_plane = g.padded_h * g.padded_w;
    let dst_plane = g.in_h * g.in_w;
    let work = n * c * src_plane;
    for_each_plane(&mut out.data, dst_plane, work, |plane, dst| {
            let src = &pg.data[plane * src_plane..(plane + 1) * src_plane];
            for py in 0..g.padded_h {
                let sy = py as isize - g.pad_top as isize;
                if sy < 0 || sy >= g.in_h as isize {
                    continue;
                }
                let dst_row = &mut dst[sy as usize * g.in_w..(sy as usize + 1) * g.in_w];
                let src_row = &src[py * g.padded_w..(py + 1) * g.padded_w];
                match mode {
                    PadMode::Sphere => {
                        for (px, &v) in src_row.iter().enumerate() {
                            let sx =
                                (px as isize - g.pad_left as isize).rem_euclid(g.in_w as isize);
                            dst_row[sx as usize] += v;
                        }
                    }
                    PadMode::Zero => {
                        for (sx, d) in dst_row.iter_mut().enumerate() {
                            *d += src_row[g.pad_left + sx];
                        }
                    }
                }
            }
        });
    out
}

/// Cross-correlation of a padded input with weights (oc, ic, kh, kw).
pub(crate) fn conv_forward<T: Scalar>(
    xp: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = xp.shape.n;
    let ic_total = xp.shape.c;
    let oc_total = weight.shape.n;
    debug_assert_eq!(weight.shape.c, ic_total);
    let mut out = Tensor::zeros(Shape::new(n, oc_total, g.out_h, g.out_w));
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.padded_h * g.padded_w;
    let (s, d) = (g.stride, g.dilation);

    let work = n * oc_total * out_plane * ic_total * g.kh * g.kw;
    for_each_plane(&mut out.data, out_plane, work, |pidx, plane| {
            let ni = pidx / oc_total;
            let oc = pidx % oc_total;
            let b = bias.map_or(T::ZERO, |bt| bt.data[oc]);
            plane.fill(b);
            for ic in 0..ic_total {
                let in_base = (ni * ic_total + ic) * in_plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight.data[((oc * ic_total + ic) * g.kh + ky) * g.kw + kx];
                        let off = kx * d;
                        for oy in 0..g.out_h {
                            let iy = oy * s + ky * d;
                            let in_row =
                                &xp.data[in_base + iy * g.padded_w..in_base + (iy + 1) * g.padded_w];
                            let out_row = &mut plane[oy * g.out_w..(oy + 1) * g.out_w];
                            if s == 1 {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[ox + off];
                                }
                            } else {
                                for (ox, o) in out_row.iter_mut().enumerate() {
                                    *o += wv * in_row[ox * s + off];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Input gradient of the conv, on the padded input shape.
pub(crate) fn conv_input_grad<T: Scalar>(
    g_out: &Tensor<T>,
    weight: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = g_out.shape.n;
    let oc_total = g_out.shape.c;
    let ic_total = weight.shape.c;
    let mut pg = Tensor::zeros(Shape::new(n, ic_total, g.padded_h, g.padded_w));
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.padded_h * g.padded_w;
    let (s, d) = (g.stride, g.dilation);

    let work = n * ic_total * oc_total * out_plane * g.kh * g.kw;
    for_each_plane(&mut pg.data, in_plane, work, |pidx, plane| {
            let ni = pidx / ic_total;
            let ic = pidx % ic_total;
            for oc in 0..oc_total {
                let go_base = (ni * oc_total + oc) * out_plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight.data[((oc * ic_total + ic) * g.kh + ky) * g.kw + kx];
                        let off = kx * d;
                        for oy in 0..g.out_h {
                            let iy = oy * s + ky * d;
                            let go_row =
                                &g_out.data[go_base + oy * g.out_w..go_base + (oy + 1) * g.out_w];
                            let pg_row =
                                &mut plane[iy * g.padded_w..(iy + 1) * g.padded_w];
                            if s == 1 {
                                for (ox, &gv) in go_row.iter().enumerate() {
                                    pg_row[ox + off] += wv * gv;
                                }
                            } else {
                                for (ox, &gv) in go_row.iter().enumerate() {
                                    pg_row[ox * s + off] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        });
    pg
}

/// Weight gradient; owns one output-channel slice per parallel task, with
/// the batch reduced sequentially inside.
pub(crate) fn conv_weight_grad<T: Scalar>(
    xp: &Tensor<T>,
    g_out: &Tensor<T>,
    g: &ConvGeom,
) -> Tensor<T> {
    let n = xp.shape.n;
    let ic_total = xp.shape.c;
    let oc_total = g_out.shape.c;
    let mut wg = Tensor::zeros(Shape::new(oc_total, ic_total, g.kh, g.kw));
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.padded_h * g.padded_w;
    let (s, d) = (g.stride, g.dilation);
    let oc_slice = ic_total * g.kh * g.kw;

    let work = n * oc_total * ic_total * g.kh * g.kw * out_plane;
    for_each_plane(&mut wg.data, oc_slice, work, |oc, wslice| {
            for ic in 0..ic_total {
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let off = kx * d;
                        let mut acc = T::ZERO;
                        for ni in 0..n {
                            let go_base = (ni * oc_total + oc) * out_plane;
                            let in_base = (ni * ic_total + ic) * in_plane;
                            for oy in 0..g.out_h {
                                let iy = oy * s + ky * d;
                                let go_row = &g_out.data
                                    [go_base + oy * g.out_w..go_base + (oy + 1) * g.out_w];
                                let in_row = &xp.data
                                    [in_base + iy * g.padded_w..in_base + (iy + 1) * g.padded_w];
                                if s == 1 {
                                    for (ox, &gv) in go_row.iter().enumerate() {
                                        acc += gv * in_row[ox + off];
                                    }
                                } else {
                                    for (ox, &gv) in go_row.iter().enumerate() {
                                        acc += gv * in_row[ox * s + off];
                                    }
                                }
                            }
                        }
                        wslice[(ic * g.kh + ky) * g.kw + kx] = acc;
                    }
                }
            }
        });
    wg
}

/// Transpose-conv forward as a direct gather: output element (i_h, i_w)
/// pulls from at most one input tap per kernel position (rows are
/// zero-padded, columns wrap circularly in sphere mode). The fixed
/// per-element accumulation order keeps the op bit-exactly equivariant to
/// column shifts, which a scatter-then-fold formulation is not (the fold
/// re-associates sums at the wrap seam).
///
/// `g` is the geometry of the adjoint conv, so `g.in_h`/`g.in_w` are this
/// op's OUTPUT dims and (g.out_h, g.out_w) match the input.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
    mode: PadMode,
) -> Tensor<T> {
    let n = x.shape.n;
    let c_in = weight.shape.n;
    let c_out = weight.shape.c;
    debug_assert_eq!(x.shape.c, c_in);
    debug_assert_eq!((g.out_h, g.out_w), (x.shape.h, x.shape.w));
    let (out_h, out_w) = (g.in_h, g.in_w);
    let (s, d) = (g.stride, g.dilation);
    debug_assert!(mode == PadMode::Zero || out_w == s * x.shape.w);
    let mut out = Tensor::zeros(Shape::new(n, c_out, out_h, out_w));
    let out_plane = out_h * out_w;
    let in_plane = x.shape.h * x.shape.w;

    let work = n * c_out * out_plane * c_in * g.kh * g.kw;
    for_each_plane(&mut out.data, out_plane, work, |pidx, plane| {
            let ni = pidx / c_out;
            let oc = pidx % c_out;
            plane.fill(bias.map_or(T::ZERO, |bt| bt.data[oc]));
            for ic in 0..c_in {
                let in_base = (ni * c_in + ic) * in_plane;
                for ky in 0..g.kh {
                    for kx in 0..g.kw {
                        let wv = weight.data[((ic * c_out + oc) * g.kh + ky) * g.kw + kx];
                        for ih in 0..out_h {
                            let th = ih as isize + g.pad_top as isize - (ky * d) as isize;
                            if th < 0 || th % s as isize != 0 {
                                continue;
                            }
                            let sy = (th / s as isize) as usize;
                            if sy >= x.shape.h {
                                continue;
                            }
                            let in_row =
                                &x.data[in_base + sy * x.shape.w..in_base + (sy + 1) * x.shape.w];
                            let out_row = &mut plane[ih * out_w..(ih + 1) * out_w];
                            for (iw, o) in out_row.iter_mut().enumerate() {
                                let tw = iw as isize + g.pad_left as isize - (kx * d) as isize;
                                let sx = match mode {
                                    PadMode::Sphere => {
                                        let r = tw.rem_euclid(out_w as isize);
                                        if r % s as isize != 0 {
                                            continue;
                                        }
                                        (r / s as isize) as usize
                                    }
                                    PadMode::Zero => {
                                        if tw < 0 || tw % s as isize != 0 {
                                            continue;
                                        }
                                        let j = (tw / s as isize) as usize;
                                        if j >= x.shape.w {
                                            continue;
                                        }
                                        j
                                    }
                                };
                                *o += wv * in_row[sx];
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Per-channel sum of an (n, c, h, w) gradient, shaped (1, c, 1, 1).
pub(crate) fn channel_sum<T: Scalar>(t: &Tensor<T>) -> Tensor<T> {
    let Shape { n, c, h, w } = t.shape;
    let plane = h * w;
    let mut out = Tensor::zeros(Shape::new(1, c, 1, 1));
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * plane;
            let mut acc = T::ZERO;
            for &v in &t.data[base..base + plane] {
                acc += v;
            }
            out.data[ci] += acc;
        }
    }
    out
}
