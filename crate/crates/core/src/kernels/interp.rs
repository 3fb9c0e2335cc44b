//! Spatial resampling with the half-pixel-center convention
//! (`src = (dst + 0.5) * in / out - 0.5`).

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InterpMode {
    Nearest,
    Bilinear,
}

/// One output coordinate's source taps along an axis: `(i0, i1, w1)` with
/// value `(1 - w1) * x[i0] + w1 * x[i1]`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap<T> {
    pub i0: usize,
    pub i1: usize,
    pub w1: T,
}

pub(crate) fn axis_taps<T: Scalar>(in_len: usize, out_len: usize, mode: InterpMode) -> Vec<Tap<T>> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| match mode {
            InterpMode::Nearest => {
                let i = (((o as f64 + 0.5) * scale) as usize).min(in_len - 1);
                Tap { i0: i, i1: i, w1: T::ZERO }
            }
            InterpMode::Bilinear => {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src as usize).min(in_len - 1);
                let i1 = (i0 + 1).min(in_len - 1);
                let w1 = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                Tap { i0, i1, w1: T::from_f64(w1) }
            }
        })
        .collect()
}

pub fn interpolate_forward<T: Scalar>(
    x: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    mode: InterpMode,
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return x.to_vec();
    }
    let ty = axis_taps::<T>(h, oh, mode);
    let tx = axis_taps::<T>(w, ow, mode);
    let mut out = vec![T::ZERO; planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, a) in ty.iter().enumerate() {
            let r0 = &src[a.i0 * w..(a.i0 + 1) * w];
            let r1 = &src[a.i1 * w..(a.i1 + 1) * w];
            for (ox, b) in tx.iter().enumerate() {
                let top = r0[b.i0] + (r0[b.i1] - r0[b.i0]) * b.w1;
                let bot = r1[b.i0] + (r1[b.i1] - r1[b.i0]) * b.w1;
                dst[oy * ow + ox] = top + (bot - top) * a.w1;
            }
        }
    }
    out
}

pub fn interpolate_backward<T: Scalar>(
    dy: &[T],
    planes: usize,
    (h, w): (usize, usize),
    (oh, ow): (usize, usize),
    mode: InterpMode,
) -> Vec<T> {
    if (h, w) == (oh, ow) {
        return dy.to_vec();
    }
    let ty = axis_taps::<T>(h, oh, mode);
    let tx = axis_taps::<T>(w, ow, mode);
    let mut dx = vec![T::ZERO; planes * h * w];
    for p in 0..planes {
        let d = &dy[p * oh * ow..(p + 1) * oh * ow];
        let g = &mut dx[p * h * w..(p + 1) * h * w];
        for (oy, a) in ty.iter().enumerate() {
            for (ox, b) in tx.iter().enumerate() {
                let v = d[oy * ow + ox];
                let (wy0, wy1) = (T::ONE - a.w1, a.w1);
                let (wx0, wx1) = (T::ONE - b.w1, b.w1);
                g[a.i0 * w + b.i0] += v * wy0 * wx0;
                g[a.i0 * w + b.i1] += v * wy0 * wx1;
                g[a.i1 * w + b.i0] += v * wy1 * wx0;
                g[a.i1 * w + b.i1] += v * wy1 * wx1;
            }
        }
    }
    dx
}
