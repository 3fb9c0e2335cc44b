//! 2-d convolution over NCHW buffers.
//!
//! Dense and grouped convolutions lower to im2col + gemm; depthwise
//! convolutions (one input channel per group, one output per group) use a
//! direct loop since their gemm would be degenerate. Weights are laid out
//! `[c_out, c_in / groups, k, k]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(
        input: [usize; 4],
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
    ) -> Result<Self> {
        let [n, c_in, h, w] = input;
        ensure!(stride >= 1 && k >= 1 && groups >= 1, "kernel, stride and groups must be positive");
        ensure!(c_in % groups == 0, "in-channels {} not divisible by groups {}", c_in, groups);
        ensure!(c_out.is_multiple_of(groups), "out-channels {} not divisible by groups {}", c_out, groups);
        ensure!(
            h + 2 * pad >= k && w + 2 * pad >= k,
            "kernel {} larger than padded input {}x{} (pad {})",
            k,
            h,
            w,
            pad
        );
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            groups,
            ho: out_extent(h, k, stride, pad),
            wo: out_extent(w, k, stride, pad),
        })
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.c_out, self.c_in / self.groups, self.k, self.k]
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.ho, self.wo]
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.c_out == self.c_in && self.groups > 1
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Multiply-accumulates of one forward pass.
    pub fn macs(&self) -> u64 {
        (self.n * self.c_out * self.ho * self.wo * (self.c_in / self.groups) * self.k * self.k) as u64
    }
}

pub fn out_extent(size: usize, k: usize, stride: usize, pad: usize) -> usize {
    (size + 2 * pad - k) / stride + 1
}

fn im2col<T: Scalar>(x: &[T], c: usize, g: &ConvGeom, cols: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw_out = g.ho * g.wo;
    for ci in 0..c {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::ZERO);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, o) in out_row.iter_mut().enumerate() {
                        let ix = (ox * s) as isize - p + kx as isize;
                        *o = if ix < 0 || ix >= g.w as isize { T::ZERO } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(cols: &[T], c: usize, g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    let hw_out = g.ho * g.wo;
    for ci in 0..c {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * s) as isize - p + kx as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = a @ b` (`accumulate` adds into `c`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: slice lengths checked above; c is a distinct &mut borrow.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = vec![T::ZERO; g.n * g.c_out * g.ho * g.wo];
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * g.ho * g.wo;
    for_each_image(&mut out, out_img, |ni, y| {
        let xi = &x[ni * in_img..(ni + 1) * in_img];
        if g.is_depthwise() {
            depthwise_forward(xi, weight, g, y);
        } else {
            dense_forward(xi, weight, g, y);
        }
        if let Some(b) = bias {
            let hw = g.ho * g.wo;
            for (co, plane) in y.chunks_mut(hw).enumerate() {
                let bv = b[co];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
    });
    out
}

fn dense_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom, y: &mut [T]) {
    let cg = g.c_in / g.groups;
    let og = g.c_out / g.groups;
    let kk = cg * g.k * g.k;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; kk * hw_out] };
    for gi in 0..g.groups {
        let xg = &x[gi * cg * hw_in..(gi + 1) * cg * hw_in];
        let b = if g.is_pointwise() {
            xg
        } else {
            im2col(xg, cg, g, &mut cols);
            &cols[..]
        };
        let wg = &weight[gi * og * kk..(gi + 1) * og * kk];
        matmul(og, kk, hw_out, wg, false, b, false, &mut y[gi * og * hw_out..(gi + 1) * og * hw_out], false);
    }
}

fn depthwise_forward<T: Scalar>(x: &[T], weight: &[T], g: &ConvGeom, y: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let out = &mut y[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        let wc = &weight[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            for kx in 0..k {
                let wv = wc[ky * k + kx];
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, s, p);
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let dst = &mut out[oy * g.wo..(oy + 1) * g.wo];
                    if s == 1 {
                        let off = kx as isize - p;
                        let lo = (ox_lo as isize + off) as usize;
                        let n = ox_hi.saturating_sub(ox_lo);
                        for (d, &v) in dst[ox_lo..ox_lo + n].iter_mut().zip(&src[lo..lo + n]) {
                            *d += wv * v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = (ox * s) as isize - p + kx as isize;
                            dst[ox] += wv * src[ix as usize];
                        }
                    }
                }
            }
        }
    }
}

/// Output columns `[lo, hi)` whose input column for tap `kx` is in bounds.
fn valid_range(wo: usize, w: usize, kx: usize, s: usize, p: isize) -> (usize, usize) {
    let mut lo = 0;
    while lo < wo && ((lo * s) as isize - p + kx as isize) < 0 {
        lo += 1;
    }
    let mut hi = wo;
    while hi > lo && ((hi - 1) * s) as isize - p + kx as isize >= w as isize {
        hi -= 1;
    }
    (lo, hi)
}

/// Gradient with respect to the convolution input.
pub fn conv2d_backward_input<T: Scalar>(weight: &[T], grad_out: &[T], g: &ConvGeom) -> Vec<T> {
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * g.ho * g.wo;
    let mut dx = vec![T::ZERO; g.n * in_img];
    for_each_image(&mut dx, in_img, |ni, dxi| {
        let dy = &grad_out[ni * out_img..(ni + 1) * out_img];
        if g.is_depthwise() {
            depthwise_backward_input(weight, dy, g, dxi);
        } else {
            dense_backward_input(weight, dy, g, dxi);
        }
    });
    dx
}

fn dense_backward_input<T: Scalar>(weight: &[T], dy: &[T], g: &ConvGeom, dx: &mut [T]) {
    let cg = g.c_in / g.groups;
    let og = g.c_out / g.groups;
    let kk = cg * g.k * g.k;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; kk * hw_out] };
    for gi in 0..g.groups {
        let wg = &weight[gi * og * kk..(gi + 1) * og * kk];
        let dyg = &dy[gi * og * hw_out..(gi + 1) * og * hw_out];
        let dxg = &mut dx[gi * cg * hw_in..(gi + 1) * cg * hw_in];
        if g.is_pointwise() {
            matmul(kk, og, hw_out, wg, true, dyg, false, dxg, true);
        } else {
            matmul(kk, og, hw_out, wg, true, dyg, false, &mut cols, false);
            col2im(&cols, cg, g, dxg);
        }
    }
}

fn depthwise_backward_input<T: Scalar>(weight: &[T], dy: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.c_in {
        let dplane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dout = &dy[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        let wc = &weight[c * k * k..(c + 1) * k * k];
        for ky in 0..k {
            for kx in 0..k {
                let wv = wc[ky * k + kx];
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, s, p);
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut dplane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let src = &dout[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        let ix = (ox * s) as isize - p + kx as isize;
                        dst[ix as usize] += wv * src[ox];
                    }
                }
            }
        }
    }
}

/// Gradient with respect to the weight (and the bias when `with_bias`).
pub fn conv2d_backward_weight<T: Scalar>(
    x: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    with_bias: bool,
) -> (Vec<T>, Option<Vec<T>>) {
    let w_len = g.c_out * (g.c_in / g.groups) * g.k * g.k;
    let in_img = g.c_in * g.h * g.w;
    let out_img = g.c_out * g.ho * g.wo;
    let hw_out = g.ho * g.wo;
    let mut dw = vec![T::ZERO; w_len];
    let mut db = if with_bias { Some(vec![T::ZERO; g.c_out]) } else { None };
    for ni in 0..g.n {
        let xi = &x[ni * in_img..(ni + 1) * in_img];
        let dy = &grad_out[ni * out_img..(ni + 1) * out_img];
        if g.is_depthwise() {
            depthwise_backward_weight(xi, dy, g, &mut dw);
        } else {
            dense_backward_weight(xi, dy, g, &mut dw);
        }
        if let Some(db) = db.as_mut() {
            for (co, plane) in dy.chunks(hw_out).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
    }
    (dw, db)
}

fn dense_backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom, dw: &mut [T]) {
    let cg = g.c_in / g.groups;
    let og = g.c_out / g.groups;
    let kk = cg * g.k * g.k;
    let hw_in = g.h * g.w;
    let hw_out = g.ho * g.wo;
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::ZERO; kk * hw_out] };
    for gi in 0..g.groups {
        let xg = &x[gi * cg * hw_in..(gi + 1) * cg * hw_in];
        let b = if g.is_pointwise() {
            xg
        } else {
            im2col(xg, cg, g, &mut cols);
            &cols[..]
        };
        let dyg = &dy[gi * og * hw_out..(gi + 1) * og * hw_out];
        matmul(og, hw_out, kk, dyg, false, b, true, &mut dw[gi * og * kk..(gi + 1) * og * kk], true);
    }
}

fn depthwise_backward_weight<T: Scalar>(x: &[T], dy: &[T], g: &ConvGeom, dw: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad as isize);
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        let dout = &dy[c * g.ho * g.wo..(c + 1) * g.ho * g.wo];
        for ky in 0..k {
            for kx in 0..k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, s, p);
                let mut acc = T::ZERO;
                for oy in 0..g.ho {
                    let iy = (oy * s) as isize - p + ky as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let d = &dout[oy * g.wo..(oy + 1) * g.wo];
                    for ox in ox_lo..ox_hi {
                        let ix = (ox * s) as isize - p + kx as isize;
                        acc += d[ox] * src[ix as usize];
                    }
                }
                dw[(c * k + ky) * k + kx] += acc;
            }
        }
    }
}

/// Geometry of a transposed convolution expressed as the forward convolution
/// it inverts: the transposed input plays the role of that convolution's output.
pub fn transpose_geom(
    input: [usize; 4],
    c_out: usize,
    k: usize,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<ConvGeom> {
    let [n, c_in, h, w] = input;
    ensure!(h >= 1 && w >= 1, "empty input");
    let ho = (h - 1) * stride + k;
    let wo = (w - 1) * stride + k;
    ensure!(ho > 2 * pad && wo > 2 * pad, "padding consumes the whole output");
    let g = ConvGeom::new([n, c_out, ho - 2 * pad, wo - 2 * pad], c_in, k, stride, pad, groups)?;
    ensure!(g.ho == h && g.wo == w, "transposed convolution geometry is not invertible");
    Ok(g)
}

/// Transposed convolution. `weight` is `[c_in, c_out / groups, k, k]` and `g`
/// comes from [`transpose_geom`].
pub fn conv_transpose2d_forward<T: Scalar>(x: &[T], weight: &[T], bias: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let mut out = conv2d_backward_input(weight, x, g);
    if let Some(b) = bias {
        let hw = g.h * g.w;
        for (i, plane) in out.chunks_mut(hw).enumerate() {
            let bv = b[i % g.c_in];
            plane.iter_mut().for_each(|v| *v += bv);
        }
    }
    out
}

#[cfg(not(feature = "parallel"))]
fn for_each_image<T: Scalar>(buf: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T])) {
    for (ni, c) in buf.chunks_mut(chunk).enumerate() {
        f(ni, c);
    }
}

#[cfg(feature = "parallel")]
fn for_each_image<T: Scalar>(buf: &mut [T], chunk: usize, f: impl Fn(usize, &mut [T]) + Sync + Send) {
    use rayon::prelude::*;
    if buf.len() / chunk.max(1) > 1 {
        buf.par_chunks_mut(chunk).enumerate().for_each(|(ni, c)| f(ni, c));
    } else {
        for (ni, c) in buf.chunks_mut(chunk).enumerate() {
            f(ni, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct six-nested-loop convolution.
    fn naive_conv(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
        let cg = g.c_in / g.groups;
        let og = g.c_out / g.groups;
        let mut out = vec![0.0; g.n * g.c_out * g.ho * g.wo];
        for n in 0..g.n {
            for co in 0..g.c_out {
                let grp = co / og;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let mut acc = b.map_or(0.0, |b| b[co]);
                        for ci in 0..cg {
                            let cin = grp * cg + ci;
                            for ky in 0..g.k {
                                for kx in 0..g.k {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                        continue;
                                    }
                                    acc += x[((n * g.c_in + cin) * g.h + iy as usize) * g.w + ix as usize]
                                        * w[((co * cg + ci) * g.k + ky) * g.k + kx];
                                }
                            }
                        }
                        out[((n * g.c_out + co) * g.ho + oy) * g.wo + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn all_ones_sum() {
        let g = ConvGeom::new([1, 1, 3, 3], 1, 3, 1, 0, 1).unwrap();
        let out = conv2d_forward(&[1.0f32; 9], &[1.0f32; 9], None, &g);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn identity_kernel() {
        let g = ConvGeom::new([1, 1, 4, 5], 1, 1, 1, 0, 1).unwrap();
        let x: Vec<f32> = (0..20).map(|v| v as f32 * 0.5 - 3.0).collect();
        assert_eq!(conv2d_forward(&x, &[1.0], None, &g), x);
    }

    #[test]
    fn matches_naive_oracle_spec_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeom::new([2, 4, 8, 8], 6, 3, 2, 1, 1).unwrap();
        assert_eq!(g.out_shape(), [2, 6, 4, 4]);
        let x = rand_vec(&mut rng, 2 * 4 * 64);
        let w = rand_vec(&mut rng, 6 * 4 * 9);
        let got = conv2d_forward(&x, &w, None, &g);
        let want = naive_conv(&x, &w, None, &g);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn grouped_depthwise_and_pointwise_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(c_in, c_out, k, s, p, groups) in
            &[(6, 6, 3, 1, 1, 6), (6, 6, 5, 2, 2, 6), (4, 8, 1, 1, 0, 1), (4, 6, 3, 1, 1, 2), (3, 5, 1, 2, 0, 1)]
        {
            let g = ConvGeom::new([2, c_in, 7, 6], c_out, k, s, p, groups).unwrap();
            let x = rand_vec(&mut rng, 2 * c_in * 42);
            let w = rand_vec(&mut rng, c_out * (c_in / groups) * k * k);
            let b = rand_vec(&mut rng, c_out);
            let got = conv2d_forward(&x, &w, Some(&b), &g);
            let want = naive_conv(&x, &w, Some(&b), &g);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "{:?}", g);
            }
        }
    }

    #[test]
    fn output_extent_sweep() {
        for k in [1usize, 3, 5, 7] {
            for s in [1usize, 2] {
                for p in [0usize, 1, 3] {
                    for h in [7usize, 8, 13] {
                        let g = ConvGeom::new([1, 1, h, h], 1, k, s, p, 1).unwrap();
                        assert_eq!(g.ho, (h + 2 * p - k) / s + 1);
                        let out = conv2d_forward(&vec![1.0f32; h * h], &vec![1.0; k * k], None, &g);
                        assert_eq!(out.len(), g.ho * g.wo);
                    }
                }
            }
        }
    }

    /// Adjoint identity: <conv(x), dy> == <x, conv^T(dy)> and == <w, dW(x, dy)>.
    #[test]
    fn backward_is_adjoint_of_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(c_in, c_out, k, s, p, groups) in &[(4, 6, 3, 2, 1, 1), (6, 6, 3, 1, 1, 6), (4, 4, 1, 1, 0, 2), (6, 6, 5, 2, 2, 6)] {
            let g = ConvGeom::new([2, c_in, 9, 8], c_out, k, s, p, groups).unwrap();
            let x = rand_vec(&mut rng, 2 * c_in * 72);
            let w = rand_vec(&mut rng, c_out * (c_in / groups) * k * k);
            let dy = rand_vec(&mut rng, 2 * c_out * g.ho * g.wo);
            let y = conv2d_forward(&x, &w, None, &g);
            let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
            let dx = conv2d_backward_input(&w, &dy, &g);
            let rhs: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
            let (dw, _) = conv2d_backward_weight(&x, &dy, &g, false);
            let rhs_w: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
            assert!((lhs - rhs_w).abs() < 1e-9 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn transpose_doubles_resolution() {
        let g = transpose_geom([1, 2, 3, 3], 4, 2, 2, 0, 1).unwrap();
        assert_eq!((g.h, g.w), (6, 6));
        // weight [c_in=2, c_out=4, 2, 2] of ones: every output pixel sees exactly one input pixel per in-channel
        let x: Vec<f32> = (0..18).map(|v| v as f32).collect();
        let out = conv_transpose2d_forward(&x, &[1.0f32; 32], None, &g);
        assert_eq!(out.len(), 4 * 36);
        assert_eq!(out[0], x[0] + x[9]);
        assert_eq!(out[7], x[0] + x[9]);
        assert_eq!(out[5], x[2] + x[11]);
    }
}
