use alloc::vec;
use alloc::vec::Vec;

use crate::error::{ensure, Result};
use crate::kernels::conv::out_extent;
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
    GlobalMax,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub nc: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl PoolGeom {
    pub fn new(dims: [usize; 4], kind: PoolKind, k: usize, stride: usize) -> Result<Self> {
        let [n, c, h, w] = dims;
        match kind {
            PoolKind::GlobalAvg | PoolKind::GlobalMax => {
                ensure!(h * w > 0, "global pooling over an empty map");
                Ok(Self { nc: n * c, h, w, k: 0, stride: 0, ho: 1, wo: 1 })
            }
            PoolKind::Max | PoolKind::Avg => {
                ensure!(k >= 1 && stride >= 1, "pool kernel and stride must be positive");
                ensure!(k <= h && k <= w, "pool kernel {} larger than input {}x{}", k, h, w);
                Ok(Self { nc: n * c, h, w, k, stride, ho: out_extent(h, k, stride, 0), wo: out_extent(w, k, stride, 0) })
            }
        }
    }
}

/// Returns the pooled values and, for max kinds, the flat argmax of each output
/// within its (n, c) plane.
pub fn pool_forward<T: Scalar>(x: &[T], kind: PoolKind, g: &PoolGeom) -> (Vec<T>, Vec<u32>) {
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut out = vec![T::ZERO; g.nc * out_plane];
    let is_max = matches!(kind, PoolKind::Max | PoolKind::GlobalMax);
    let mut arg = if is_max { vec![0u32; g.nc * out_plane] } else { Vec::new() };
    for p in 0..g.nc {
        let src = &x[p * plane..(p + 1) * plane];
        match kind {
            PoolKind::GlobalAvg => {
                out[p] = src.iter().copied().sum::<T>() / T::from_usize(plane);
            }
            PoolKind::GlobalMax => {
                let (i, v) = argmax(src.iter().copied().enumerate());
                out[p] = v;
                arg[p] = i as u32;
            }
            PoolKind::Max | PoolKind::Avg => {
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let o = p * out_plane + oy * g.wo + ox;
                        let window = (0..g.k).flat_map(|ky| {
                            let iy = oy * g.stride + ky;
                            (0..g.k).map(move |kx| iy * g.w + ox * g.stride + kx)
                        });
                        if is_max {
                            let (i, v) = argmax(window.map(|i| (i, src[i])));
                            out[o] = v;
                            arg[o] = i as u32;
                        } else {
                            let s: T = window.map(|i| src[i]).sum();
                            out[o] = s / T::from_usize(g.k * g.k);
                        }
                    }
                }
            }
        }
    }
    (out, arg)
}

/// First maximum wins, so ties route the gradient to the lowest index.
fn argmax<T: Scalar>(mut it: impl Iterator<Item = (usize, T)>) -> (usize, T) {
    let mut best = it.next().expect("non-empty window");
    for (i, v) in it {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

pub fn pool_backward<T: Scalar>(dy: &[T], kind: PoolKind, g: &PoolGeom, arg: &[u32]) -> Vec<T> {
    let plane = g.h * g.w;
    let out_plane = g.ho * g.wo;
    let mut dx = vec![T::ZERO; g.nc * plane];
    for p in 0..g.nc {
        let d = &mut dx[p * plane..(p + 1) * plane];
        match kind {
            PoolKind::GlobalAvg => {
                let v = dy[p] / T::from_usize(plane);
                d.iter_mut().for_each(|x| *x = v);
            }
            PoolKind::GlobalMax | PoolKind::Max => {
                for o in 0..out_plane {
                    d[arg[p * out_plane + o] as usize] += dy[p * out_plane + o];
                }
            }
            PoolKind::Avg => {
                let scale = T::ONE / T::from_usize(g.k * g.k);
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        let v = dy[p * out_plane + oy * g.wo + ox] * scale;
                        for ky in 0..g.k {
                            let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                            d[row..row + g.k].iter_mut().for_each(|x| *x += v);
                        }
                    }
                }
            }
        }
    }
    dx
}
